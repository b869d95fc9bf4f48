//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.
#![allow(dead_code)]

use std::path::PathBuf;

use pcnn::bitpack::{xnor_conv, PackedActivations, PackedKernel};
use pcnn::data::{load_mnist, Dataset, Split};
use pcnn::losses::{grad_c_projection, grad_w_projection};
use pcnn::proj_conv::{DupMode, LayerCache, ProjConvLayer};
use pcnn::tensor::{conv2d_grouped, conv2d_grouped_backward, Kernel4, KernelShape, Shape4, Tensor4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tensor(shape: Shape4, mut f: impl FnMut() -> f32) -> Tensor4 {
    Tensor4::new(shape, (0..shape.len()).map(|_| f()).collect()).unwrap()
}

pub fn kernel(shape: KernelShape, mut f: impl FnMut() -> f32) -> Kernel4 {
    Kernel4::new(shape, (0..shape.len()).map(|_| f()).collect()).unwrap()
}

/// Multiple of `1/denom` in `[-range, range]`.
pub fn dyadic(rng: &mut impl Rng, range: i32, denom: i32) -> f32 {
    rng.gen_range(-range * denom..=range * denom) as f32 / denom as f32
}

pub fn pm1(rng: &mut impl Rng) -> f32 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// Random convolution geometry with a non-empty output.
#[derive(Clone, Copy, Debug)]
pub struct ConvCase {
    pub input: Shape4,
    pub kernel: KernelShape,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

pub fn conv_case(rng: &mut impl Rng) -> ConvCase {
    loop {
        let groups = rng.gen_range(1..=2);
        let in_per = rng.gen_range(1..=4 / groups);
        let out_per = rng.gen_range(1..=4 / groups);
        let kh = rng.gen_range(1..=3);
        let kw = rng.gen_range(1..=3);
        let h = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=8);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=2);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            continue;
        }
        return ConvCase {
            input: Shape4::new(rng.gen_range(1..=2), in_per * groups, h, w),
            kernel: KernelShape::new(out_per * groups, in_per, kh, kw),
            stride,
            pad,
            groups,
        };
    }
}

/// Direct nested-loop grouped cross-correlation in f64.
pub fn reference_conv(x: &Tensor4, k: &Kernel4, stride: usize, pad: usize, groups: usize) -> (Shape4, Vec<f64>) {
    let xs = x.shape();
    let ks = k.shape();
    let oh = (xs.h + 2 * pad - ks.kh) / stride + 1;
    let ow = (xs.w + 2 * pad - ks.kw) / stride + 1;
    let out_per = ks.out_ch / groups;
    let shape = Shape4::new(xs.n, ks.out_ch, oh, ow);
    let mut out = vec![0.0f64; shape.len()];
    for n in 0..xs.n {
        for o in 0..ks.out_ch {
            let g = o / out_per;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..ks.in_ch {
                        for ky in 0..ks.kh {
                            for kx in 0..ks.kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                let xv = x.at(n, g * ks.in_ch + c, iy as usize, ix as usize) as f64;
                                acc += xv * k.at(o, c, ky, kx) as f64;
                            }
                        }
                    }
                    out[((n * ks.out_ch + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (shape, out)
}

/// Largest absolute difference between `conv2d_grouped` and the reference
/// on one random instance.
pub fn conv_forward_error(rng: &mut impl Rng) -> f64 {
    let c = conv_case(rng);
    let x = tensor(c.input, || rng.gen_range(-1.0..1.0));
    let k = kernel(c.kernel, || rng.gen_range(-1.0..1.0));
    let y = conv2d_grouped(&x, &k, c.stride, c.pad, c.groups).unwrap();
    let (shape, r) = reference_conv(&x, &k, c.stride, c.pad, c.groups);
    assert_eq!(y.shape(), shape);
    y.data().iter().zip(&r).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max)
}

/// Step used for convolution finite differences: the power of two nearest
/// 1e-3, so perturbed dyadic operands stay exactly representable.
pub const CONV_FD_STEP: f32 = 1.0 / 1024.0;

fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// Largest relative error of `conv2d_grouped_backward` against central
/// differences of `Σ g · conv(x, k)` over every input and kernel entry.
pub fn conv_backward_error(rng: &mut impl Rng) -> f64 {
    let c = conv_case(rng);
    let x = tensor(c.input, || dyadic(rng, 2, 8));
    let k = kernel(c.kernel, || dyadic(rng, 1, 16));
    let out_shape = reference_conv(&x, &k, c.stride, c.pad, c.groups).0;
    let g = tensor(out_shape, || dyadic(rng, 1, 4));
    let objective = |x: &Tensor4, k: &Kernel4| -> f64 {
        let y = conv2d_grouped(x, k, c.stride, c.pad, c.groups).unwrap();
        y.data().iter().zip(g.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
    };
    let (gx, gk) = conv2d_grouped_backward(&x, &k, &g, c.stride, c.pad, c.groups).unwrap();
    let h = CONV_FD_STEP;
    let mut worst = 0.0f64;
    for i in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (objective(&xp, &k) - objective(&xm, &k)) / (2.0 * h as f64);
        worst = worst.max(rel_err(gx.data()[i] as f64, fd));
    }
    for i in 0..k.data().len() {
        let mut kp = k.clone();
        kp.data_mut()[i] += h;
        let mut km = k.clone();
        km.data_mut()[i] -= h;
        let fd = (objective(&x, &kp) - objective(&x, &km)) / (2.0 * h as f64);
        worst = worst.max(rel_err(gk.data()[i] as f64, fd));
    }
    worst
}

/// Compare `xnor_conv` with float convolution of the unpacked `±1`
/// operands. Returns the number of mismatching outputs.
pub fn xnor_mismatches(rng: &mut impl Rng) -> usize {
    let c = conv_case(rng);
    let x = tensor(c.input, || pm1(rng));
    let k = kernel(c.kernel, || pm1(rng));
    let px = PackedActivations::pack(&x, 1.0).unwrap();
    let pk = PackedKernel::pack(&k, 1.0).unwrap();
    let got = xnor_conv(&px, &pk, c.stride, c.pad).unwrap();
    let want = conv2d_grouped(&px.unpack(), &pk.unpack(), c.stride, c.pad, c.groups).unwrap();
    assert_eq!(got.shape, want.shape());
    got.data.iter().zip(want.data()).filter(|(&a, &b)| a as f32 != b).count()
}

/// A projection layer with a fixed quantization and a task gradient `δ_Ĉ`.
pub struct ProjCase {
    pub layer: ProjConvLayer,
    pub cache: LayerCache,
    pub d_chat: Vec<Kernel4>,
    pub eta: f64,
    pub lambda: f64,
}

/// Random projection-layer instance, or `None` when some `mean(W_j)·C`
/// lies within `margin` of the projection midpoint.
pub fn proj_case(rng: &mut impl Rng, margin: f32) -> Option<ProjCase> {
    let j = rng.gen_range(1..=3);
    let i = rng.gen_range(1..=4);
    let in_base = rng.gen_range(1..=3);
    let ks = if rng.gen_bool(0.5) { 3 } else { 1 };
    let shape = KernelShape::new(i, in_base, ks, ks);
    let c = kernel(shape, || rng.gen_range(-1.5..1.5));
    let w: Vec<f32> = (0..j * ks * ks).map(|_| rng.gen_range(0.5..1.5)).collect();
    let layer = ProjConvLayer::new("case", c, w, 1, ks / 2, rng.gen_bool(0.5)).unwrap();
    for jj in 0..j {
        let m = layer.w_tilde(jj, DupMode::Mean).data()[0];
        if layer.kernels().data().iter().any(|&v| (m * v).abs() < margin) {
            return None;
        }
    }
    let q = layer.quantize().unwrap();
    let d_chat = (0..j).map(|_| kernel(shape, || rng.gen_range(-1.0..1.0))).collect();
    let dummy = Tensor4::zeros(Shape4::new(1, layer.in_channels(), ks, ks));
    let cache = LayerCache {
        input: dummy.clone(),
        conv_input: dummy.clone(),
        omega: q.omega,
        w_tilde: (0..j).map(|jj| layer.w_tilde(jj, DupMode::Exact)).collect(),
        c_hat: q.c_hat,
        d: q.d,
        output: dummy,
    };
    Some(ProjCase {
        layer,
        cache,
        d_chat,
        eta: rng.gen_range(1e-3..0.2),
        lambda: 10f64.powf(rng.gen_range(-4.0..0.0)),
    })
}

/// `(λ/2) Σ_{i,j,e} (ĉ − w_{j,e}(c + η δ))²` with the quantized kernels and
/// `δ` held fixed, evaluated in f64 from plain arrays.
pub fn projection_loss_oracle(case: &ProjCase, c: &[f64], w: &[f64]) -> f64 {
    let s = case.layer.kernels().shape();
    let per = s.per_kernel();
    let plane = s.kh * s.kw;
    let mut acc = 0.0;
    for j in 0..case.layer.num_projections() {
        let ch = case.cache.c_hat[j].data();
        let d = case.d_chat[j].data();
        for idx in 0..c.len() {
            let e = idx % per;
            let wv = w[j * plane + e % plane];
            let r = ch[idx] as f64 - wv * (c[idx] + case.eta * d[idx] as f64);
            acc += r * r;
        }
    }
    0.5 * case.lambda * acc
}

/// Worst per-entry relative error of the analytic projection-loss
/// gradients against central differences of the oracle, `(δ_C, δ_W)`.
pub fn projection_grad_errors(case: &ProjCase) -> (f64, f64) {
    let c: Vec<f64> = case.layer.kernels().data().iter().map(|&v| v as f64).collect();
    let w: Vec<f64> = case.layer.projections().iter().map(|&v| v as f64).collect();
    let gc = grad_c_projection(&case.layer, &case.cache, &case.d_chat, case.eta, case.lambda).unwrap();
    let gw = grad_w_projection(&case.layer, &case.cache, &case.d_chat, case.eta, case.lambda).unwrap();
    let h = 1e-3;
    let fd = |v: &[f64], i: usize, f: &dyn Fn(&[f64]) -> f64| {
        let mut p = v.to_vec();
        p[i] += h;
        let mut m = v.to_vec();
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    };
    let floor = |a: f64, b: f64| if (a - b).abs() < 1e-12 { 0.0 } else { rel_err(a, b) };
    let ec = (0..c.len())
        .map(|i| floor(gc.data()[i] as f64, fd(&c, i, &|cc| projection_loss_oracle(case, cc, &w))))
        .fold(0.0, f64::max);
    let ew = (0..w.len())
        .map(|i| floor(gw[i] as f64, fd(&w, i, &|ww| projection_loss_oracle(case, &c, ww))))
        .fold(0.0, f64::max);
    (ec, ew)
}

/// MNIST directory: `PCNN_MNIST_DIR` or `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("PCNN_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn load_mnist_pair() -> Option<(Dataset, Dataset)> {
    let dir = mnist_dir();
    Some((load_mnist(&dir, Split::Train).ok()?, load_mnist(&dir, Split::Test).ok()?))
}
