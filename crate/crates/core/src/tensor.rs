//! Dense rank-4 tensors and the convolution / elementwise kernels the rest of
//! the crate is built on. There is no autodiff: every backward pass is an
//! explicit function.
//!
//! Convolution follows the cross-correlation convention (the kernel is not
//! flipped). Products are accumulated in `f64` and rounded to `f32` once per
//! output element, so a sum of `±a` terms is exact before the final rounding.

use crate::error::{PcnnError, Result};
use crate::parallel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per sample.
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KernelShape {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
}

impl KernelShape {
    pub const fn new(out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Self {
        KernelShape { out_ch, in_ch, kh, kw }
    }

    pub const fn len(&self) -> usize {
        self.out_ch * self.in_ch * self.kh * self.kw
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements of one output-channel kernel (`in_ch * kh * kw`).
    pub const fn per_kernel(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
}

/// Feature maps in N, C, H, W order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(shape: Shape4, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(PcnnError::shape("Tensor4::new", shape, data.len()));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let l = self.shape.sample_len();
        &self.data[n * l..(n + 1) * l]
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Tensor4::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn hadamard(&self, other: &Tensor4) -> Result<Tensor4> {
        if self.shape != other.shape {
            return Err(PcnnError::shape("hadamard", self.shape, other.shape));
        }
        Ok(Tensor4 {
            shape: self.shape,
            data: hadamard(&self.data, &other.data)?,
        })
    }

    /// Copy channels `start..start + len` of every sample.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Tensor4> {
        let s = self.shape;
        if start + len > s.c {
            return Err(PcnnError::shape("channel_slice", s, start..start + len));
        }
        let plane = s.h * s.w;
        let mut out = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            out.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Tensor4 {
            shape: Shape4::new(s.n, len, s.h, s.w),
            data: out,
        })
    }
}

/// Convolution kernels in OUT, IN, KH, KW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel4 {
    shape: KernelShape,
    data: Vec<f32>,
}

impl Kernel4 {
    pub fn new(shape: KernelShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(PcnnError::shape("Kernel4::new", shape, data.len()));
        }
        Ok(Kernel4 { shape, data })
    }

    pub fn zeros(shape: KernelShape) -> Self {
        Kernel4 {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: KernelShape, value: f32) -> Self {
        Kernel4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> KernelShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, o: usize, c: usize, y: usize, x: usize) -> f32 {
        let s = self.shape;
        self.data[((o * s.in_ch + c) * s.kh + y) * s.kw + x]
    }

    /// The `in_ch * kh * kw` entries of output channel `o`.
    pub fn kernel(&self, o: usize) -> &[f32] {
        let p = self.shape.per_kernel();
        &self.data[o * p..(o + 1) * p]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Kernel4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn hadamard(&self, other: &Kernel4) -> Result<Kernel4> {
        if self.shape != other.shape {
            return Err(PcnnError::shape("hadamard", self.shape, other.shape));
        }
        Ok(Kernel4 {
            shape: self.shape,
            data: hadamard(&self.data, &other.data)?,
        })
    }

    /// Stack kernels along the output-channel axis.
    pub fn concat_out(parts: &[Kernel4]) -> Result<Kernel4> {
        let first = parts
            .first()
            .ok_or_else(|| PcnnError::shape("concat_out", "empty list", "≥1 kernel"))?
            .shape;
        let mut out_ch = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = p.shape;
            if (s.in_ch, s.kh, s.kw) != (first.in_ch, first.kh, first.kw) {
                return Err(PcnnError::shape("concat_out", first, s));
            }
            out_ch += s.out_ch;
            data.extend_from_slice(&p.data);
        }
        Kernel4::new(KernelShape::new(out_ch, first.in_ch, first.kh, first.kw), data)
    }
}

pub fn hadamard(a: &[f32], b: &[f32]) -> Result<Vec<f32>> {
    if a.len() != b.len() {
        return Err(PcnnError::shape("hadamard", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

/// Concatenate along the channel axis. All parts must agree on n, h, w.
pub fn channel_concat(parts: &[&Tensor4]) -> Result<Tensor4> {
    let first = parts
        .first()
        .ok_or_else(|| PcnnError::shape("channel_concat", "empty list", "≥1 tensor"))?
        .shape;
    for p in parts {
        let s = p.shape;
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(PcnnError::shape("channel_concat", first, s));
        }
    }
    let c: usize = parts.iter().map(|p| p.shape.c).sum();
    let plane = first.h * first.w;
    let mut data = Vec::with_capacity(first.n * c * plane);
    for n in 0..first.n {
        for p in parts {
            let l = p.shape.c * plane;
            data.extend_from_slice(&p.data[n * l..(n + 1) * l]);
        }
    }
    Tensor4::new(Shape4::new(first.n, c, first.h, first.w), data)
}

pub fn sum(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64).sum()
}

pub fn mean(x: &[f32]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        sum(x) / x.len() as f64
    }
}

pub fn l1_norm(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64).abs()).sum()
}

/// Spatial output size of a convolution or pooling window.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Shape-checked geometry shared by forward and backward.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    input: Shape4,
    kernel: KernelShape,
    groups: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: Shape4, kernel: KernelShape, stride: usize, pad: usize, groups: usize) -> Result<Self> {
        if groups == 0
            || stride == 0
            || kernel.in_ch * groups != input.c
            || kernel.out_ch % groups != 0
        {
            return Err(PcnnError::shape("conv2d", input, kernel));
        }
        let oh = conv_out_dim(input.h, kernel.kh, stride, pad);
        let ow = conv_out_dim(input.w, kernel.kw, stride, pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(ConvGeom {
                input,
                kernel,
                groups,
                stride,
                pad,
                oh,
                ow,
            }),
            _ => Err(PcnnError::shape("conv2d", input, kernel)),
        }
    }

    fn output(&self) -> Shape4 {
        Shape4::new(self.input.n, self.kernel.out_ch, self.oh, self.ow)
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn out_per_group(&self) -> usize {
        self.kernel.out_ch / self.groups
    }

    /// Unfold one group of one sample into a (in_ch*kh*kw) x (oh*ow) matrix.
    fn im2col(&self, sample: &[f32], group: usize, cols: &mut [f64]) {
        let (h, w) = (self.input.h as isize, self.input.w as isize);
        let k = self.kernel;
        let p = self.positions();
        let plane = self.input.h * self.input.w;
        for c in 0..k.in_ch {
            let src = &sample[(group * k.in_ch + c) * plane..][..plane];
            for ky in 0..k.kh {
                for kx in 0..k.kw {
                    let row = &mut cols[((c * k.kh + ky) * k.kw + kx) * p..][..p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= h {
                            dst.fill(0.0);
                            continue;
                        }
                        let src_row = &src[iy as usize * self.input.w..][..self.input.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= w {
                                0.0
                            } else {
                                src_row[ix as usize] as f64
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add the column matrix back onto one group of a sample gradient.
    fn col2im(&self, cols: &[f64], group: usize, grad: &mut [f64]) {
        let (h, w) = (self.input.h as isize, self.input.w as isize);
        let k = self.kernel;
        let p = self.positions();
        let plane = self.input.h * self.input.w;
        for c in 0..k.in_ch {
            let dst = &mut grad[(group * k.in_ch + c) * plane..][..plane];
            for ky in 0..k.kh {
                for kx in 0..k.kw {
                    let row = &cols[((c * k.kh + ky) * k.kw + kx) * p..][..p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let base = iy as usize * self.input.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w {
                                dst[base + ix as usize] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// C = A(m x k) * B(k x n) + beta * C, with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D cross-correlation: `out[n,o,y,x] = Σ_{c,ky,kx} in[n,c,y*s+ky-p,x*s+kx-p] * k[o,c,ky,kx]`.
pub fn conv2d(input: &Tensor4, kernel: &Kernel4, stride: usize, pad: usize) -> Result<Tensor4> {
    conv2d_grouped(input, kernel, stride, pad, 1)
}

/// Grouped convolution: input channels and output channels are split into
/// `groups` equal blocks and block `g` of the output only sees block `g` of
/// the input. `kernel.in_ch` is the per-group input channel count.
pub fn conv2d_grouped(
    input: &Tensor4,
    kernel: &Kernel4,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor4> {
    let g = ConvGeom::new(input.shape, kernel.shape, stride, pad, groups)?;
    let out_shape = g.output();
    let mut out = vec![0.0f32; out_shape.len()];
    let kd: Vec<f64> = kernel.data.iter().map(|&v| v as f64).collect();
    let kk = kernel.shape.per_kernel();
    let p = g.positions();
    let opg = g.out_per_group();
    let out_sample = out_shape.sample_len();

    let run = |samples: std::ops::Range<usize>, out: &mut [f32]| {
        let mut cols = vec![0.0f64; kk * p];
        let mut acc = vec![0.0f64; opg * p];
        for (local, n) in samples.enumerate() {
            let src = input.sample(n);
            let dst = &mut out[local * out_sample..(local + 1) * out_sample];
            for grp in 0..groups {
                g.im2col(src, grp, &mut cols);
                let kslice = &kd[grp * opg * kk..(grp + 1) * opg * kk];
                dgemm(opg, kk, p, kslice, (kk, 1), &cols, (p, 1), 0.0, &mut acc);
                for (d, &a) in dst[grp * opg * p..(grp + 1) * opg * p].iter_mut().zip(&acc) {
                    *d = a as f32;
                }
            }
        }
    };

    let ranges = parallel::chunks(out_shape.n);
    if ranges.len() <= 1 {
        run(0..out_shape.n, &mut out);
    } else {
        std::thread::scope(|s| {
            let mut rest: &mut [f32] = &mut out;
            for r in ranges {
                let (head, tail) = rest.split_at_mut(r.len() * out_sample);
                rest = tail;
                let run = &run;
                s.spawn(move || run(r, head));
            }
        });
    }
    Tensor4::new(out_shape, out)
}

pub fn conv2d_backward(
    input: &Tensor4,
    kernel: &Kernel4,
    grad_out: &Tensor4,
    stride: usize,
    pad: usize,
) -> Result<(Tensor4, Kernel4)> {
    conv2d_grouped_backward(input, kernel, grad_out, stride, pad, 1)
}

/// Adjoint of [`conv2d_grouped`]: returns `(∂/∂input, ∂/∂kernel)` of
/// `Σ grad_out ∘ conv(input, kernel)`.
pub fn conv2d_grouped_backward(
    input: &Tensor4,
    kernel: &Kernel4,
    grad_out: &Tensor4,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<(Tensor4, Kernel4)> {
    let g = ConvGeom::new(input.shape, kernel.shape, stride, pad, groups)?;
    if grad_out.shape != g.output() {
        return Err(PcnnError::shape("conv2d_backward", grad_out.shape, g.output()));
    }
    let kd: Vec<f64> = kernel.data.iter().map(|&v| v as f64).collect();
    let kk = kernel.shape.per_kernel();
    let p = g.positions();
    let opg = g.out_per_group();
    let in_sample = input.shape.sample_len();
    let out_sample = grad_out.shape.sample_len();
    let mut grad_in = vec![0.0f32; input.shape.len()];

    // Each worker returns its partial kernel gradient; partials are summed in
    // range order so the result depends only on the thread count.
    let run = |samples: std::ops::Range<usize>, gin: &mut [f32]| -> Vec<f64> {
        let mut gk = vec![0.0f64; kd.len()];
        let mut cols = vec![0.0f64; kk * p];
        let mut gcols = vec![0.0f64; kk * p];
        let mut go = vec![0.0f64; opg * p];
        let mut gin64 = vec![0.0f64; in_sample];
        for (local, n) in samples.enumerate() {
            let src = input.sample(n);
            let gsrc = grad_out.sample(n);
            gin64.fill(0.0);
            for grp in 0..groups {
                for (d, &v) in go.iter_mut().zip(&gsrc[grp * opg * p..(grp + 1) * opg * p]) {
                    *d = v as f64;
                }
                g.im2col(src, grp, &mut cols);
                // dK_g += dY_g (opg x p) * cols^T (p x kk)
                let gk_g = &mut gk[grp * opg * kk..(grp + 1) * opg * kk];
                dgemm(opg, p, kk, &go, (p, 1), &cols, (1, p), 1.0, gk_g);
                // dcols = K_g^T (kk x opg) * dY_g (opg x p)
                let kslice = &kd[grp * opg * kk..(grp + 1) * opg * kk];
                dgemm(kk, opg, p, kslice, (1, kk), &go, (p, 1), 0.0, &mut gcols);
                g.col2im(&gcols, grp, &mut gin64);
            }
            let dst = &mut gin[local * in_sample..(local + 1) * in_sample];
            for (d, &v) in dst.iter_mut().zip(&gin64) {
                *d = v as f32;
            }
        }
        gk
    };

    let n = input.shape.n;
    let ranges = parallel::chunks(n);
    let partials: Vec<Vec<f64>> = if ranges.len() <= 1 {
        vec![run(0..n, &mut grad_in)]
    } else {
        std::thread::scope(|s| {
            let mut rest: &mut [f32] = &mut grad_in;
            let mut handles = Vec::new();
            for r in ranges {
                let (head, tail) = rest.split_at_mut(r.len() * in_sample);
                rest = tail;
                let run = &run;
                handles.push(s.spawn(move || run(r, head)));
            }
            handles.into_iter().map(|h| h.join().expect("conv worker panicked")).collect()
        })
    };
    let mut gk = vec![0.0f64; kd.len()];
    for part in &partials {
        for (a, b) in gk.iter_mut().zip(part) {
            *a += b;
        }
    }
    let _ = out_sample;
    Ok((
        Tensor4::new(input.shape, grad_in)?,
        Kernel4::new(kernel.shape, gk.into_iter().map(|v| v as f32).collect())?,
    ))
}
