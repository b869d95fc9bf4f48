//! Task loss, projection loss and the explicit gradients of the projection
//! layer parameters, plus the momentum SGD step.
//!
//! Notation in this module: `C` is the full-precision kernel tensor of a
//! layer (`I x in_base x kh x kw`), `W̃_j` the exact-mode duplication of the
//! `j`-th projection matrix, `Ĉ_{·,j}` the cached quantized kernels and
//! `δ_j = ∂L_S/∂Ĉ_{·,j}`. Every sum below runs over `i`, `j` and all kernel
//! elements; projection-matrix gradients additionally sum over the
//! duplicated channel planes to get back to `kh x kw`.

use crate::error::{PcnnError, Result};
use crate::proj_conv::{LayerCache, ProjConvLayer};
use crate::tensor::{Kernel4, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_p: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(l_s: f64, l_p: f64, lambda: f64) -> Self {
        LossBreakdown {
            l_s,
            l_p,
            total: l_s + l_p,
            lambda,
        }
    }
}

/// Gradients of one projection layer.
#[derive(Clone, Debug)]
pub struct ProjGrads {
    /// `δ_Ĉ_{·,j}` from the task loss, one entry per projection.
    pub d_chat: Vec<Kernel4>,
    pub d_c: Kernel4,
    /// `J` matrices of `kh x kw`, back to back.
    pub d_w: Vec<f32>,
}

/// Gradients for every projection layer of a network, in layer order.
pub type GradSet = Vec<ProjGrads>;

/// Mean softmax cross-entropy over the batch. `logits` is `n x K x 1 x 1`.
pub fn cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 || s.n != labels.len() || s.n == 0 {
        return Err(PcnnError::shape("cross_entropy", s, labels.len()));
    }
    let k = s.c;
    let mut grad = vec![0.0f32; s.len()];
    let mut loss = 0.0f64;
    let inv_n = 1.0 / s.n as f64;
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(PcnnError::LabelOutOfRange { label, classes: k });
        }
        let row = &logits.data()[n * k..(n + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[label] as f64;
        for (c, e) in exps.iter().enumerate() {
            let p = e / z;
            let t = if c == label { 1.0 } else { 0.0 };
            grad[n * k + c] = ((p - t) * inv_n) as f32;
        }
    }
    Ok((loss * inv_n, Tensor4::new(Shape4::new(s.n, k, 1, 1), grad)?))
}

fn check_d_chat(layer: &ProjConvLayer, cache: &LayerCache, d_chat: &[Kernel4]) -> Result<()> {
    let s = layer.kernels().shape();
    let j = layer.num_projections();
    if d_chat.len() != j || cache.c_hat.len() != j || cache.w_tilde.len() != j {
        return Err(PcnnError::shape("projection gradients", j, d_chat.len()));
    }
    for (d, c) in d_chat.iter().zip(&cache.c_hat) {
        if d.shape() != s || c.shape() != s {
            return Err(PcnnError::shape("projection gradients", s, d.shape()));
        }
    }
    Ok(())
}

/// Walk every `(i, j, e)` element with the values the formulas need:
/// `(i, e_in_kernel, c, w̃, ĉ, δ)`.
fn for_each_term(
    layer: &ProjConvLayer,
    cache: &LayerCache,
    d_chat: &[Kernel4],
    mut f: impl FnMut(usize, usize, usize, f64, f64, f64, f64),
) {
    let c = layer.kernels().data();
    let per = layer.kernels().shape().per_kernel();
    for j in 0..layer.num_projections() {
        let wt = cache.w_tilde[j].data();
        let ch = cache.c_hat[j].data();
        let dj = d_chat[j].data();
        for (idx, &cv) in c.iter().enumerate() {
            let e = idx % per;
            f(
                j,
                idx,
                e,
                cv as f64,
                wt[e] as f64,
                ch[idx] as f64,
                dj[idx] as f64,
            );
        }
    }
}

/// `(λ/2) Σ_{i,j} ‖Ĉ_{i,j} − W̃_j ∘ (C_i + η δ_{i,j})‖²` for one layer.
pub fn layer_projection_loss(
    layer: &ProjConvLayer,
    cache: &LayerCache,
    d_chat: &[Kernel4],
    eta: f64,
    lambda: f64,
) -> Result<f64> {
    check_d_chat(layer, cache, d_chat)?;
    let mut acc = 0.0f64;
    for_each_term(layer, cache, d_chat, |_, _, _, c, w, ch, d| {
        let r = ch - w * (c + eta * d);
        acc += r * r;
    });
    Ok(0.5 * lambda * acc)
}

/// Projection loss summed over layers.
pub fn projection_loss(
    layers: &[(&ProjConvLayer, &LayerCache, &[Kernel4])],
    eta: f64,
    lambda: f64,
) -> Result<f64> {
    layers
        .iter()
        .map(|(l, c, d)| layer_projection_loss(l, c, d, eta, lambda))
        .sum()
}

#[inline]
fn in_unit_box(v: f64) -> bool {
    (-1.0..=1.0).contains(&v)
}

/// Task-loss part of `δ_C`: `Σ_j δ_{i,j} ∘ 1[-1 ≤ W̃_j∘C_i ≤ 1] ∘ W̃_j`.
pub fn grad_c_task(layer: &ProjConvLayer, cache: &LayerCache, d_chat: &[Kernel4]) -> Result<Kernel4> {
    check_d_chat(layer, cache, d_chat)?;
    let mut out = vec![0.0f64; layer.kernels().shape().len()];
    for_each_term(layer, cache, d_chat, |_, idx, _, c, w, _, d| {
        if in_unit_box(w * c) {
            out[idx] += d * w;
        }
    });
    Kernel4::new(layer.kernels().shape(), out.into_iter().map(|v| v as f32).collect())
}

/// Projection-loss part of `δ_C`: `λ Σ_j [W̃_j∘(C_i + ηδ_{i,j}) − Ĉ_{i,j}] ∘ W̃_j`.
pub fn grad_c_projection(
    layer: &ProjConvLayer,
    cache: &LayerCache,
    d_chat: &[Kernel4],
    eta: f64,
    lambda: f64,
) -> Result<Kernel4> {
    check_d_chat(layer, cache, d_chat)?;
    let mut out = vec![0.0f64; layer.kernels().shape().len()];
    for_each_term(layer, cache, d_chat, |_, idx, _, c, w, ch, d| {
        out[idx] += (w * (c + eta * d) - ch) * w;
    });
    Kernel4::new(
        layer.kernels().shape(),
        out.into_iter().map(|v| (lambda * v) as f32).collect(),
    )
}

/// Full `δ_C = ∂L_S/∂C + ∂L_P/∂C`.
pub fn grad_c(
    layer: &ProjConvLayer,
    cache: &LayerCache,
    d_chat: &[Kernel4],
    eta: f64,
    lambda: f64,
) -> Result<Kernel4> {
    let task = grad_c_task(layer, cache, d_chat)?;
    let proj = grad_c_projection(layer, cache, d_chat, eta, lambda)?;
    let data = task.data().iter().zip(proj.data()).map(|(a, b)| a + b).collect();
    Kernel4::new(task.shape(), data)
}

/// Index of `W_j[y, x]` for kernel element `e`.
#[inline]
fn plane_index(j: usize, e: usize, plane: usize) -> usize {
    j * plane + e % plane
}

/// Task-loss part of `δ_W`: `Σ_h (Σ_i δ_{i,j} ∘ 1[-1 ≤ W̃_j∘C_i ≤ 1] ∘ C_i)_h`.
pub fn grad_w_task(layer: &ProjConvLayer, cache: &LayerCache, d_chat: &[Kernel4]) -> Result<Vec<f32>> {
    check_d_chat(layer, cache, d_chat)?;
    let s = layer.kernels().shape();
    let plane = s.kh * s.kw;
    let mut out = vec![0.0f64; layer.projections().len()];
    for_each_term(layer, cache, d_chat, |j, _, e, c, w, _, d| {
        if in_unit_box(w * c) {
            out[plane_index(j, e, plane)] += d * c;
        }
    });
    Ok(out.into_iter().map(|v| v as f32).collect())
}

/// Projection-loss part of `δ_W`:
/// `λ Σ_h (Σ_i [W̃_j∘(C_i + ηδ_{i,j}) − Ĉ_{i,j}] ∘ (C_i + ηδ_{i,j}))_h`.
pub fn grad_w_projection(
    layer: &ProjConvLayer,
    cache: &LayerCache,
    d_chat: &[Kernel4],
    eta: f64,
    lambda: f64,
) -> Result<Vec<f32>> {
    check_d_chat(layer, cache, d_chat)?;
    let s = layer.kernels().shape();
    let plane = s.kh * s.kw;
    let mut out = vec![0.0f64; layer.projections().len()];
    for_each_term(layer, cache, d_chat, |j, _, e, c, w, ch, d| {
        let shifted = c + eta * d;
        out[plane_index(j, e, plane)] += (w * shifted - ch) * shifted;
    });
    Ok(out.into_iter().map(|v| (lambda * v) as f32).collect())
}

/// Full `δ_W = ∂L_S/∂W + ∂L_P/∂W`.
pub fn grad_w(
    layer: &ProjConvLayer,
    cache: &LayerCache,
    d_chat: &[Kernel4],
    eta: f64,
    lambda: f64,
) -> Result<Vec<f32>> {
    let task = grad_w_task(layer, cache, d_chat)?;
    let proj = grad_w_projection(layer, cache, d_chat, eta, lambda)?;
    Ok(task.iter().zip(&proj).map(|(a, b)| a + b).collect())
}

/// One momentum-SGD step, in place:
/// `g' = g + wd·p; v ← μ·v + g'; p ← p − lr·v`.
/// With `μ = wd = 0` this is the plain `p ← p − lr·g`.
pub fn sgd_update(param: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f32, momentum: f32, weight_decay: f32) {
    assert_eq!(param.len(), grad.len(), "sgd_update: param/grad length");
    assert_eq!(param.len(), velocity.len(), "sgd_update: param/state length");
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = if weight_decay != 0.0 { g + weight_decay * *p } else { g };
        *v = if momentum != 0.0 { momentum * *v + g } else { g };
        *p -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::KernelShape;

    fn scalar_layer(c: f32) -> ProjConvLayer {
        let k = Kernel4::new(KernelShape::new(1, 1, 1, 1), vec![c]).unwrap();
        ProjConvLayer::new("toy", k, vec![1.0], 1, 0, false).unwrap()
    }

    /// Cache for the scalar toy with Ω = {-0.5, 0.5} forced.
    fn scalar_cache(layer: &ProjConvLayer) -> LayerCache {
        let x = Tensor4::new(Shape4::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let (_, mut cache) = layer.forward(&x).unwrap();
        cache.omega = crate::projection::DiscreteSet::binary(0.5).unwrap();
        let v = cache.omega.project(layer.kernels().data()[0]);
        cache.c_hat = vec![Kernel4::new(KernelShape::new(1, 1, 1, 1), vec![v]).unwrap()];
        cache
    }

    fn delta(v: f32) -> Vec<Kernel4> {
        vec![Kernel4::new(KernelShape::new(1, 1, 1, 1), vec![v]).unwrap()]
    }

    #[test]
    fn cross_entropy_values() {
        let logits = Tensor4::zeros(Shape4::new(1, 4, 1, 1));
        let (l, g) = cross_entropy(&logits, &[2]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g.data()[2] + 0.75).abs() < 1e-7);
        assert!((g.data()[0] - 0.25).abs() < 1e-7);

        let logits = Tensor4::new(Shape4::new(1, 3, 1, 1), vec![0.0, 200.0, 0.0]).unwrap();
        let (l, _) = cross_entropy(&logits, &[1]).unwrap();
        assert!(l < 1e-80);

        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(PcnnError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn scalar_projection_loss() {
        let layer = scalar_layer(0.3);
        let cache = scalar_cache(&layer);
        assert_eq!(cache.c_hat[0].data(), &[0.5]);
        let l = layer_projection_loss(&layer, &cache, &delta(0.0), 0.0, 1.0).unwrap();
        assert!((l - 0.02).abs() < 1e-7, "{l}");
        let l = layer_projection_loss(&layer, &cache, &delta(1.0), 0.1, 1.0).unwrap();
        assert!((l - 0.005).abs() < 1e-7, "{l}");
        let l = layer_projection_loss(&layer, &cache, &delta(2.0), 0.1, 1.0).unwrap();
        assert!(l.abs() < 1e-12, "zero residual: {l}");
    }

    #[test]
    fn scalar_projection_gradients() {
        let layer = scalar_layer(0.3);
        let cache = scalar_cache(&layer);
        let d = delta(1.0);
        let gc = grad_c_projection(&layer, &cache, &d, 0.1, 1.0).unwrap();
        assert!((gc.data()[0] + 0.1).abs() < 1e-6, "{:?}", gc.data());
        let gw = grad_w_projection(&layer, &cache, &d, 0.1, 1.0).unwrap();
        assert!((gw[0] + 0.04).abs() < 1e-6, "{gw:?}");
    }

    #[test]
    fn indicator_masks_task_gradient() {
        let s = KernelShape::new(2, 2, 1, 2);
        let c = Kernel4::filled(s, 0.8);
        let layer = ProjConvLayer::new("p", c, vec![2.0, 3.0], 1, 0, false).unwrap();
        let x = Tensor4::zeros(Shape4::new(1, 2, 1, 2));
        let (_, cache) = layer.forward(&x).unwrap();
        let d = vec![Kernel4::filled(s, 1.0)];
        let g = grad_c(&layer, &cache, &d, 0.1, 0.0).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_kernel_zero_delta_gives_zero_w_projection_term() {
        let s = KernelShape::new(2, 1, 2, 2);
        let layer = ProjConvLayer::new("p", Kernel4::zeros(s), vec![0.3, -2.0, 5.0, 1.0], 1, 0, false).unwrap();
        let cache = LayerCache {
            input: Tensor4::zeros(Shape4::new(1, 1, 2, 2)),
            conv_input: Tensor4::zeros(Shape4::new(1, 1, 2, 2)),
            omega: crate::projection::DiscreteSet::binary(1.0).unwrap(),
            w_tilde: vec![layer.w_tilde(0, crate::proj_conv::DupMode::Exact)],
            c_hat: vec![Kernel4::filled(s, 1.0)],
            d: Kernel4::filled(s, 1.0),
            output: Tensor4::zeros(Shape4::new(1, 2, 1, 1)),
        };
        let g = grad_w_projection(&layer, &cache, &[Kernel4::zeros(s)], 0.1, 1.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_steps() {
        let mut p = [1.0f32];
        let mut v = [0.0f32];
        sgd_update(&mut p, &[0.5], &mut v, 0.1, 0.0, 0.0);
        assert_eq!(p, [0.95]);

        let mut p = [0.7f32];
        sgd_update(&mut p, &[0.0], &mut [0.0], 0.1, 0.0, 0.0);
        assert_eq!(p, [0.7]);

        let (lr, mu) = (0.1f32, 0.9f32);
        let (g1, g2) = (0.5f32, -0.25f32);
        let mut p = [1.0f32];
        let mut v = [0.0f32];
        sgd_update(&mut p, &[g1], &mut v, lr, mu, 0.0);
        sgd_update(&mut p, &[g2], &mut v, lr, mu, 0.0);
        let v1 = g1;
        let p1 = 1.0 - lr * v1;
        let v2 = mu * v1 + g2;
        let p2 = p1 - lr * v2;
        assert_eq!(p, [p2]);
        assert_eq!(v, [v2]);
    }
}
