//! Full-precision building blocks around the projection layers: plain
//! convolution, batch normalization, pooling and the linear classifier.
//! Each layer keeps its own cache and gradient buffers between a training
//! forward and the matching backward.

use rand::Rng;

use crate::error::{PcnnError, Result};
use crate::tensor::{conv2d, conv2d_backward, Kernel4, KernelShape, Shape4, Tensor4};

/// Uniform `(-1/√fan_in, 1/√fan_in)` initialization.
pub fn fan_in_uniform(rng: &mut impl Rng, len: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[derive(Clone, Debug)]
pub struct FpConv {
    pub name: String,
    pub weight: Kernel4,
    pub stride: usize,
    pub pad: usize,
    pub(crate) grad: Kernel4,
    cache: Option<Tensor4>,
}

impl FpConv {
    pub fn new(name: impl Into<String>, weight: Kernel4, stride: usize, pad: usize) -> Self {
        FpConv {
            name: name.into(),
            grad: Kernel4::zeros(weight.shape()),
            weight,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn init(name: impl Into<String>, shape: KernelShape, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let w = fan_in_uniform(rng, shape.len(), shape.per_kernel());
        FpConv::new(name, Kernel4::new(shape, w).expect("init length"), stride, pad)
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        conv2d(x, &self.weight, self.stride, self.pad)
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let y = self.forward_eval(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let x = self.cache.take().ok_or_else(|| PcnnError::MissingCache(self.name.clone()))?;
        let (gx, gk) = conv2d_backward(&x, &self.weight, grad_out, self.stride, self.pad)?;
        self.grad = gk;
        Ok(gx)
    }
}

#[derive(Clone, Debug)]
struct BnCache {
    x_hat: Vec<f32>,
    inv_std: Vec<f64>,
    shape: Shape4,
}

/// Per-channel affine normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
    pub(crate) grad_gamma: Vec<f32>,
    pub(crate) grad_beta: Vec<f32>,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
            grad_gamma: vec![0.0; channels],
            grad_beta: vec![0.0; channels],
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, s: Shape4) -> Result<()> {
        if s.c != self.channels() {
            return Err(PcnnError::shape("batch_norm", s, self.channels()));
        }
        Ok(())
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        let s = x.shape();
        self.check(s)?;
        let plane = s.h * s.w;
        let mut out = x.clone();
        for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = idx % s.c;
            let scale = self.gamma[c] / (self.running_var[c] + self.eps).sqrt();
            let shift = self.beta[c] - self.running_mean[c] * scale;
            for v in chunk {
                *v = *v * scale + shift;
            }
        }
        Ok(out)
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let s = x.shape();
        self.check(s)?;
        let plane = s.h * s.w;
        let m = (s.n * plane) as f64;
        let mut mean = vec![0.0f64; s.c];
        let mut var = vec![0.0f64; s.c];
        for (idx, chunk) in x.data().chunks(plane).enumerate() {
            mean[idx % s.c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for (idx, chunk) in x.data().chunks(plane).enumerate() {
            let mu = mean[idx % s.c];
            var[idx % s.c] += chunk.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps as f64).sqrt()).collect();

        let mut x_hat = vec![0.0f32; x.data().len()];
        let mut out = vec![0.0f32; x.data().len()];
        for (idx, (chunk, (xh, o))) in x
            .data()
            .chunks(plane)
            .zip(x_hat.chunks_mut(plane).zip(out.chunks_mut(plane)))
            .enumerate()
        {
            let c = idx % s.c;
            for ((&v, xh), o) in chunk.iter().zip(xh).zip(o) {
                let h = ((v as f64 - mean[c]) * inv_std[c]) as f32;
                *xh = h;
                *o = self.gamma[c] * h + self.beta[c];
            }
        }
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for c in 0..s.c {
            let mo = self.momentum;
            self.running_mean[c] = (1.0 - mo) * self.running_mean[c] + mo * mean[c] as f32;
            self.running_var[c] = (1.0 - mo) * self.running_var[c] + mo * (var[c] * unbias) as f32;
        }
        self.cache = Some(BnCache { x_hat, inv_std, shape: s });
        Tensor4::new(s, out)
    }

    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let cache = self.cache.take().ok_or_else(|| PcnnError::MissingCache(self.name.clone()))?;
        let s = cache.shape;
        if grad_out.shape() != s {
            return Err(PcnnError::shape("batch_norm backward", grad_out.shape(), s));
        }
        let plane = s.h * s.w;
        let m = (s.n * plane) as f64;
        let mut sum_dy = vec![0.0f64; s.c];
        let mut sum_dy_xh = vec![0.0f64; s.c];
        for (idx, (dy, xh)) in grad_out.data().chunks(plane).zip(cache.x_hat.chunks(plane)).enumerate() {
            let c = idx % s.c;
            for (&g, &h) in dy.iter().zip(xh) {
                sum_dy[c] += g as f64;
                sum_dy_xh[c] += g as f64 * h as f64;
            }
        }
        let mut gx = vec![0.0f32; grad_out.data().len()];
        for (idx, ((dy, xh), o)) in grad_out
            .data()
            .chunks(plane)
            .zip(cache.x_hat.chunks(plane))
            .zip(gx.chunks_mut(plane))
            .enumerate()
        {
            let c = idx % s.c;
            let k = self.gamma[c] as f64 * cache.inv_std[c] / m;
            for ((&g, &h), o) in dy.iter().zip(xh).zip(o) {
                *o = (k * (m * g as f64 - sum_dy[c] - h as f64 * sum_dy_xh[c])) as f32;
            }
        }
        self.grad_gamma = sum_dy_xh.iter().map(|&v| v as f32).collect();
        self.grad_beta = sum_dy.iter().map(|&v| v as f32).collect();
        Tensor4::new(s, gx)
    }
}

/// Non-overlapping max pooling with a square window.
#[derive(Clone, Debug)]
pub struct MaxPool2 {
    pub name: String,
    pub size: usize,
    cache: Option<(Shape4, Vec<usize>)>,
}

impl MaxPool2 {
    pub fn new(name: impl Into<String>, size: usize) -> Self {
        MaxPool2 {
            name: name.into(),
            size,
            cache: None,
        }
    }

    fn pool(&self, x: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
        let s = x.shape();
        let k = self.size;
        if k == 0 || s.h < k || s.w < k {
            return Err(PcnnError::shape("max_pool", s, k));
        }
        let (oh, ow) = (s.h / k, s.w / k);
        let os = Shape4::new(s.n, s.c, oh, ow);
        let mut out = Vec::with_capacity(os.len());
        let mut arg = Vec::with_capacity(os.len());
        let xd = x.data();
        for nc in 0..s.n * s.c {
            let base = nc * s.h * s.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * s.w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * s.w + ox * k + dx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        Ok((Tensor4::new(os, out)?, arg))
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        Ok(self.pool(x)?.0)
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let (y, arg) = self.pool(x)?;
        self.cache = Some((x.shape(), arg));
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let (s, arg) = self.cache.take().ok_or_else(|| PcnnError::MissingCache(self.name.clone()))?;
        if arg.len() != grad_out.data().len() {
            return Err(PcnnError::shape("max_pool backward", grad_out.shape(), s));
        }
        let mut gx = Tensor4::zeros(s);
        for (&i, &g) in arg.iter().zip(grad_out.data()) {
            gx.data_mut()[i] += g;
        }
        Ok(gx)
    }
}

#[derive(Clone, Debug)]
pub struct GlobalAvgPool {
    pub name: String,
    cache: Option<Shape4>,
}

impl GlobalAvgPool {
    pub fn new(name: impl Into<String>) -> Self {
        GlobalAvgPool {
            name: name.into(),
            cache: None,
        }
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        let s = x.shape();
        let plane = s.h * s.w;
        let data = x
            .data()
            .chunks(plane)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        Tensor4::new(Shape4::new(s.n, s.c, 1, 1), data)
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.cache = Some(x.shape());
        self.forward_eval(x)
    }

    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let s = self.cache.take().ok_or_else(|| PcnnError::MissingCache(self.name.clone()))?;
        let plane = s.h * s.w;
        let inv = 1.0 / plane as f32;
        let data = grad_out
            .data()
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
            .collect();
        Tensor4::new(s, data)
    }
}

/// Fully connected layer over the flattened `c*h*w` features; emits `n x out x 1 x 1`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub out_features: usize,
    pub in_features: usize,
    /// Row-major `out x in`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub(crate) grad_weight: Vec<f32>,
    pub(crate) grad_bias: Vec<f32>,
    cache: Option<Tensor4>,
}

impl Linear {
    pub fn new(name: impl Into<String>, out_features: usize, in_features: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weight.len() != out_features * in_features || bias.len() != out_features {
            return Err(PcnnError::shape("Linear::new", (out_features, in_features), (weight.len(), bias.len())));
        }
        Ok(Linear {
            name: name.into(),
            out_features,
            in_features,
            grad_weight: vec![0.0; weight.len()],
            grad_bias: vec![0.0; bias.len()],
            weight,
            bias,
            cache: None,
        })
    }

    pub fn init(name: impl Into<String>, out_features: usize, in_features: usize, rng: &mut impl Rng) -> Self {
        let w = fan_in_uniform(rng, out_features * in_features, in_features);
        Linear::new(name, out_features, in_features, w, vec![0.0; out_features]).expect("init length")
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        let s = x.shape();
        if s.sample_len() != self.in_features {
            return Err(PcnnError::shape("linear", s, self.in_features));
        }
        let mut out = Vec::with_capacity(s.n * self.out_features);
        for n in 0..s.n {
            let xs = x.sample(n);
            for o in 0..self.out_features {
                let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                let acc: f64 = row.iter().zip(xs).map(|(&w, &v)| w as f64 * v as f64).sum();
                out.push((acc + self.bias[o] as f64) as f32);
            }
        }
        Tensor4::new(Shape4::new(s.n, self.out_features, 1, 1), out)
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let y = self.forward_eval(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let x = self.cache.take().ok_or_else(|| PcnnError::MissingCache(self.name.clone()))?;
        let s = x.shape();
        if grad_out.shape() != Shape4::new(s.n, self.out_features, 1, 1) {
            return Err(PcnnError::shape("linear backward", grad_out.shape(), s));
        }
        let mut gw = vec![0.0f64; self.weight.len()];
        let mut gb = vec![0.0f64; self.out_features];
        let mut gx = vec![0.0f32; s.len()];
        for n in 0..s.n {
            let xs = x.sample(n);
            let gy = &grad_out.data()[n * self.out_features..(n + 1) * self.out_features];
            for (o, &g) in gy.iter().enumerate() {
                gb[o] += g as f64;
                let row = &mut gw[o * self.in_features..(o + 1) * self.in_features];
                for (r, &v) in row.iter_mut().zip(xs) {
                    *r += g as f64 * v as f64;
                }
            }
            let gxs = &mut gx[n * self.in_features..(n + 1) * self.in_features];
            for (k, out) in gxs.iter_mut().enumerate() {
                let acc: f64 = gy
                    .iter()
                    .enumerate()
                    .map(|(o, &g)| g as f64 * self.weight[o * self.in_features + k] as f64)
                    .sum();
                *out = acc as f32;
            }
        }
        self.grad_weight = gw.into_iter().map(|v| v as f32).collect();
        self.grad_bias = gb.into_iter().map(|v| v as f32).collect();
        Tensor4::new(s, gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor4::new(Shape4::new(1, 1, 2, 2), vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let mut p = MaxPool2::new("pool", 2);
        let y = p.forward_train(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = p.backward(&Tensor4::new(Shape4::new(1, 1, 1, 1), vec![1.5]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 1.5, 0.0, 0.0]);
    }

    #[test]
    fn batch_norm_normalizes_batch() {
        let x = Tensor4::from_fn(Shape4::new(4, 2, 3, 3), |n, c, y, x| (n * 9 + y * 3 + x) as f32 * (c + 1) as f32);
        let mut bn = BatchNorm2d::new("bn", 2);
        let y = bn.forward_train(&x).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..9).map(move |i| (n, i)))
                .map(|(n, i)| y.at(n, c, i / 3, i % 3) as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.forward_train(&Tensor4::zeros(Shape4::new(1, 3, 1, 1))).is_err());
    }

    #[test]
    fn backward_without_forward_is_missing_cache() {
        let mut l = Linear::new("fc", 1, 1, vec![1.0], vec![0.0]).unwrap();
        let g = Tensor4::zeros(Shape4::new(1, 1, 1, 1));
        assert!(matches!(l.backward(&g), Err(PcnnError::MissingCache(_))));
    }
}
