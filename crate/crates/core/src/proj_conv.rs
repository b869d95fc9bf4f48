//! Projection convolution layer.
//!
//! A layer owns `I` full-precision kernels `C_i` (each `in_base x kh x kw`)
//! and `J` projection matrices `W_j` (each `kh x kw`). On every forward pass
//! it recomputes the binary set from `C`, quantizes
//! `Ĉ_{i,j} = P_Ω(W̃_j ∘ C_i)`, and runs a grouped convolution: group `j`
//! convolves the `j`-th block of `in_base` input channels with
//! `Ĉ_{0,j} … Ĉ_{I-1,j}`. Group outputs are concatenated, so output channel
//! `j * I + i` comes from `Ĉ_{i,j}` and the layer emits `I * J` channels.
//! Consecutive layers with the same `J` therefore line up: this layer's
//! output is `J` blocks of `I` channels, the next layer's input is `J`
//! blocks of its `in_base` channels.
//!
//! The forward pass duplicates the scalar mean of `W_j`; the gradient
//! formulas in [`crate::losses`] use the elementwise `W_j`.

use crate::error::{PcnnError, Result};
use crate::projection::{compute_omega, project_kernel, DiscreteSet, OmegaNorm};
use crate::tensor::{conv2d_grouped, conv2d_grouped_backward, Kernel4, KernelShape, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DupMode {
    /// Replicate `W_j` unchanged across channels.
    Exact,
    /// Replicate the scalar mean of `W_j`'s entries.
    Mean,
}

/// Tile a `kh x kw` projection matrix across `in_ch` channels, giving a
/// `1 x in_ch x kh x kw` kernel.
pub fn duplicate_projection(w: &[f32], kh: usize, kw: usize, in_ch: usize, mode: DupMode) -> Result<Kernel4> {
    if w.len() != kh * kw || in_ch == 0 {
        return Err(PcnnError::shape("duplicate_projection", w.len(), (in_ch, kh, kw)));
    }
    let plane: Vec<f32> = match mode {
        DupMode::Exact => w.to_vec(),
        DupMode::Mean => {
            let m = (w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64) as f32;
            vec![m; w.len()]
        }
    };
    let data = plane.iter().copied().cycle().take(in_ch * kh * kw).collect();
    Kernel4::new(KernelShape::new(1, in_ch, kh, kw), data)
}

/// Repeat a single-kernel tensor `count` times along the output axis.
pub(crate) fn tile_kernels(k: &Kernel4, count: usize) -> Kernel4 {
    let s = k.shape();
    let data = k.data().iter().copied().cycle().take(s.len() * count).collect();
    Kernel4::new(KernelShape::new(count * s.out_ch, s.in_ch, s.kh, s.kw), data)
        .expect("tiled length matches shape")
}

/// `sign(x)` with `sign(0) = +1`.
pub fn binarize_activations(x: &Tensor4) -> Tensor4 {
    x.map(sign)
}

#[inline]
pub fn sign(v: f32) -> f32 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Operands of one forward pass, consumed by the matching backward.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub input: Tensor4,
    /// The tensor actually convolved: `sign(input)` when the layer binarizes.
    pub conv_input: Tensor4,
    pub omega: DiscreteSet,
    /// Exact-mode `W̃_j`, one `1 x in_base x kh x kw` tensor per projection.
    pub w_tilde: Vec<Kernel4>,
    /// `Ĉ_{·,j}` for each `j`, each `I x in_base x kh x kw`.
    pub c_hat: Vec<Kernel4>,
    /// `Ĉ` stacked `j`-major: `(J*I) x in_base x kh x kw`.
    pub d: Kernel4,
    pub output: Tensor4,
}

#[derive(Clone, Debug)]
pub struct ProjConvLayer {
    pub name: String,
    kernels: Kernel4,
    projections: Vec<f32>,
    j: usize,
    pub stride: usize,
    pub pad: usize,
    pub binarize_input: bool,
    pub omega_norm: OmegaNorm,
}

/// Output of [`ProjConvLayer::quantize`].
#[derive(Clone, Debug)]
pub struct Quantized {
    pub omega: DiscreteSet,
    pub c_hat: Vec<Kernel4>,
    pub d: Kernel4,
}

impl ProjConvLayer {
    /// `kernels` is `C` with shape `I x in_base x kh x kw`; `projections`
    /// holds the `J` matrices back to back.
    pub fn new(
        name: impl Into<String>,
        kernels: Kernel4,
        projections: Vec<f32>,
        stride: usize,
        pad: usize,
        binarize_input: bool,
    ) -> Result<Self> {
        let s = kernels.shape();
        let plane = s.kh * s.kw;
        if plane == 0 || projections.is_empty() || projections.len() % plane != 0 || stride == 0 {
            return Err(PcnnError::shape("ProjConvLayer::new", s, projections.len()));
        }
        Ok(ProjConvLayer {
            name: name.into(),
            j: projections.len() / plane,
            kernels,
            projections,
            stride,
            pad,
            binarize_input,
            omega_norm: OmegaNorm::MeanAbs,
        })
    }

    pub fn kernels(&self) -> &Kernel4 {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut Kernel4 {
        &mut self.kernels
    }

    pub fn projections(&self) -> &[f32] {
        &self.projections
    }

    pub fn projections_mut(&mut self) -> &mut [f32] {
        &mut self.projections
    }

    pub fn projection(&self, j: usize) -> &[f32] {
        let p = self.kernels.shape().kh * self.kernels.shape().kw;
        &self.projections[j * p..(j + 1) * p]
    }

    /// Number of projection matrices `J`.
    pub fn num_projections(&self) -> usize {
        self.j
    }

    /// Number of full-precision kernels `I`.
    pub fn num_kernels(&self) -> usize {
        self.kernels.shape().out_ch
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape().in_ch * self.j
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape().out_ch * self.j
    }

    /// Shape of the stacked quantized kernel `D`.
    pub fn d_shape(&self) -> KernelShape {
        let s = self.kernels.shape();
        KernelShape::new(s.out_ch * self.j, s.in_ch, s.kh, s.kw)
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        let s = self.kernels.shape();
        if input.c != self.in_channels() {
            return Err(PcnnError::shape(
                "ProjConvLayer input",
                input,
                format!("{} channels ({} groups of {})", self.in_channels(), self.j, s.in_ch),
            ));
        }
        let oh = crate::tensor::conv_out_dim(input.h, s.kh, self.stride, self.pad);
        let ow = crate::tensor::conv_out_dim(input.w, s.kw, self.stride, self.pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(Shape4::new(input.n, self.out_channels(), oh, ow)),
            _ => Err(PcnnError::shape("ProjConvLayer input", input, s)),
        }
    }

    pub fn w_tilde(&self, j: usize, mode: DupMode) -> Kernel4 {
        let s = self.kernels.shape();
        duplicate_projection(self.projection(j), s.kh, s.kw, s.in_ch, mode).expect("projection dims are validated at construction")
    }

    /// Recompute `Ω` from the current kernels and project them.
    pub fn quantize(&self) -> Result<Quantized> {
        let omega = compute_omega(&[&self.kernels], self.omega_norm)?;
        let i = self.num_kernels();
        let c_hat = (0..self.j)
            .map(|j| project_kernel(&self.kernels, &tile_kernels(&self.w_tilde(j, DupMode::Mean), i), &omega))
            .collect::<Result<Vec<_>>>()?;
        let d = Kernel4::concat_out(&c_hat)?;
        Ok(Quantized { omega, c_hat, d })
    }

    fn conv_input(&self, input: &Tensor4) -> Tensor4 {
        if self.binarize_input {
            binarize_activations(input)
        } else {
            input.clone()
        }
    }

    pub fn forward(&self, input: &Tensor4) -> Result<(Tensor4, LayerCache)> {
        self.output_shape(input.shape())?;
        let q = self.quantize()?;
        let conv_input = self.conv_input(input);
        let output = conv2d_grouped(&conv_input, &q.d, self.stride, self.pad, self.j)?;
        let w_tilde = (0..self.j).map(|j| self.w_tilde(j, DupMode::Exact)).collect();
        let cache = LayerCache {
            input: input.clone(),
            conv_input,
            omega: q.omega,
            w_tilde,
            c_hat: q.c_hat,
            d: q.d,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Forward pass without keeping a cache.
    pub fn forward_eval(&self, input: &Tensor4) -> Result<Tensor4> {
        self.output_shape(input.shape())?;
        let q = self.quantize()?;
        conv2d_grouped(&self.conv_input(input), &q.d, self.stride, self.pad, self.j)
    }

    /// Back-propagate the task-loss gradient. Returns the gradient w.r.t. the
    /// layer input (straight-through for `sign`, passed where `|x| ≤ 1`) and
    /// `δ_Ĉ_{·,j}` for each projection.
    pub fn backward(&self, cache: &LayerCache, grad_out: &Tensor4) -> Result<(Tensor4, Vec<Kernel4>)> {
        let (mut grad_in, grad_d) =
            conv2d_grouped_backward(&cache.conv_input, &cache.d, grad_out, self.stride, self.pad, self.j)?;
        if self.binarize_input {
            for (g, &x) in grad_in.data_mut().iter_mut().zip(cache.input.data()) {
                if x.abs() > 1.0 {
                    *g = 0.0;
                }
            }
        }
        let s = self.kernels.shape();
        let per = s.len();
        let d_chat = (0..self.j)
            .map(|j| Kernel4::new(s, grad_d.data()[j * per..(j + 1) * per].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((grad_in, d_chat))
    }

    /// Number of weights in the stored quantized kernel `D`.
    pub fn inference_params(&self) -> usize {
        self.d_shape().len()
    }

    /// Number of trained values: `C` plus all `W_j`.
    pub fn trainable_params(&self) -> usize {
        self.kernels.shape().len() + self.projections.len()
    }
}
