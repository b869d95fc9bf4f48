//! Bit-packed binary kernels and activations, and XNOR/popcount convolution.
//!
//! Packing order: each output channel's `in_ch x kh x kw` entries are
//! flattened in that order and stored LSB-first, bit `1` meaning the positive
//! value. Every kernel starts on a fresh 64-bit word.

use crate::error::{PcnnError, Result};
use crate::tensor::{conv_out_dim, Kernel4, KernelShape, Shape4, Tensor4};

#[inline]
fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedKernel {
    shape: KernelShape,
    words_per_kernel: usize,
    words: Vec<u64>,
    scale: f32,
}

impl PackedKernel {
    /// Pack a kernel whose entries are all `+scale` or `-scale`.
    pub fn pack(kernel: &Kernel4, scale: f32) -> Result<Self> {
        let shape = kernel.shape();
        let per = shape.per_kernel();
        let wpk = words_for(per);
        let mut words = vec![0u64; wpk * shape.out_ch];
        for (index, &v) in kernel.data().iter().enumerate() {
            let bit = if v == scale && scale > 0.0 {
                true
            } else if v == -scale && scale > 0.0 {
                false
            } else {
                return Err(PcnnError::Pack { index, value: v, scale });
            };
            if bit {
                let (o, e) = (index / per, index % per);
                words[o * wpk + e / 64] |= 1u64 << (e % 64);
            }
        }
        Ok(PackedKernel {
            shape,
            words_per_kernel: wpk,
            words,
            scale,
        })
    }

    /// Rebuild from stored words, checking the word count and that padding
    /// bits are clear.
    pub fn from_words(shape: KernelShape, scale: f32, words: Vec<u64>) -> Result<Self> {
        let wpk = words_for(shape.per_kernel());
        if words.len() != wpk * shape.out_ch || !(scale > 0.0 && scale.is_finite()) {
            return Err(PcnnError::Format(format!(
                "packed kernel {shape:?}: {} words (expected {}), scale {scale}",
                words.len(),
                wpk * shape.out_ch
            )));
        }
        let tail = shape.per_kernel() % 64;
        if tail != 0 {
            let mask = !((1u64 << tail) - 1);
            if (0..shape.out_ch).any(|o| words[o * wpk + wpk - 1] & mask != 0) {
                return Err(PcnnError::Format("packed kernel has bits set in word padding".into()));
            }
        }
        Ok(PackedKernel {
            shape,
            words_per_kernel: wpk,
            words,
            scale,
        })
    }

    pub fn unpack(&self) -> Kernel4 {
        let per = self.shape.per_kernel();
        let data = (0..self.shape.len())
            .map(|i| {
                let (o, e) = (i / per, i % per);
                if self.words[o * self.words_per_kernel + e / 64] >> (e % 64) & 1 == 1 {
                    self.scale
                } else {
                    -self.scale
                }
            })
            .collect();
        Kernel4::new(self.shape, data).expect("unpacked length")
    }

    pub fn shape(&self) -> KernelShape {
        self.shape
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn words_per_kernel(&self) -> usize {
        self.words_per_kernel
    }

    pub fn kernel_words(&self, o: usize) -> &[u64] {
        &self.words[o * self.words_per_kernel..(o + 1) * self.words_per_kernel]
    }
}

/// Sign bits of an activation tensor, `1` for `x >= 0`, one bit per element
/// in `n x c x h x w` order.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedActivations {
    shape: Shape4,
    words: Vec<u64>,
    scale: f32,
}

impl PackedActivations {
    /// Binarize with `sign(0) = +1` and pack.
    pub fn from_signs(x: &Tensor4) -> Self {
        let mut words = vec![0u64; words_for(x.shape().len())];
        for (i, &v) in x.data().iter().enumerate() {
            if v >= 0.0 {
                words[i / 64] |= 1u64 << (i % 64);
            }
        }
        PackedActivations {
            shape: x.shape(),
            words,
            scale: 1.0,
        }
    }

    /// Pack a tensor whose entries are all `±scale`.
    pub fn pack(x: &Tensor4, scale: f32) -> Result<Self> {
        if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, &v)| v != scale && v != -scale) {
            return Err(PcnnError::Pack { index, value, scale });
        }
        let mut p = Self::from_signs(x);
        p.scale = scale;
        Ok(p)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    #[inline]
    fn bit(&self, i: usize) -> u64 {
        self.words[i / 64] >> (i % 64) & 1
    }

    pub fn unpack(&self) -> Tensor4 {
        let data = (0..self.shape.len())
            .map(|i| if self.bit(i) == 1 { self.scale } else { -self.scale })
            .collect();
        Tensor4::new(self.shape, data).expect("unpacked length")
    }
}

/// Integer convolution result before scaling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor4 {
    pub shape: Shape4,
    pub data: Vec<i32>,
}

impl IntTensor4 {
    /// `value · a_w · a_x`, evaluated in double precision and rounded once.
    pub fn to_f32(&self, scale_w: f32, scale_x: f32) -> Tensor4 {
        let s = scale_w as f64 * scale_x as f64;
        Tensor4::new(self.shape, self.data.iter().map(|&k| (k as f64 * s) as f32).collect()).expect("same shape")
    }
}

/// Binary convolution by XNOR and popcount. Input channels split into
/// `in_ch / kernel.in_ch` equal groups; output channels split the same way.
/// Padding positions are masked out of both the agreement count and the
/// valid-bit count, so they contribute zero like float zero-padding.
pub fn xnor_conv(input: &PackedActivations, kernel: &PackedKernel, stride: usize, pad: usize) -> Result<IntTensor4> {
    let xs = input.shape();
    let ks = kernel.shape();
    if ks.in_ch == 0 || xs.c % ks.in_ch != 0 || stride == 0 {
        return Err(PcnnError::shape("xnor_conv", xs, ks));
    }
    let groups = xs.c / ks.in_ch;
    if ks.out_ch % groups != 0 {
        return Err(PcnnError::shape("xnor_conv groups", xs, ks));
    }
    let (Some(oh), Some(ow)) = (conv_out_dim(xs.h, ks.kh, stride, pad), conv_out_dim(xs.w, ks.kw, stride, pad)) else {
        return Err(PcnnError::shape("xnor_conv spatial", xs, ks));
    };
    let out_per_group = ks.out_ch / groups;
    let out_shape = Shape4::new(xs.n, ks.out_ch, oh, ow);
    let mut out = vec![0i32; out_shape.len()];
    let wpk = kernel.words_per_kernel();
    let mut patch = vec![0u64; wpk];
    let mut mask = vec![0u64; wpk];
    for n in 0..xs.n {
        for g in 0..groups {
            for oy in 0..oh {
                for ox in 0..ow {
                    patch.fill(0);
                    mask.fill(0);
                    let mut e = 0usize;
                    for c in 0..ks.in_ch {
                        let ch = g * ks.in_ch + c;
                        for ky in 0..ks.kh {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            for kx in 0..ks.kw {
                                let x = (ox * stride + kx) as isize - pad as isize;
                                if y >= 0 && x >= 0 && (y as usize) < xs.h && (x as usize) < xs.w {
                                    let i = ((n * xs.c + ch) * xs.h + y as usize) * xs.w + x as usize;
                                    patch[e / 64] |= input.bit(i) << (e % 64);
                                    mask[e / 64] |= 1u64 << (e % 64);
                                }
                                e += 1;
                            }
                        }
                    }
                    let valid: u32 = mask.iter().map(|m| m.count_ones()).sum();
                    for oc in 0..out_per_group {
                        let o = g * out_per_group + oc;
                        let agree: u32 = kernel
                            .kernel_words(o)
                            .iter()
                            .zip(&patch)
                            .zip(&mask)
                            .map(|((w, p), m)| (!(w ^ p) & m).count_ones())
                            .sum();
                        out[((n * ks.out_ch + o) * oh + oy) * ow + ox] = 2 * agree as i32 - valid as i32;
                    }
                }
            }
        }
    }
    Ok(IntTensor4 { shape: out_shape, data: out })
}
