//! Fixed-width histograms of full-precision kernel weights.

use std::fmt::Write as _;

use crate::error::{PcnnError, Result};
use crate::network::Network;
use crate::projection::{compute_omega, OmegaNorm};

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub layer: String,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Bin `values` over `[lo, hi]` in `bins` equal-width bins; the last bin
    /// is closed. Out-of-range values are clamped into the end bins.
    pub fn build(layer: impl Into<String>, values: &[f32], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0u64; bins.max(1)];
        let width = (hi - lo) / counts.len() as f64;
        for &v in values {
            let b = if width > 0.0 {
                (((v as f64 - lo) / width).floor().max(0.0) as usize).min(counts.len() - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Histogram {
            layer: layer.into(),
            lo,
            hi,
            counts,
        }
    }

    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + b as f64 * width, self.lo + (b + 1) as f64 * width)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `bin_lo,bin_hi,count` rows under a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (b, &c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.bin_edges(b);
            let _ = writeln!(s, "{lo:.6e},{hi:.6e},{c}");
        }
        s
    }
}

/// Histogram of the named projection layer's kernels `C` over the
/// symmetric range `[-max|C|, max|C|]`.
pub fn emit_histogram(net: &Network, layer: &str, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(PcnnError::Config("histogram needs at least one bin".into()));
    }
    let l = net.proj_layer(layer)?;
    let c = l.kernels().data();
    let m = c.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let m = if m > 0.0 { m } else { 1.0 };
    Ok(Histogram::build(layer, c, -m, m, bins))
}

/// Fraction of kernel weights whose magnitude lies within `0.25·a` of `a`,
/// where `{-a, +a}` is the layer's current binary set.
pub fn cluster_fraction(values: &[f32], a: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let hits = values
        .iter()
        .filter(|&&v| ((v as f64).abs() - a).abs() <= 0.25 * a)
        .count();
    hits as f64 / values.len() as f64
}

/// [`cluster_fraction`] of the named projection layer.
pub fn layer_cluster_fraction(net: &Network, layer: &str, norm: OmegaNorm) -> Result<f64> {
    let l = net.proj_layer(layer)?;
    let omega = compute_omega(&[l.kernels()], norm)?;
    let a = omega.binary_scale().expect("binary set") as f64;
    Ok(cluster_fraction(l.kernels().data(), a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_values_fill_one_bin() {
        let h = Histogram::build("x", &[0.3; 10], -1.0, 1.0, 8);
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.total(), 10);
    }

    #[test]
    fn symmetric_values_give_symmetric_histogram() {
        let v: Vec<f32> = (1..=100).flat_map(|i| [i as f32 * 0.013, -(i as f32) * 0.013]).collect();
        let h = Histogram::build("x", &v, -1.3, 1.3, 10);
        let r: Vec<u64> = h.counts.iter().rev().copied().collect();
        for (a, b) in h.counts.iter().zip(&r) {
            assert!(a.abs_diff(*b) <= 1, "{:?}", h.counts);
        }
        assert!(h.to_csv().starts_with("bin_lo,bin_hi,count\n"));
    }

    #[test]
    fn cluster_fraction_counts_band() {
        let v = [1.0, -1.2, 0.74, 1.26, -0.8, 0.0];
        assert!((cluster_fraction(&v, 1.0) - 3.0 / 6.0).abs() < 1e-12);
    }
}
