//! Discrete quantization targets and the nearest-member projection onto them.

use crate::error::{PcnnError, Result};
use crate::tensor::{l1_norm, Kernel4};

/// Sorted set of allowed quantized values, `a_1 < a_2 < … < a_U`, `U ≥ 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSet {
    values: Vec<f32>,
}

impl DiscreteSet {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() < 2 {
            return Err(PcnnError::DegenerateSet(format!(
                "need at least two members, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PcnnError::DegenerateSet(format!("non-finite member in {values:?}")));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PcnnError::DegenerateSet(format!(
                "members must be strictly increasing: {values:?}"
            )));
        }
        Ok(DiscreteSet { values })
    }

    /// The symmetric binary set `{-a, +a}`.
    pub fn binary(a: f32) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(PcnnError::DegenerateSet(format!(
                "binary set needs a finite positive magnitude, got {a}"
            )));
        }
        Ok(DiscreteSet { values: vec![-a, a] })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `Some(a)` when the set is `{-a, +a}`.
    pub fn binary_scale(&self) -> Option<f32> {
        match self.values[..] {
            [lo, hi] if lo == -hi => Some(hi),
            _ => None,
        }
    }

    pub fn contains(&self, x: f32) -> bool {
        self.values.iter().any(|&v| v.to_bits() == x.to_bits())
    }

    /// Nearest member of the set. Equidistant inputs go to the larger member,
    /// so for `{-a, +a}` zero maps to `+a`.
    pub fn project(&self, x: f32) -> f32 {
        let x = x as f64;
        let mut best = self.values[0];
        let mut best_dist = (x - best as f64).abs();
        for &v in &self.values[1..] {
            let d = (x - v as f64).abs();
            if d <= best_dist {
                best = v;
                best_dist = d;
            }
        }
        best
    }
}

pub fn project_scalar(x: f32, omega: &DiscreteSet) -> f32 {
    omega.project(x)
}

/// How the per-layer magnitude is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OmegaNorm {
    /// Mean absolute value over every element of every kernel.
    #[default]
    MeanAbs,
    /// `(1/I) Σ_i ‖C_i‖_1`: divide the summed L1 norms by the kernel count only.
    KernelL1,
}

impl OmegaNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            OmegaNorm::MeanAbs => "mean-abs",
            OmegaNorm::KernelL1 => "kernel-l1",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            OmegaNorm::MeanAbs => 0,
            OmegaNorm::KernelL1 => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(OmegaNorm::MeanAbs),
            1 => Some(OmegaNorm::KernelL1),
            _ => None,
        }
    }
}

impl std::str::FromStr for OmegaNorm {
    type Err = PcnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-abs" => Ok(OmegaNorm::MeanAbs),
            "kernel-l1" => Ok(OmegaNorm::KernelL1),
            other => Err(PcnnError::Config(format!("unknown omega norm `{other}`"))),
        }
    }
}

/// Binary set `{-a, +a}` for one layer, `a` taken from the magnitude of its
/// full-precision kernels. Every output channel of every listed kernel
/// tensor counts as one kernel.
pub fn compute_omega(kernels: &[&Kernel4], norm: OmegaNorm) -> Result<DiscreteSet> {
    let count: usize = kernels.iter().map(|k| k.shape().out_ch).sum();
    let elements: usize = kernels.iter().map(|k| k.shape().len()).sum();
    if count == 0 || elements == 0 {
        return Err(PcnnError::DegenerateSet("no kernel elements".into()));
    }
    let total: f64 = kernels.iter().map(|k| l1_norm(k.data())).sum();
    let a = match norm {
        OmegaNorm::MeanAbs => total / elements as f64,
        OmegaNorm::KernelL1 => total / count as f64,
    } as f32;
    if a == 0.0 {
        return Err(PcnnError::DegenerateSet(
            "all kernel entries are zero, magnitude would be 0".into(),
        ));
    }
    DiscreteSet::binary(a)
}

/// Elementwise `P_Ω(w_dup ∘ c)`.
pub fn project_kernel(c: &Kernel4, w_dup: &Kernel4, omega: &DiscreteSet) -> Result<Kernel4> {
    let prod = c.hadamard(w_dup)?;
    Ok(prod.map(|v| omega.project(v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::KernelShape;

    fn k(data: &[f32]) -> Kernel4 {
        Kernel4::new(KernelShape::new(1, 1, 1, data.len()), data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_projection() {
        let om = DiscreteSet::binary(0.5).unwrap();
        assert_eq!(project_scalar(0.3, &om), 0.5);
        assert_eq!(project_scalar(-0.5, &om), -0.5);
        assert_eq!(project_scalar(0.0, &om), 0.5);
        assert_eq!(project_scalar(-0.0, &om), 0.5);
        let three = DiscreteSet::new(vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(three.project(0.5), 1.0);
        assert_eq!(three.project(-0.5), 0.0);
        assert_eq!(three.project(-7.0), -1.0);
    }

    #[test]
    fn invalid_sets() {
        assert!(DiscreteSet::new(vec![1.0]).is_err());
        assert!(DiscreteSet::new(vec![1.0, 1.0]).is_err());
        assert!(DiscreteSet::new(vec![1.0, 0.0]).is_err());
        assert!(DiscreteSet::binary(0.0).is_err());
        assert!(DiscreteSet::binary(f32::NAN).is_err());
    }

    #[test]
    fn omega_from_kernels() {
        let om = compute_omega(&[&k(&[1.0, -1.0, 2.0, 0.0])], OmegaNorm::MeanAbs).unwrap();
        assert_eq!(om.values(), &[-1.0, 1.0]);

        let a = Kernel4::filled(KernelShape::new(2, 1, 2, 2), 0.5);
        let b = Kernel4::filled(KernelShape::new(3, 1, 2, 2), -0.5);
        let om = compute_omega(&[&a, &b], OmegaNorm::MeanAbs).unwrap();
        assert_eq!(om.values(), &[-0.5, 0.5]);

        let z = Kernel4::zeros(KernelShape::new(2, 1, 3, 3));
        assert!(matches!(
            compute_omega(&[&z], OmegaNorm::MeanAbs),
            Err(PcnnError::DegenerateSet(_))
        ));
    }

    #[test]
    fn literal_kernel_l1_reading() {
        // Two kernels of four elements, L1 norms 4 and 8.
        let c = Kernel4::new(
            KernelShape::new(2, 1, 2, 2),
            vec![1.0, -1.0, 2.0, 0.0, 2.0, 2.0, -2.0, 2.0],
        )
        .unwrap();
        let om = compute_omega(&[&c], OmegaNorm::KernelL1).unwrap();
        assert_eq!(om.binary_scale(), Some(6.0));
        let om = compute_omega(&[&c], OmegaNorm::MeanAbs).unwrap();
        assert_eq!(om.binary_scale(), Some(1.5));
    }

    #[test]
    fn kernel_projection() {
        let om = DiscreteSet::binary(0.5).unwrap();
        let shape = KernelShape::new(2, 2, 1, 1);
        let c = Kernel4::filled(shape, 0.3);
        let out = project_kernel(&c, &Kernel4::filled(shape, 1.0), &om).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        let out = project_kernel(&c, &Kernel4::zeros(shape), &om).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        let other = Kernel4::zeros(KernelShape::new(1, 2, 1, 1));
        assert!(project_kernel(&c, &other, &om).is_err());
    }
}
