//! Storage accounting: 32 bits per full-precision weight, the layer's bit
//! width per quantized weight.

use std::fmt;

use crate::error::{PcnnError, Result};
use crate::network::{Layer, Network};

pub const FULL_BITS: u64 = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDesc {
    pub name: String,
    pub params: u64,
    /// Bits per stored weight in the compressed model (1 for binary, 32 for full precision).
    pub bits: u32,
}

impl LayerDesc {
    pub fn full(name: impl Into<String>, params: u64) -> Self {
        LayerDesc {
            name: name.into(),
            params,
            bits: FULL_BITS as u32,
        }
    }

    pub fn binary(name: impl Into<String>, params: u64) -> Self {
        LayerDesc {
            name: name.into(),
            params,
            bits: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchDescription {
    pub name: String,
    pub layers: Vec<LayerDesc>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerBits {
    pub name: String,
    pub params: u64,
    pub full_bits: u64,
    pub compressed_bits: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReport {
    pub arch: String,
    pub layers: Vec<LayerBits>,
    pub full_total: u64,
    pub compressed_total: u64,
    /// `full_total / compressed_total`.
    pub ratio: f64,
}

impl MemoryReport {
    pub fn full_mbit(&self) -> f64 {
        self.full_total as f64 / 1e6
    }

    pub fn compressed_mbit(&self) -> f64 {
        self.compressed_total as f64 / 1e6
    }
}

pub fn memory_report(desc: &ArchDescription) -> MemoryReport {
    let layers: Vec<LayerBits> = desc
        .layers
        .iter()
        .map(|l| LayerBits {
            name: l.name.clone(),
            params: l.params,
            full_bits: l.params * FULL_BITS,
            compressed_bits: l.params * l.bits as u64,
        })
        .collect();
    let full_total = layers.iter().map(|l| l.full_bits).sum();
    let compressed_total: u64 = layers.iter().map(|l| l.compressed_bits).sum();
    MemoryReport {
        arch: desc.name.clone(),
        layers,
        full_total,
        compressed_total,
        ratio: if compressed_total == 0 {
            1.0
        } else {
            full_total as f64 / compressed_total as f64
        },
    }
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>12} {:>14} {:>14}", "layer", "params", "full (bit)", "compressed (bit)")?;
        for l in &self.layers {
            writeln!(f, "{:<28} {:>12} {:>14} {:>14}", l.name, l.params, l.full_bits, l.compressed_bits)?;
        }
        writeln!(f)?;
        writeln!(f, "{:<16} {:>14} {:>16} {:>10}", "model", "memory usage", "memory saving", "")?;
        writeln!(f, "{:<16} {:>10.1} Mbit {:>16}", format!("{} full", self.arch), self.full_mbit(), "-")?;
        write!(
            f,
            "{:<16} {:>10.1} Mbit {:>15.2}x",
            format!("{} binary", self.arch),
            self.compressed_mbit(),
            self.ratio
        )
    }
}

/// ResNet-18 shaped layer list for 224x224 ImageNet with `J` projections.
///
/// The 7x7 stem, the classifier, the three 1x1 downsampling shortcuts and
/// all batch-norm affine terms stay full precision; every 3x3 convolution
/// is binary and holds `J` times its base kernel count.
pub fn resnet18_like(j: u64) -> ArchDescription {
    let mut layers = vec![LayerDesc::full("conv1", 3 * 64 * 49), LayerDesc::full("bn1", 2 * 64)];
    let mut in_ch = 64u64;
    for (stage, out_ch) in [64u64, 128, 256, 512].into_iter().enumerate() {
        for block in 0..2 {
            let name = format!("layer{}.{}", stage + 1, block);
            let cin = if block == 0 { in_ch } else { out_ch };
            layers.push(LayerDesc::binary(format!("{name}.conv1"), j * out_ch * cin * 9));
            layers.push(LayerDesc::full(format!("{name}.bn1"), 2 * out_ch));
            layers.push(LayerDesc::binary(format!("{name}.conv2"), j * out_ch * out_ch * 9));
            layers.push(LayerDesc::full(format!("{name}.bn2"), 2 * out_ch));
            if block == 0 && cin != out_ch {
                layers.push(LayerDesc::full(format!("{name}.downsample"), cin * out_ch));
                layers.push(LayerDesc::full(format!("{name}.downsample.bn"), 2 * out_ch));
            }
        }
        in_ch = out_ch;
    }
    layers.push(LayerDesc::full("fc", 512 * 1000 + 1000));
    ArchDescription {
        name: "resnet18-like".into(),
        layers,
    }
}

/// Layer list of a built network: projection layers whose kernels are
/// binarized count as 1 bit per quantized weight, everything else 32.
pub fn describe_network(net: &Network) -> ArchDescription {
    let layers = net
        .layers_flat()
        .into_iter()
        .filter_map(|l| {
            let params = l.own_inference_params() as u64;
            if params == 0 {
                return None;
            }
            Some(match l {
                Layer::Proj(_) => LayerDesc::binary(l.name(), params),
                _ => LayerDesc::full(l.name(), params),
            })
        })
        .collect();
    ArchDescription {
        name: net.spec.arch.clone(),
        layers,
    }
}

/// Description by architecture name.
pub fn describe_arch(arch: &str, j: usize) -> Result<ArchDescription> {
    match arch {
        "resnet18-like" | "resnet18" => Ok(resnet18_like(j as u64)),
        other => Err(PcnnError::UnknownArch(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_full_precision_ratio_is_one() {
        let d = ArchDescription {
            name: "x".into(),
            layers: vec![LayerDesc::full("a", 10), LayerDesc::full("b", 5)],
        };
        assert_eq!(memory_report(&d).ratio, 1.0);
    }

    #[test]
    fn single_binary_layer() {
        let d = ArchDescription {
            name: "x".into(),
            layers: vec![LayerDesc::binary("a", 1000)],
        };
        let r = memory_report(&d);
        assert_eq!((r.full_total, r.compressed_total), (32000, 1000));
        assert_eq!(r.ratio, 32.0);
    }

    #[test]
    fn resnet18_total_parameter_count() {
        let total: u64 = resnet18_like(1).layers.iter().map(|l| l.params).sum();
        assert_eq!(total, 11_689_512);
    }

    #[test]
    fn additive_and_monotone_in_bit_width() {
        let a = LayerDesc::binary("a", 300);
        let b = LayerDesc::full("b", 70);
        let both = memory_report(&ArchDescription {
            name: "x".into(),
            layers: vec![a.clone(), b.clone()],
        });
        let ra = memory_report(&ArchDescription {
            name: "x".into(),
            layers: vec![a.clone()],
        });
        let rb = memory_report(&ArchDescription {
            name: "x".into(),
            layers: vec![b],
        });
        assert_eq!(both.compressed_total, ra.compressed_total + rb.compressed_total);
        let wider = memory_report(&ArchDescription {
            name: "x".into(),
            layers: vec![LayerDesc { bits: 2, ..a }],
        });
        assert!(wider.compressed_total > ra.compressed_total);
    }
}
