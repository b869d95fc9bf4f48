//! Training configuration and its flat `key=value` file format.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{PcnnError, Result};
use crate::network::ModelSpec;
use crate::projection::OmegaNorm;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Projection-loss weight.
    pub lambda: f64,
    /// Learning rate of kernels `C` and all full-precision parameters.
    pub eta1: f64,
    /// Learning rate of projection matrices `W`.
    pub eta2: f64,
    /// Step size inside the projection loss; `None` uses the current `eta1`.
    pub eta_projection: Option<f64>,
    pub j: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub dataset: String,
    pub arch: String,
    pub width: usize,
    pub binarize_activations: bool,
    pub first_last_full_precision: bool,
    pub omega_norm: OmegaNorm,
    /// Hold every `W` at all-ones and never update it.
    pub freeze_projections: bool,
    /// When false the projection-loss terms are never evaluated.
    pub projection_loss: bool,
    /// Use only the first `n` training samples (0 = all).
    pub train_subset: usize,
    pub test_subset: usize,
    pub augment: bool,
    pub histogram_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-4,
            eta1: 0.1,
            eta2: 0.01,
            eta_projection: None,
            j: 1,
            epochs: 20,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
            seed: 0,
            dataset: "mnist".into(),
            arch: "small-cnn".into(),
            width: 16,
            binarize_activations: true,
            first_last_full_precision: true,
            omega_norm: OmegaNorm::MeanAbs,
            freeze_projections: false,
            projection_loss: true,
            train_subset: 0,
            test_subset: 0,
            augment: false,
            histogram_bins: 64,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| PcnnError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(PcnnError::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    /// Set one field from its textual key. `J` and `j` are both accepted.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "lambda" => self.lambda = parse(key, v)?,
            "eta1" => self.eta1 = parse(key, v)?,
            "eta2" => self.eta2 = parse(key, v)?,
            "eta_projection" => {
                self.eta_projection = match v {
                    "" | "none" | "eta1" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "J" | "j" => self.j = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, v)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "dataset" => self.dataset = v.to_string(),
            "arch" => self.arch = v.to_string(),
            "width" => self.width = parse(key, v)?,
            "binarize_activations" => self.binarize_activations = parse_bool(key, v)?,
            "first_last_full_precision" => self.first_last_full_precision = parse_bool(key, v)?,
            "omega_norm" => self.omega_norm = v.parse()?,
            "freeze_projections" => self.freeze_projections = parse_bool(key, v)?,
            "projection_loss" => self.projection_loss = parse_bool(key, v)?,
            "train_subset" => self.train_subset = parse(key, v)?,
            "test_subset" => self.test_subset = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "histogram_bins" => self.histogram_bins = parse(key, v)?,
            other => return Err(PcnnError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parse `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PcnnError::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let eta_p = self.eta_projection.map_or("eta1".to_string(), |v| v.to_string());
        let pairs: [(&str, String); 24] = [
            ("lambda", self.lambda.to_string()),
            ("eta1", self.eta1.to_string()),
            ("eta2", self.eta2.to_string()),
            ("eta_projection", eta_p),
            ("J", self.j.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("seed", self.seed.to_string()),
            ("dataset", self.dataset.clone()),
            ("arch", self.arch.clone()),
            ("width", self.width.to_string()),
            ("binarize_activations", self.binarize_activations.to_string()),
            ("first_last_full_precision", self.first_last_full_precision.to_string()),
            ("omega_norm", self.omega_norm.as_str().to_string()),
            ("freeze_projections", self.freeze_projections.to_string()),
            ("projection_loss", self.projection_loss.to_string()),
            ("train_subset", self.train_subset.to_string()),
            ("test_subset", self.test_subset.to_string()),
            ("augment", self.augment.to_string()),
            ("histogram_bins", self.histogram_bins.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PcnnError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.eta1 > 0.0 && self.eta2 > 0.0) {
            return bad(format!("eta1 and eta2 must be > 0, got {} and {}", self.eta1, self.eta2));
        }
        if self.j == 0 || self.batch_size == 0 || self.width == 0 || self.lr_decay_every == 0 {
            return bad("J, batch_size, width and lr_decay_every must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad(format!("momentum {} / weight_decay {} out of range", self.momentum, self.weight_decay));
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be >= 1".into());
        }
        Ok(())
    }

    /// `lr0 · factor^⌊epoch / every⌋` for a zero-based epoch.
    pub fn lr_at(&self, lr0: f64, epoch: usize) -> f64 {
        lr0 * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Input geometry and class count implied by `dataset`.
    pub fn dataset_dims(&self) -> Result<((usize, usize, usize), usize)> {
        match self.dataset.as_str() {
            "mnist" => Ok(((1, 28, 28), 10)),
            "cifar10" => Ok(((3, 32, 32), 10)),
            other => Err(PcnnError::Config(format!("unknown dataset `{other}`"))),
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let (input, classes) = self.dataset_dims()?;
        let arch = match self.arch.as_str() {
            "wrn-22-like" | "wrn22" => "wrn22-like",
            a => a,
        };
        Ok(ModelSpec {
            arch: arch.to_string(),
            width: self.width,
            j: self.j,
            input,
            classes,
            binarize_activations: self.binarize_activations,
            first_last_full_precision: self.first_last_full_precision,
            omega_norm: self.omega_norm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.lambda = 0.0;
        c.j = 4;
        c.eta_projection = Some(0.05);
        c.omega_norm = OmegaNorm::KernelL1;
        c.freeze_projections = true;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parse_errors() {
        assert!(TrainConfig::parse("lambda=-1").is_err());
        assert!(TrainConfig::parse("nonsense=1").is_err());
        assert!(TrainConfig::parse("eta1").is_err());
        assert!(TrainConfig::parse("J=0").is_err());
        let c = TrainConfig::parse("# comment\n\nJ = 2  # trailing\narch=small-cnn\n").unwrap();
        assert_eq!(c.j, 2);
    }

    #[test]
    fn step_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0.1, 0), 0.1);
        assert_eq!(c.lr_at(0.1, 19), 0.1);
        assert_eq!(c.lr_at(0.1, 20), 0.1 * 0.1);
        assert_eq!(c.lr_at(0.1, 45), 0.1 * 0.1 * 0.1);
    }
}
