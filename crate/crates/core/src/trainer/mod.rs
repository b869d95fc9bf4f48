//! Training loop: forward, task loss, backward to `δ_Ĉ`, then per-layer
//! `δ_C`/`δ_W` and momentum-SGD updates, with a step learning-rate schedule,
//! per-epoch metrics, checkpoints and weight histograms.

pub mod config;
pub mod histogram;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, Dataset};
use crate::error::{PcnnError, Result};
use crate::export;
use crate::losses::{cross_entropy, sgd_update, LossBreakdown};
use crate::network::{build_model, Network, ParamKind, StepEvent};
use crate::tensor::Tensor4;

pub use config::TrainConfig;
pub use histogram::{cluster_fraction, emit_histogram, layer_cluster_fraction, Histogram};

pub const METRICS_HEADER: &str = "epoch,iter,loss_s,loss_p,loss_total,train_acc,test_acc,lr1,lr2";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// One-based epoch number.
    pub epoch: usize,
    /// Iterations completed at the end of the epoch.
    pub iter: u64,
    pub loss_s: f64,
    pub loss_p: f64,
    pub loss_total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr1: f64,
    pub lr2: f64,
    /// Fraction of the first binarized layer's kernel weights within
    /// `±0.25·a` of `±a`.
    pub cluster_fraction: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.iter,
            self.loss_s,
            self.loss_p,
            self.loss_total,
            self.train_acc,
            self.test_acc,
            self.lr1,
            self.lr2
        )
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in history {
        let _ = writeln!(s, "{}", m.csv_row());
    }
    s
}

/// Momentum buffers, one per parameter tensor in a fixed traversal order:
/// `C` and `W` of each projection layer, then full-precision parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub buffers: Vec<Vec<f32>>,
}

impl OptimizerState {
    fn slot(&mut self, i: usize, len: usize) -> &mut Vec<f32> {
        if self.buffers.len() <= i {
            self.buffers.resize_with(i + 1, Vec::new);
        }
        let b = &mut self.buffers[i];
        if b.len() != len {
            *b = vec![0.0; len];
        }
        b
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    /// Iterations completed.
    pub iteration: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

/// Losses and accuracy of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: LossBreakdown,
    pub correct: usize,
    pub samples: usize,
}

pub trait TrainObserver {
    fn event(&mut self, _e: &StepEvent) {}
    fn epoch(&mut self, _m: &EpochMetrics) {}
}

impl TrainObserver for () {}

/// Collects every step event, for ordering checks.
#[derive(Default, Debug)]
pub struct EventLog(pub Vec<StepEvent>);

impl TrainObserver for EventLog {
    fn event(&mut self, e: &StepEvent) {
        self.0.push(e.clone());
    }
}

fn argmax_correct(logits: &Tensor4, labels: &[usize]) -> usize {
    let k = logits.shape().c;
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            best.0 == l
        })
        .count()
}

/// Classification accuracy of the inference-mode forward pass.
pub fn evaluate(net: &Network, ds: &Dataset, batch: usize) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = ds.batch(chunk);
        correct += argmax_correct(&net.forward_eval(&x)?, &y);
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: Network,
    pub state: TrainState,
    pub optimizer: OptimizerState,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut net = build_model(&config.model_spec()?, config.seed)?;
        if config.freeze_projections {
            for n in net.proj_nodes_mut() {
                n.layer.projections_mut().fill(1.0);
            }
        }
        Ok(Trainer {
            config,
            net,
            state: TrainState::default(),
            optimizer: OptimizerState::default(),
        })
    }

    pub fn lr1(&self) -> f64 {
        self.config.lr_at(self.config.eta1, self.state.epoch)
    }

    pub fn lr2(&self) -> f64 {
        self.config.lr_at(self.config.eta2, self.state.epoch)
    }

    fn non_finite(&self, what: &str, detail: String) -> PcnnError {
        PcnnError::NonFinite {
            layer: self.net.first_non_finite().unwrap_or_else(|| what.to_string()),
            iteration: self.state.iteration,
            detail,
        }
    }

    /// One iteration on a batch.
    pub fn step(&mut self, x: &Tensor4, labels: &[usize], obs: &mut dyn TrainObserver) -> Result<StepStats> {
        let cfg = &self.config;
        let (lr1, lr2) = (self.lr1() as f32, self.lr2() as f32);
        let eta = cfg.eta_projection.unwrap_or(lr1 as f64);
        let (lambda, use_lp, freeze) = (cfg.lambda, cfg.projection_loss, cfg.freeze_projections);
        let (mom, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);

        let logits = self.net.forward_train(x)?;
        let (l_s, grad) = cross_entropy(&logits, labels)?;
        if !l_s.is_finite() || !logits.is_finite() {
            let layer = self.net.first_non_finite_output(x).unwrap_or_else(|| "logits".into());
            return Err(self.non_finite(&layer, format!("task loss {l_s}")));
        }
        let correct = argmax_correct(&logits, labels);
        self.net.backward(&grad, &mut |e| obs.event(&e))?;

        let mut l_p = 0.0;
        let mut nodes = self.net.proj_nodes_mut();
        for (k, node) in nodes.iter_mut().enumerate().rev() {
            if use_lp {
                let lp = node.projection_loss(eta, lambda)?;
                if !lp.is_finite() {
                    let layer = node.layer.name.clone();
                    return Err(PcnnError::NonFinite {
                        layer,
                        iteration: self.state.iteration,
                        detail: format!("projection loss {lp}"),
                    });
                }
                l_p += lp;
            }
            let (d_c, d_w) = {
                let g = node.compute_grads(eta, lambda, use_lp)?;
                (g.d_c.clone(), g.d_w.clone())
            };
            let name = node.layer.name.clone();
            obs.event(&StepEvent::GradC(name.clone()));
            obs.event(&StepEvent::GradW(name.clone()));
            let vel = self.optimizer.slot(2 * k, d_c.data().len());
            sgd_update(node.layer.kernels_mut().data_mut(), d_c.data(), vel, lr1, mom, wd);
            if !freeze {
                let vel = self.optimizer.slot(2 * k + 1, d_w.len());
                sgd_update(node.layer.projections_mut(), &d_w, vel, lr2, mom, wd);
            }
            obs.event(&StepEvent::Update(name));
        }
        let base = 2 * nodes.len();
        drop(nodes);

        let mut i = base;
        let opt = &mut self.optimizer;
        self.net.for_each_fp_param(&mut |p| {
            let decay = if p.kind == ParamKind::Weight { wd } else { 0.0 };
            let vel = opt.slot(i, p.value.len());
            sgd_update(p.value, p.grad, vel, lr1, mom, decay);
            i += 1;
        });

        if let Some(layer) = self.net.first_non_finite() {
            return Err(PcnnError::NonFinite {
                layer,
                iteration: self.state.iteration,
                detail: "parameter became non-finite after update".into(),
            });
        }
        self.state.iteration += 1;
        Ok(StepStats {
            loss: LossBreakdown::new(l_s, l_p, lambda),
            correct,
            samples: labels.len(),
        })
    }

    fn epoch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.state.epoch as u64 + 1);
        rng
    }

    /// One pass over `train` in a seeded shuffled order. Returns mean
    /// `(L_S, L_P)` over batches and the training accuracy.
    pub fn run_epoch(&mut self, train: &Dataset, obs: &mut dyn TrainObserver) -> Result<(f64, f64, f64)> {
        let mut rng = self.epoch_rng();
        let n = match self.config.train_subset {
            0 => train.len(),
            s => s.min(train.len()),
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut ls, mut lp, mut correct, mut batches) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let (mut x, y) = train.batch(chunk);
            if self.config.augment {
                let (_, h, w) = train.sample_dims();
                let crop = h.min(w);
                x = augment(&x, 4, crop, if train.sample_dims().0 == 3 { 0.5 } else { 0.0 }, &mut rng)?;
            }
            let s = self.step(&x, &y, obs)?;
            ls += s.loss.l_s;
            lp += s.loss.l_p;
            correct += s.correct;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        Ok((ls / b, lp / b, correct as f64 / n.max(1) as f64))
    }

    /// Train for the remaining configured epochs. With `out_dir`, writes
    /// `metrics.csv`, `checkpoint.pcnn` and per-epoch histograms of the first
    /// binarized layer under `histograms/` after every epoch.
    pub fn fit(&mut self, train: &Dataset, test: &Dataset, out_dir: Option<&Path>, obs: &mut dyn TrainObserver) -> Result<()> {
        let mut test = test.clone();
        if self.config.test_subset > 0 {
            test.truncate(self.config.test_subset);
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir.join("histograms")).map_err(|e| PcnnError::io(dir.display().to_string(), e))?;
        }
        while self.state.epoch < self.config.epochs {
            let (lr1, lr2) = (self.lr1(), self.lr2());
            let (loss_s, loss_p, train_acc) = self.run_epoch(train, obs)?;
            let test_acc = evaluate(&self.net, &test, 1000)?;
            self.state.epoch += 1;
            let first = self.net.first_binarized().map(|l| l.name.clone());
            let cf = match &first {
                Some(name) => layer_cluster_fraction(&self.net, name, self.config.omega_norm)?,
                None => 0.0,
            };
            let m = EpochMetrics {
                epoch: self.state.epoch,
                iter: self.state.iteration,
                loss_s,
                loss_p,
                loss_total: LossBreakdown::new(loss_s, loss_p, self.config.lambda).total,
                train_acc,
                test_acc,
                lr1,
                lr2,
                cluster_fraction: cf,
            };
            self.state.history.push(m.clone());
            if let Some(dir) = out_dir {
                write_file(&dir.join("metrics.csv"), metrics_csv(&self.state.history).as_bytes())?;
                if let Some(name) = &first {
                    let h = emit_histogram(&self.net, name, self.config.histogram_bins)?;
                    let file = format!("{}_epoch{:03}.csv", name.replace('.', "_"), self.state.epoch);
                    write_file(&dir.join("histograms").join(file), h.to_csv().as_bytes())?;
                }
                self.save_checkpoint(&dir.join("checkpoint.pcnn"))?;
            }
            obs.epoch(&m);
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = export::checkpoint_bytes(self)?;
        write_file(path, &bytes)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| PcnnError::io(path.display().to_string(), e))?;
        export::trainer_from_checkpoint(&bytes)
    }
}

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| PcnnError::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| PcnnError::io(path.display().to_string(), e))
}

/// Build, train and return the model with its metric history.
pub fn train(
    config: TrainConfig,
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
    obs: &mut dyn TrainObserver,
) -> Result<(Network, Vec<EpochMetrics>)> {
    let mut t = Trainer::new(config)?;
    t.fit(train, test, out_dir, obs)?;
    Ok((t.net, t.state.history))
}
