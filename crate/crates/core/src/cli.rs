//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error, 3 missing or
//! unreadable dataset. Failures print one line `error[<category>]: <message>`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::bitpack::PackedActivations;
use crate::data::{load_cifar10_dir, load_mnist, Dataset, Split};
use crate::error::{PcnnError, Result};
use crate::export::{export_model, import_model, InferLayer, InferenceModel};
use crate::memory::{describe_arch, describe_network, memory_report, MemoryReport};
use crate::network::{build_model, ModelSpec};
use crate::parallel;
use crate::tensor::{conv2d_grouped, Shape4, Tensor4};
use crate::trainer::{emit_histogram, EpochMetrics, TrainConfig, TrainObserver, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "pcnn", version, about = "Projection convolutional networks: train, export and run binary CNNs")]
struct Cli {
    /// Single-threaded execution for bitwise-reproducible output.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes metrics.csv, checkpoint.pcnn and histograms/ under --out.
    Train(TrainArgs),
    /// Test-set accuracy of a model or checkpoint.
    Eval(EvalArgs),
    /// Convert a checkpoint to an inference model file.
    Export(ExportArgs),
    /// Throughput of packed XNOR versus float convolution per binary layer.
    Bench(BenchArgs),
    /// Storage report: full-precision versus binarized bits.
    AnalyzeMemory(MemoryArgs),
    /// Histogram of a layer's full-precision kernel weights.
    Histogram(HistogramArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (MNIST IDX files or extracted CIFAR-10 binaries).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long = "J")]
    j: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from `<out>/checkpoint.pcnn` if present.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `mnist` or `cifar10`; inferred from the model's input shape when omitted.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output file, or directory to receive `model.pcnn`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    iters: usize,
}

#[derive(Args, Debug)]
struct MemoryArgs {
    /// `resnet18-like`, `small-cnn` or `wrn22-like`.
    #[arg(long, default_value = "resnet18-like")]
    arch: String,
    #[arg(long = "J", default_value_t = 1)]
    j: usize,
    /// Base width for `small-cnn` / `wrn22-like`.
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HistogramArgs {
    /// Checkpoint holding the full-precision kernels.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    layer: String,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// An error plus the exit code it maps to.
struct Failure(i32, PcnnError);

impl From<PcnnError> for Failure {
    fn from(e: PcnnError) -> Self {
        Failure(EXIT_FAILURE, e)
    }
}

fn data_failure(e: PcnnError) -> Failure {
    Failure(EXIT_DATA, e)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PcnnError::io(dir.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| PcnnError::io(path.display().to_string(), e))
}

/// Output path: `out` itself if it names a file, else `out/default_name`.
fn out_file(out: &Path, default_name: &str) -> PathBuf {
    if out.extension().is_some() {
        out.to_path_buf()
    } else {
        out.join(default_name)
    }
}

fn load_dataset(dataset: &str, dir: &Path, split: Split) -> std::result::Result<Dataset, Failure> {
    if !dir.is_dir() {
        return Err(data_failure(PcnnError::Data(format!("dataset directory {} not found", dir.display()))));
    }
    match dataset {
        "mnist" => load_mnist(dir, split),
        "cifar10" => load_cifar10_dir(dir, split),
        other => return Err(Failure(EXIT_USAGE, PcnnError::Config(format!("unknown dataset `{other}`")))),
    }
    .map_err(data_failure)
}

struct Progress;

impl TrainObserver for Progress {
    fn epoch(&mut self, m: &EpochMetrics) {
        eprintln!(
            "epoch {:>3}  iter {:>7}  loss_s {:.4}  loss_p {:.3e}  train {:.4}  test {:.4}  lr {:.2e}/{:.2e}  clustered {:.4}",
            m.epoch, m.iter, m.loss_s, m.loss_p, m.train_acc, m.test_acc, m.lr1, m.lr2, m.cluster_fraction
        );
    }
}

fn cmd_train(a: TrainArgs, deterministic: bool) -> std::result::Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| PcnnError::io(p.display().to_string(), e))?;
            TrainConfig::parse(&text).map_err(|e| Failure(EXIT_USAGE, e))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.arch {
        cfg.arch = v;
    }
    if let Some(v) = a.j {
        cfg.j = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    cfg.validate().map_err(|e| Failure(EXIT_USAGE, e))?;
    if deterministic {
        parallel::set_threads(1);
    }
    let train = load_dataset(&cfg.dataset, &a.data, Split::Train)?;
    let test = load_dataset(&cfg.dataset, &a.data, Split::Test)?;
    create_dir(&a.out)?;
    let ckpt = a.out.join("checkpoint.pcnn");
    let mut trainer = if a.resume && ckpt.is_file() {
        let mut t = Trainer::load_checkpoint(&ckpt)?;
        t.config.epochs = cfg.epochs;
        t
    } else {
        Trainer::new(cfg)?
    };
    write_text(&a.out.join("config.txt"), &trainer.config.to_text())?;
    trainer.fit(&train, &test, Some(&a.out), &mut Progress)?;
    export_model(&trainer.net, &a.out.join("model.pcnn"))?;
    if let Some(m) = trainer.state.history.last() {
        println!("final test accuracy {:.4} after {} epochs", m.test_acc, m.epoch);
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, deterministic: bool) -> std::result::Result<(), Failure> {
    if deterministic {
        parallel::set_threads(1);
    }
    let model = import_model(&a.model)?;
    let dataset = match a.dataset {
        Some(d) => d,
        None if model.header.input.0 == 3 => "cifar10".into(),
        None => "mnist".into(),
    };
    let test = load_dataset(&dataset, &a.data, Split::Test)?;
    let acc = eval_model(&model, &test)?;
    println!("test accuracy {acc:.4} on {} samples", test.len());
    if let Some(out) = a.out {
        write_text(&out_file(&out, "eval.csv"), &format!("model,samples,test_acc\n{},{},{acc}\n", a.model.display(), test.len()))?;
    }
    Ok(())
}

fn eval_model(model: &InferenceModel, ds: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(500) {
        let (x, y) = ds.batch(chunk);
        let logits = model.forward(&x)?;
        let k = logits.shape().c;
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            let best = row.iter().enumerate().fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            correct += (best.0 == label) as usize;
        }
    }
    Ok(correct as f64 / ds.len().max(1) as f64)
}

fn cmd_export(a: ExportArgs) -> std::result::Result<(), Failure> {
    let t = Trainer::load_checkpoint(&a.checkpoint)?;
    let path = out_file(&a.out, "model.pcnn");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    export_model(&t.net, &path)?;
    let size = fs::metadata(&path).map_err(|e| PcnnError::io(path.display().to_string(), e))?.len();
    println!("wrote {} ({size} bytes)", path.display());
    Ok(())
}

fn time_per_iter(iters: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let start = Instant::now();
    for _ in 0..iters {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() / iters.max(1) as f64)
}

fn cmd_bench(a: BenchArgs, deterministic: bool) -> std::result::Result<(), Failure> {
    if deterministic {
        parallel::set_threads(1);
    }
    let model = import_model(&a.model)?;
    let (c, h, w) = model.header.input;
    let x = Tensor4::from_fn(Shape4::new(a.batch, c, h, w), |n, c, y, x| (((n * 31 + c * 7 + y * 13 + x * 3) % 11) as f32) - 5.0);
    // Record every binary layer's input by walking the model once.
    let mut csv = String::from("layer,input_shape,macs,packed_sec,float_sec,packed_macs_per_sec,float_macs_per_sec,speedup\n");
    let mut y = x;
    for layer in &model.layers {
        bench_layer(layer, &y, a.iters, &mut csv)?;
        y = layer.forward(&y)?;
    }
    print!("{csv}");
    if let Some(out) = a.out {
        write_text(&out_file(&out, "bench.csv"), &csv)?;
    }
    Ok(())
}

fn bench_layer(layer: &InferLayer, x: &Tensor4, iters: usize, csv: &mut String) -> Result<()> {
    match layer {
        InferLayer::Binary(b) if b.binarize_input => {
            let out = b.forward(x)?;
            let ks = b.kernel.shape();
            let macs = (out.shape().len() * ks.per_kernel()) as f64;
            let signs = x.map(crate::proj_conv::sign);
            let unpacked = b.kernel.unpack();
            let packed_t = time_per_iter(iters, || {
                let p = PackedActivations::from_signs(x);
                crate::bitpack::xnor_conv(&p, &b.kernel, b.stride, b.pad).map(|_| ())
            })?;
            let float_t = time_per_iter(iters, || conv2d_grouped(&signs, &unpacked, b.stride, b.pad, b.groups).map(|_| ()))?;
            let s = x.shape();
            let _ = writeln!(
                csv,
                "{},{}x{}x{}x{},{macs},{packed_t:.6e},{float_t:.6e},{:.4e},{:.4e},{:.3}",
                b.name,
                s.n,
                s.c,
                s.h,
                s.w,
                macs / packed_t,
                macs / float_t,
                float_t / packed_t
            );
        }
        InferLayer::Residual { body, shortcut, .. } => {
            let mut y = x.clone();
            for l in body {
                bench_layer(l, &y, iters, csv)?;
                y = l.forward(&y)?;
            }
            if let Some(s) = shortcut {
                bench_layer(s, x, iters, csv)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn report_csv(r: &MemoryReport) -> String {
    let mut s = String::from("layer,params,full_bits,compressed_bits\n");
    for l in &r.layers {
        let _ = writeln!(s, "{},{},{},{}", l.name, l.params, l.full_bits, l.compressed_bits);
    }
    let _ = writeln!(s, "total,,{},{}", r.full_total, r.compressed_total);
    s
}

fn cmd_memory(a: MemoryArgs) -> std::result::Result<(), Failure> {
    let desc = match a.arch.as_str() {
        "small-cnn" => describe_network(&build_model(&ModelSpec { width: a.width, ..ModelSpec::small_cnn(a.j) }, 0)?),
        "wrn22-like" | "wrn-22-like" => describe_network(&build_model(&ModelSpec::wrn22(a.width, a.j), 0)?),
        other => describe_arch(other, a.j).map_err(|e| Failure(EXIT_USAGE, e))?,
    };
    let r = memory_report(&desc);
    println!("{r}");
    if let Some(out) = a.out {
        write_text(&out_file(&out, "memory.csv"), &report_csv(&r))?;
    }
    Ok(())
}

fn cmd_histogram(a: HistogramArgs) -> std::result::Result<(), Failure> {
    let t = Trainer::load_checkpoint(&a.checkpoint)?;
    let h = emit_histogram(&t.net, &a.layer, a.bins)?;
    let csv = h.to_csv();
    match a.out {
        Some(out) => write_text(&out_file(&out, &format!("{}_hist.csv", a.layer.replace('.', "_"))), &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let d = cli.deterministic;
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, d),
        Command::Eval(a) => cmd_eval(a, d),
        Command::Export(a) => cmd_export(a),
        Command::Bench(a) => cmd_bench(a, d),
        Command::AnalyzeMemory(a) => cmd_memory(a),
        Command::Histogram(a) => cmd_histogram(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure(code, e)) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            code
        }
    }
}
