use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcnn")).args(args).output().expect("run pcnn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_idx(dir: &Path, prefix: &str, n: usize, seed: u32) {
    let mut images = vec![0, 0, 8, 3];
    for d in [n as u32, 28, 28] {
        images.extend(d.to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend((n as u32).to_be_bytes());
    let mut state = seed;
    for _ in 0..n {
        let label = (state % 10) as u8;
        labels.push(label);
        for y in 0..28usize {
            for _ in 0..28 {
                state = state.wrapping_mul(1_103_515_245).wrapping_add(12345);
                let noise = (state >> 16) as u8 % 40;
                images.push(if y / 3 == label as usize { 200 + noise } else { noise });
            }
        }
    }
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

fn fake_mnist(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    write_idx(dir, "train", 64, 7);
    write_idx(dir, "t10k", 32, 11);
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = pcnn(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn missing_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = pcnn(&["train", "--data", tmp.path().join("nope").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let line = stderr(&o);
    assert!(line.starts_with("error[data]: "), "{line}");
    assert_eq!(line.trim_end().lines().count(), 1);
}

#[test]
fn analyze_memory_prints_report() {
    let o = pcnn(&["analyze-memory", "--arch", "resnet18-like", "--J", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("resnet18-like full"));
    assert!(text.contains("Mbit"));
    let o = pcnn(&["analyze-memory", "--arch", "vgg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[unknown-arch]"));
}

#[test]
fn train_export_eval_bench_histogram() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    fake_mnist(&data);
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, "# tiny run\nepochs = 2\nbatch_size = 16\nwidth = 4\n").unwrap();

    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = pcnn(&[
            "--deterministic",
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "3",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let a = run("a");
    let b = run("b");
    for f in ["metrics.csv", "model.pcnn", "checkpoint.pcnn", "histograms/proj1_epoch002.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch,iter,loss_s,loss_p,loss_total,train_acc,test_acc,lr1,lr2");
    assert_eq!(metrics.lines().count(), 3);

    let exported = tmp.path().join("exported.pcnn");
    let o = pcnn(&["export", "--checkpoint", a.join("checkpoint.pcnn").to_str().unwrap(), "--out", exported.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(&exported).unwrap(), fs::read(a.join("model.pcnn")).unwrap());

    let o = pcnn(&["eval", "--model", exported.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("test accuracy"));

    let bench_dir = tmp.path().join("bench");
    let o = pcnn(&["bench", "--model", exported.to_str().unwrap(), "--out", bench_dir.to_str().unwrap(), "--iters", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(bench_dir.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");

    let hist_dir = tmp.path().join("hist");
    let o = pcnn(&[
        "histogram",
        "--checkpoint",
        a.join("checkpoint.pcnn").to_str().unwrap(),
        "--layer",
        "proj2",
        "--bins",
        "10",
        "--out",
        hist_dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let hist = fs::read_to_string(hist_dir.join("proj2_hist.csv")).unwrap();
    assert_eq!(hist.lines().count(), 11);
    let total: u64 = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 4 * 4 * 9);

    let o = pcnn(&["histogram", "--checkpoint", a.join("checkpoint.pcnn").to_str().unwrap(), "--layer", "nope"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[unknown-layer]"), "{}", stderr(&o));
}
