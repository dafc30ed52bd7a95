use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fisher_prune::mnist::{write_idx, Dataset};
use fisher_prune::{Checkpoint, Tensor};

/// Ten learnable classes: class `c` lights up a 6x6 block at a class-specific
/// spot, plus pseudo-random speckle.
fn synthetic(n: usize, salt: u64) -> Dataset {
    let mut state = salt.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as f32 / (1u64 << 31) as f32
    };
    let mut data = vec![0f32; n * 784];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        let (r0, c0) = (2 + (c / 5) * 12, 2 + (c % 5) * 5);
        for r in 0..28 {
            for col in 0..28 {
                let block = (r0..r0 + 6).contains(&r) && (c0..c0 + 6).contains(&col);
                let v = if block { 0.8 + 0.2 * next() } else { 0.15 * next() };
                data[i * 784 + r * 28 + col] = (v * 255.0).round() / 255.0;
            }
        }
        labels.push(c);
    }
    Dataset { images: Tensor::new(&[n, 1, 28, 28], data).unwrap(), labels, tag: "synthetic".into() }
}

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        fs::create_dir(&data).unwrap();
        write_idx(&synthetic(300, 1), data.join("train-images-idx3-ubyte"), data.join("train-labels-idx1-ubyte")).unwrap();
        write_idx(&synthetic(100, 2), data.join("t10k-images-idx3-ubyte"), data.join("t10k-labels-idx1-ubyte")).unwrap();
        fs::write(
            dir.path().join("run.toml"),
            "n_train = 240\n\
             [train]\nbatch_size = 16\neval_every = 10\npatience = 0\nmax_steps = 40\neval_batch = 50\n\
             [prune]\nfeatures_to_prune = 6\nsteps_per_prune = 2\nbatch_size = 16\neval_every_prunes = 3\n\
             eval_samples = 60\nfine_tune_steps = 10\n\
             [sweep]\nsignals = [\"fisher\", \"l1w\"]\nper_round = 3\nmax_pruned = 6\nsignal_samples = 64\neval_samples = 60\n",
        )
        .unwrap();
        Sandbox { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_fprune"));
        cmd.current_dir(self.dir.path()).env("RUST_LOG", "warn").args(["--data-dir", "data"]);
        if !args.contains(&"--config") {
            cmd.args(["--config", "run.toml"]);
        }
        cmd.args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "fprune {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
        out
    }

    fn train(&self, out_dir: &str) -> PathBuf {
        self.ok(&["train", "--out-dir", out_dir]);
        self.path(out_dir).join("model.ckpt")
    }
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn column(csv_text: &str, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

#[test]
fn missing_checkpoint_is_a_usage_error_naming_the_path() {
    let sb = Sandbox::new();
    let out = sb.run(&["eval", "--checkpoint", "nowhere/model.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/model.ckpt"));
}

#[test]
fn missing_data_dir_is_a_usage_error() {
    let sb = Sandbox::new();
    let out = sb.run(&["train", "--data-dir", "no-such-dir", "--out-dir", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-dir"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let sb = Sandbox::new();
    fs::write(sb.path("bad.toml"), "[prune]\nbeta_star = 1.0\n").unwrap();
    let out = sb.run(&["--config", "bad.toml", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta_star"));
}

#[test]
fn bad_flag_exits_with_usage_code() {
    let sb = Sandbox::new();
    assert_eq!(sb.run(&["prune", "--signal", "oracle"]).status.code(), Some(2));
    assert_eq!(sb.run(&["prune", "--beta", "1e-3", "--beta-auto"]).status.code(), Some(2));
}

#[test]
fn training_is_deterministic_and_stamped() {
    let sb = Sandbox::new();
    let a = sb.train("a");
    let b = sb.train("b");
    assert!(fs::read(&a).unwrap() == fs::read(&b).unwrap(), "checkpoints differ");
    assert_eq!(read(sb.path("a/history.csv")), read(sb.path("b/history.csv")));

    let history = read(sb.path("a/history.csv"));
    let hashes = column(&history, "config_hash");
    assert!(!hashes.is_empty() && hashes.iter().all(|h| h.len() == 16 && *h == hashes[0]));
    assert!(column(&history, "seed").iter().all(|s| s == "0"));
    let json: serde_json::Value = serde_json::from_str(&read(sb.path("a/history.json"))).unwrap();
    assert_eq!(json["config_hash"], hashes[0].as_str());
    assert_eq!(json["records"].as_array().unwrap().len(), hashes.len());

    let ckpt = Checkpoint::load(&a).unwrap();
    assert_eq!(ckpt.meta["config_hash"], hashes[0]);
    assert_eq!(ckpt.meta["baseline_flops"], "4601230");

    let c = sb.ok(&["train", "--out-dir", "c", "--seed", "1"]);
    assert!(c.status.success());
    assert!(fs::read(&a).unwrap() != fs::read(sb.path("c/model.ckpt")).unwrap(), "seed had no effect");
}

#[test]
fn prune_writes_audit_and_equivalent_compact_model() {
    let sb = Sandbox::new();
    let model = sb.train("t");
    let model = model.to_str().unwrap();
    sb.ok(&["prune", "--checkpoint", model, "--out-dir", "p", "--beta", "1e-6"]);

    let audit = read(sb.path("p/audit.csv"));
    let header = audit.lines().next().unwrap();
    assert!(header.starts_with("step,layer,feature,delta_loss,delta_cost,beta,score,total_flops,conv_flops,val_error"));
    assert!(header.ends_with("baseline_flops,baseline_conv_flops,config_hash,seed,version"));
    let flops: Vec<u64> = column(&audit, "total_flops").iter().map(|s| s.parse().unwrap()).collect();
    assert_eq!(flops.len(), 6);
    assert!(flops.windows(2).all(|w| w[1] < w[0]));
    // validation error is recorded every third prune
    let val = column(&audit, "val_error");
    assert_eq!(val.iter().filter(|v| !v.is_empty()).count(), 2);

    let pruned = Checkpoint::load(sb.path("p/pruned.ckpt")).unwrap().model;
    let compact = Checkpoint::load(sb.path("p/compact.ckpt")).unwrap().model;
    assert_eq!(pruned.alive_features(), pruned.total_features() - 6);
    assert_eq!(compact.alive_features(), compact.total_features());
    assert!(compact.parameter_count() < pruned.parameter_count());
    let x = synthetic(20, 9).images;
    let (a, b) = (pruned.predict(&x).unwrap(), compact.predict(&x).unwrap());
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() <= 1e-5 * (1.0 + u.abs()), "{u} vs {v}");
    }

    let summary = read(sb.path("p/summary.csv"));
    assert_eq!(column(&summary, "flops")[0], flops[5].to_string());
    assert_eq!(column(&summary, "fine_tune_steps")[0], "10");

    // same seed, same result
    sb.ok(&["prune", "--checkpoint", model, "--out-dir", "q", "--beta", "1e-6"]);
    assert_eq!(column(&read(sb.path("q/audit.csv")), "feature"), column(&audit, "feature"));
    assert!(fs::read(sb.path("p/compact.ckpt")).unwrap() == fs::read(sb.path("q/compact.ckpt")).unwrap());

    sb.ok(&["prune", "--checkpoint", model, "--out-dir", "n", "--no-retrain"]);
    assert!(!sb.path("n/finetune_history.csv").exists());
    assert_eq!(column(&read(sb.path("n/summary.csv")), "fine_tune_steps")[0], "0");
}

#[test]
fn eval_on_explicit_idx_pair() {
    let sb = Sandbox::new();
    let model_path = sb.train("t");
    let data = synthetic(10, 5);
    write_idx(&data, sb.path("ten-images"), sb.path("ten-labels")).unwrap();
    sb.ok(&[
        "eval",
        "--checkpoint",
        model_path.to_str().unwrap(),
        "--images",
        "ten-images",
        "--labels",
        "ten-labels",
        "--out-dir",
        "e",
    ]);
    let model = Checkpoint::load(&model_path).unwrap().model;
    let logits = model.predict(&data.images).unwrap();
    let wrong = (0..10)
        .filter(|&i| {
            let row = &logits.data()[i * 10..(i + 1) * 10];
            let arg = (0..10).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            arg != data.labels[i]
        })
        .count();
    let csv = read(sb.path("e/eval.csv"));
    assert_eq!(column(&csv, "samples")[0], "10");
    let err: f64 = column(&csv, "error_pct")[0].parse().unwrap();
    assert!((err - 10.0 * wrong as f64).abs() < 1e-9);
    assert_eq!(column(&csv, "cost_pct")[0], "100.0");
    assert_eq!(column(&csv, "conv_flops")[0], "3790720");
}

#[test]
fn report_merges_and_sorts_by_cost() {
    let sb = Sandbox::new();
    let model = sb.train("t");
    let model = model.to_str().unwrap();
    sb.ok(&["prune", "--checkpoint", model, "--out-dir", "f", "--no-retrain", "--prune-count", "4"]);
    sb.ok(&["prune", "--checkpoint", model, "--out-dir", "g", "--no-retrain", "--signal", "l1w", "--prune-count", "3"]);
    sb.ok(&["report", "f/audit.csv", "g/audit.csv", "--out-dir", "r"]);

    let report = read(sb.path("r/report.csv"));
    let cost: Vec<f64> = column(&report, "cost_pct").iter().map(|s| s.parse().unwrap()).collect();
    assert_eq!(cost.len(), 7);
    assert!(cost.windows(2).all(|w| w[0] <= w[1]));
    let flops: Vec<f64> = column(&report, "flops").iter().map(|s| s.parse().unwrap()).collect();
    for (c, f) in cost.iter().zip(&flops) {
        assert!((c - 100.0 * f / 4_601_230.0).abs() < 1e-9);
    }
    // rows carry the source file's own numbers
    let f_flops = column(&read(sb.path("f/audit.csv")), "total_flops");
    let sources = column(&report, "source");
    let from_f: Vec<String> =
        column(&report, "flops").into_iter().zip(&sources).filter(|(_, s)| s.starts_with("f/")).map(|(v, _)| v).collect();
    let mut sorted_f = f_flops.clone();
    sorted_f.sort_by_key(|v| std::cmp::Reverse(v.parse::<u64>().unwrap()));
    let mut from_f_sorted = from_f.clone();
    from_f_sorted.sort_by_key(|v| std::cmp::Reverse(v.parse::<u64>().unwrap()));
    assert_eq!(from_f_sorted, sorted_f);

    fs::write(sb.path("junk.csv"), "a,b\n1,2\n").unwrap();
    assert_eq!(sb.run(&["report", "junk.csv", "--out-dir", "r2"]).status.code(), Some(2));
}

#[test]
fn sweep_writes_one_curve_per_signal() {
    let sb = Sandbox::new();
    let model = sb.train("t");
    sb.ok(&["sweep", "--checkpoint", model.to_str().unwrap(), "--out-dir", "s"]);
    let csv = read(sb.path("s/sweep.csv"));
    let signals = column(&csv, "signal");
    let pruned = column(&csv, "pruned");
    for s in ["fisher", "l1w"] {
        let pts: Vec<&String> = pruned.iter().zip(&signals).filter(|(_, g)| *g == s).map(|(p, _)| p).collect();
        assert_eq!(pts, ["0", "3", "6"], "{s}");
    }
}
