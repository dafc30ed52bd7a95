use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fisher_prune::checkpoint::Checkpoint;
use fisher_prune::flops::CostLedger;
use fisher_prune::mnist::{self, Dataset};
use fisher_prune::pruning::{read_audit_csv, PruneEvent};
use fisher_prune::trainer::{self, Evaluation, Objective, PruneStatus, TrainConfig, TrainError};
use fisher_prune::build_lenet5;
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{write_file, write_table, Provenance};
use crate::{CliError, Split};

fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::Io(format!("{}: {e}", cfg.out_dir.display())))?;
    write_file(&cfg.out_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(cfg.out_dir.clone())
}

fn provenance(cfg: &RunConfig) -> Provenance {
    Provenance::new(cfg.hash(), cfg.seed)
}

struct Data {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn load_data(cfg: &RunConfig) -> Result<Data, CliError> {
    let (full, test) = mnist::load_mnist_dir(&cfg.data_dir)?;
    let (train, val) = mnist::split(&full, cfg.n_train, cfg.seed)?;
    info!("loaded MNIST: {} train, {} val, {} test", train.len(), val.len(), test.len());
    Ok(Data { train, val, test })
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("no input checkpoint (use --checkpoint or `checkpoint = ...`)".into()))?;
    Ok(Checkpoint::load(path)?)
}

/// FLOPs (total, conv) of the unpruned architecture a checkpoint came from.
fn baseline_costs(ckpt: &Checkpoint) -> Result<(u64, u64), CliError> {
    let meta = |k: &str| ckpt.meta.get(k).and_then(|v| v.parse::<u64>().ok());
    if let (Some(t), Some(c)) = (meta("baseline_flops"), meta("baseline_conv_flops")) {
        return Ok((t, c));
    }
    let mut full = ckpt.model.clone();
    for f in full.features() {
        full.set_mask(f, true)?;
    }
    let ledger = CostLedger::compute(&full)?;
    Ok((ledger.total(), ledger.conv_total()))
}

fn stamp(ckpt: Checkpoint, cfg: &RunConfig, command: &str, baseline: (u64, u64)) -> Checkpoint {
    ckpt.with_meta("command", command)
        .with_meta("config_hash", cfg.hash())
        .with_meta("seed", cfg.seed)
        .with_meta("baseline_flops", baseline.0)
        .with_meta("baseline_conv_flops", baseline.1)
}

fn pct(part: u64, whole: u64) -> f64 {
    100.0 * part as f64 / whole as f64
}

fn train_error(e: TrainError, dir: &Path, cfg: &RunConfig) -> CliError {
    if let Some(m) = e.last_finite {
        let path = dir.join("last_finite.ckpt");
        let base = CostLedger::compute(&m).map(|l| (l.total(), l.conv_total())).unwrap_or((0, 0));
        if stamp(Checkpoint::new(m), cfg, "train", base).save(&path).is_ok() {
            log::error!("last finite parameters saved to {}", path.display());
        }
    }
    CliError::Core(e.error)
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    best_step: usize,
    stopped_early: bool,
    val_loss: f64,
    test_loss: f64,
    test_error_pct: f64,
    flops: u64,
    params: usize,
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let tc = cfg.train_config()?;
    let data = load_data(cfg)?;
    let dir = prepare_out_dir(cfg)?;
    let teacher = match &cfg.train.distill.teacher {
        Some(p) => Some(Checkpoint::load(p)?.model),
        None => None,
    };
    let objective = match &teacher {
        Some(t) => Objective::Distill { teacher: t, w_hard: cfg.train.distill.w_hard, w_soft: cfg.train.distill.w_soft },
        None => Objective::CrossEntropy,
    };
    let model = build_lenet5(cfg.seed);
    info!("training LeNet-5 for up to {} steps", tc.max_steps);
    let out = trainer::train(&model, &data.train, &data.val, &tc, &objective).map_err(|e| train_error(e, &dir, cfg))?;
    let prov = provenance(cfg);
    write_table(&dir, "history", &out.history, &prov)?;
    let test = trainer::evaluate(&out.model, &data.test, tc.eval_batch)?;
    let ledger = CostLedger::compute(&out.model)?;
    let baseline = (ledger.total(), ledger.conv_total());
    stamp(Checkpoint::new(out.model.clone()), cfg, "train", baseline)
        .with_meta("step", out.best_step)
        .save(dir.join("model.ckpt"))?;
    let summary = TrainSummary {
        steps: out.steps,
        best_step: out.best_step,
        stopped_early: out.stopped_early,
        val_loss: out.best_val_loss,
        test_loss: test.loss,
        test_error_pct: 100.0 * test.error,
        flops: ledger.total(),
        params: out.model.parameter_count(),
    };
    write_table(&dir, "summary", &[&summary], &prov)?;
    println!(
        "trained {} steps (best {}): test error {:.2}%, test loss {:.4}",
        out.steps, out.best_step, summary.test_error_pct, test.loss
    );
    Ok(())
}

/// Audit row as written by the CLI: the event plus the unpruned baseline.
#[derive(Serialize)]
struct AuditRow<'a> {
    #[serde(flatten)]
    event: &'a PruneEvent,
    baseline_flops: u64,
    baseline_conv_flops: u64,
}

#[derive(Serialize)]
struct PruneSummary {
    status: PruneStatus,
    pruned: usize,
    prune_steps: usize,
    fine_tune_steps: usize,
    test_loss: f64,
    test_error_pct: f64,
    flops: u64,
    cost_pct: f64,
    conv_flops: u64,
    conv_cost_pct: f64,
    params: usize,
}

pub fn prune(cfg: &RunConfig) -> Result<(), CliError> {
    let pc = cfg.prune_config()?;
    let tc = TrainConfig { optimizer: pc.optimizer, ..cfg.train_config()? };
    let ckpt = load_checkpoint(cfg)?;
    let baseline = baseline_costs(&ckpt)?;
    let data = load_data(cfg)?;
    let dir = prepare_out_dir(cfg)?;
    let prov = provenance(cfg);
    info!("pruning {} features with {} ({})", pc.features_to_prune, pc.signal, pc.beta);
    let out = trainer::prune_train_loop(&ckpt.model, &data.train, &data.val, &pc, &Objective::CrossEntropy)?;
    if out.status == PruneStatus::Exhausted {
        log::warn!("ran out of prunable features after {} prunes", out.audit.len());
    }
    let rows: Vec<AuditRow> = out
        .audit
        .iter()
        .map(|event| AuditRow { event, baseline_flops: baseline.0, baseline_conv_flops: baseline.1 })
        .collect();
    write_table(&dir, "audit", &rows, &prov)?;

    let (model, ft_steps) = if cfg.prune.no_retrain || cfg.prune.fine_tune_steps == 0 {
        (out.model, 0)
    } else {
        info!("fine-tuning for {} steps", cfg.prune.fine_tune_steps);
        let ft = trainer::fine_tune(&out.model, &data.train, &data.val, cfg.prune.fine_tune_steps, &tc, &Objective::CrossEntropy)
            .map_err(|e| train_error(e, &dir, cfg))?;
        write_table(&dir, "finetune_history", &ft.history, &prov)?;
        (ft.model, ft.steps)
    };
    let compact = model.compact()?;
    let test = trainer::evaluate(&compact, &data.test, tc.eval_batch)?;
    let ledger = CostLedger::compute(&compact)?;
    stamp(Checkpoint::new(model), cfg, "prune", baseline).save(dir.join("pruned.ckpt"))?;
    stamp(Checkpoint::new(compact.clone()), cfg, "prune", baseline).save(dir.join("compact.ckpt"))?;
    let summary = PruneSummary {
        status: out.status,
        pruned: out.audit.len(),
        prune_steps: out.steps,
        fine_tune_steps: ft_steps,
        test_loss: test.loss,
        test_error_pct: 100.0 * test.error,
        flops: ledger.total(),
        cost_pct: pct(ledger.total(), baseline.0),
        conv_flops: ledger.conv_total(),
        conv_cost_pct: pct(ledger.conv_total(), baseline.1),
        params: compact.parameter_count(),
    };
    write_table(&dir, "summary", &[&summary], &prov)?;
    println!(
        "pruned {} features: test error {:.2}% at {:.1}% of baseline FLOPs ({:.1}% conv only)",
        summary.pruned, summary.test_error_pct, summary.cost_pct, summary.conv_cost_pct
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    signal: String,
    pruned: usize,
    loss: f64,
    error: f64,
    flops: u64,
    cost_pct: f64,
}

pub fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt = load_checkpoint(cfg)?;
    let baseline = baseline_costs(&ckpt)?;
    let data = load_data(cfg)?;
    let dir = prepare_out_dir(cfg)?;
    let signal_data = data.train.head(cfg.sweep.signal_samples);
    let eval_data = data.val.head(cfg.sweep.eval_samples);
    let mut rows = Vec::new();
    for &signal in &cfg.sweep.signals {
        let sc = cfg.sweep_config(signal, ckpt.model.total_features());
        info!("sweep {signal}: up to {} features, {} per round", sc.max_pruned, sc.per_round);
        let out = trainer::no_retrain_sweep(&ckpt.model, &signal_data, &eval_data, &sc)?;
        for p in out.points {
            rows.push(SweepRow {
                signal: signal.to_string(),
                pruned: p.pruned,
                loss: p.loss,
                error: p.error,
                flops: p.flops,
                cost_pct: pct(p.flops, baseline.0),
            });
        }
    }
    write_table(&dir, "sweep", &rows, &provenance(cfg))?;
    println!("wrote {} sweep points to {}", rows.len(), dir.join("sweep.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    dataset: String,
    samples: usize,
    error_pct: f64,
    loss: f64,
    flops: u64,
    cost_pct: f64,
    conv_flops: u64,
    conv_cost_pct: f64,
    params: usize,
    effective_params: usize,
}

pub fn eval(cfg: &RunConfig, split: Split, idx: Option<(PathBuf, PathBuf)>) -> Result<(), CliError> {
    let ckpt = load_checkpoint(cfg)?;
    let baseline = baseline_costs(&ckpt)?;
    let (name, data) = match idx {
        Some((images, labels)) => (images.display().to_string(), mnist::load_idx(&images, &labels)?),
        None => {
            let d = load_data(cfg)?;
            match split {
                Split::Train => ("train".to_string(), d.train),
                Split::Val => ("val".to_string(), d.val),
                Split::Test => ("test".to_string(), d.test),
            }
        }
    };
    let dir = prepare_out_dir(cfg)?;
    let Evaluation { loss, error, samples } = trainer::evaluate(&ckpt.model, &data, cfg.train.eval_batch.max(1))?;
    let ledger = CostLedger::compute(&ckpt.model)?;
    let row = EvalRow {
        dataset: name,
        samples,
        error_pct: 100.0 * error,
        loss,
        flops: ledger.total(),
        cost_pct: pct(ledger.total(), baseline.0),
        conv_flops: ledger.conv_total(),
        conv_cost_pct: pct(ledger.conv_total(), baseline.1),
        params: ckpt.model.parameter_count(),
        effective_params: ckpt.model.effective_parameter_count(),
    };
    write_table(&dir, "eval", &[&row], &provenance(cfg))?;
    println!(
        "{}: {} samples, error {:.2}%, cross-entropy {:.4}, FLOPs {} ({:.1}%), conv FLOPs {} ({:.1}%), params {}",
        row.dataset, row.samples, row.error_pct, row.loss, row.flops, row.cost_pct, row.conv_flops, row.conv_cost_pct, row.params
    );
    Ok(())
}

#[derive(Serialize)]
struct ReportRow {
    source: String,
    pruned: usize,
    step: usize,
    layer: String,
    feature: usize,
    flops: u64,
    cost_pct: f64,
    conv_flops: u64,
    conv_cost_pct: f64,
    val_error: Option<f64>,
}

#[derive(serde::Deserialize)]
struct Baselines {
    baseline_flops: Option<u64>,
    baseline_conv_flops: Option<u64>,
}

/// Audit events plus the (total, conv) baseline FLOPs if the file records them.
type Audit = (Vec<PruneEvent>, Option<(u64, u64)>);

fn read_audit(path: &Path) -> Result<Audit, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let bad = |e: csv::Error| CliError::Io(format!("{}: not an audit CSV: {e}", path.display()));
    let events = read_audit_csv(&bytes[..]).map_err(bad)?;
    let mut r = csv::Reader::from_reader(&bytes[..]);
    let base = match r.deserialize::<Baselines>().next() {
        Some(Ok(Baselines { baseline_flops: Some(t), baseline_conv_flops: Some(c) })) => Some((t, c)),
        Some(Err(e)) => return Err(bad(e)),
        _ => None,
    };
    Ok((events, base))
}

pub fn report(cfg: &RunConfig, audits: &[PathBuf]) -> Result<(), CliError> {
    let mut files = Vec::new();
    for p in audits {
        let (events, base) = read_audit(p)?;
        files.push((p.display().to_string(), events, base));
    }
    // the unpruned baseline is the largest one any file knows about
    let mut baseline = (0u64, 0u64);
    for (_, events, base) in &files {
        let (t, c) = match (base, events.first()) {
            (Some(b), _) => *b,
            (None, Some(e)) => ((e.total_flops as i64 - e.delta_cost) as u64, events.iter().map(|e| e.conv_flops).max().unwrap()),
            (None, None) => (0, 0),
        };
        baseline = (baseline.0.max(t), baseline.1.max(c));
    }
    if baseline.0 == 0 {
        return Err(CliError::Io("audit files contain no prune events".into()));
    }
    let mut rows = Vec::new();
    for (source, events, _) in &files {
        for (i, e) in events.iter().enumerate() {
            rows.push(ReportRow {
                source: source.clone(),
                pruned: i + 1,
                step: e.step,
                layer: e.layer.clone(),
                feature: e.feature,
                flops: e.total_flops,
                cost_pct: pct(e.total_flops, baseline.0),
                conv_flops: e.conv_flops,
                conv_cost_pct: pct(e.conv_flops, baseline.1),
                val_error: e.val_error,
            });
        }
    }
    rows.sort_by(|a, b| {
        a.cost_pct.total_cmp(&b.cost_pct).then_with(|| a.source.cmp(&b.source)).then(a.pruned.cmp(&b.pruned))
    });
    let dir = prepare_out_dir(cfg)?;
    write_table(&dir, "report", &rows, &provenance(cfg))?;
    let per_file: BTreeMap<&str, usize> = files.iter().map(|(s, e, _)| (s.as_str(), e.len())).collect();
    println!("merged {} events from {} files into {}", rows.len(), per_file.len(), dir.join("report.csv").display());
    Ok(())
}
