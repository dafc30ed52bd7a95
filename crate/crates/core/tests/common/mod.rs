//! Shared oracles for the integration and acceptance targets.
#![allow(dead_code)]

use fisher_prune::mnist::Dataset;
use fisher_prune::pruning::SignalAccumulator;
use fisher_prune::trainer::{evaluate, train, Objective, OptimizerConfig, TrainConfig};
use fisher_prune::{FeatureId, LayerSpec, MaskableModel, Result, Tape, Tensor, ValueId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REL_TOL: f64 = 1e-3;
const STEP: f64 = 1e-5;
/// Finite-difference coordinates probed per differentiable input.
const MAX_COORDS: usize = 24;
const MAX_REDRAWS: usize = 1000;

pub type Graph = Box<dyn Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>>;

/// One randomized gradient check: inputs, which of them to differentiate,
/// and a graph from those inputs to a scalar.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub differentiate: Vec<bool>,
    pub graph: Graph,
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub op: &'static str,
    pub cases: usize,
    pub coords: usize,
    pub worst_rel: f64,
    /// Cases redrawn because a probe straddled a ReLU/max-pool kink.
    pub redraws: usize,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.worst_rel < REL_TOL
    }
}

fn eval(case: &Case, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let root = (case.graph)(&mut tape, &ids).expect("graph builds");
    tape.loss_value(root).unwrap_or_else(|| tape.value(root).data()[0])
}

/// Worst relative error over probed coordinates, or `None` when a probe sits
/// on a kink (one-sided slopes disagree).
fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Option<(f64, usize)> {
    let mut tape = Tape::<f64>::new();
    let ids: Vec<ValueId> = case
        .inputs
        .iter()
        .zip(&case.differentiate)
        .map(|(t, &d)| if d { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let root = (case.graph)(&mut tape, &ids).expect("graph builds");
    tape.backward(root).expect("backward");
    let f0 = eval(case, &case.inputs);
    let (mut worst, mut coords) = (0.0f64, 0usize);
    for (i, (&id, &d)) in ids.iter().zip(&case.differentiate).enumerate() {
        if !d {
            continue;
        }
        let analytic = tape.grad(id).expect("gradient recorded");
        let len = case.inputs[i].len();
        let probes: Vec<usize> = if len <= MAX_COORDS {
            (0..len).collect()
        } else {
            (0..MAX_COORDS).map(|_| rng.gen_range(0..len)).collect()
        };
        for j in probes {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let (fp, fm) = (eval(case, &plus), eval(case, &minus));
            let (left, right) = ((f0 - fm) / STEP, (fp - f0) / STEP);
            let numeric = (fp - fm) / (2.0 * STEP);
            if (left - right).abs() > 1e-4 * numeric.abs().max(1.0) {
                return None;
            }
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            coords += 1;
        }
    }
    Some((worst, coords))
}

/// Runs `cases` kink-free random cases drawn by `draw`.
pub fn run_oracle(op: &'static str, cases: usize, seed: u64, draw: impl Fn(&mut ChaCha8Rng) -> Case) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport { op, cases: 0, coords: 0, worst_rel: 0.0, redraws: 0 };
    while report.cases < cases {
        let case = draw(&mut rng);
        match check_case(&case, &mut rng) {
            Some((w, c)) => {
                report.cases += 1;
                report.coords += c;
                report.worst_rel = report.worst_rel.max(w);
            }
            None => {
                report.redraws += 1;
                assert!(report.redraws < MAX_REDRAWS, "{op}: too many kinked cases");
            }
        }
    }
    report
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Reduces a tensor-valued op to a scalar with fixed random weights.
fn project(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn projected(
    op: impl Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId> + 'static,
    weights: Vec<f64>,
) -> Graph {
    Box::new(move |tape, ids| {
        let y = op(tape, ids)?;
        tape.weighted_sum(y, weights.clone())
    })
}

fn conv_out(h: usize, k: usize, s: usize, p: usize) -> usize {
    (h + 2 * p - k) / s + 1
}

pub fn conv2d_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let (k, s, p) = (rng.gen_range(1..=3), rng.gen_range(1..=2), rng.gen_range(0..=2));
    let (h, w) = (rng.gen_range(k..=k + 4), rng.gen_range(k..=k + 4));
    let out = n * co * conv_out(h, k, s, p) * conv_out(w, k, s, p);
    Case {
        inputs: vec![
            random_tensor(rng, &[n, ci, h, w], 1.0),
            random_tensor(rng, &[co, ci, k, k], 1.0),
            random_tensor(rng, &[co], 1.0),
        ],
        differentiate: vec![true, true, true],
        graph: projected(move |t, x| t.conv2d(x[0], x[1], x[2], s, p), project(rng, out)),
    }
}

pub fn maxpool_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let (h, w) = (2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3));
    let out = n * c * (h / 2) * (w / 2);
    Case {
        inputs: vec![random_tensor(rng, &[n, c, h, w], 1.0)],
        differentiate: vec![true],
        graph: projected(|t, x| t.maxpool2(x[0]), project(rng, out)),
    }
}

pub fn relu_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
    let len = shape.iter().product();
    Case {
        inputs: vec![random_tensor(rng, &shape, 1.0)],
        differentiate: vec![true],
        graph: projected(|t, x| Ok(t.relu(x[0])), project(rng, len)),
    }
}

pub fn linear_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, i, o) = (rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=5));
    Case {
        inputs: vec![random_tensor(rng, &[n, i], 1.0), random_tensor(rng, &[o, i], 1.0), random_tensor(rng, &[o], 1.0)],
        differentiate: vec![true, true, true],
        graph: projected(|t, x| t.linear(x[0], x[1], x[2]), project(rng, n * o)),
    }
}

pub fn mask_scale_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, k) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
    let shape: Vec<usize> = if rng.gen_bool(0.5) { vec![n, k, rng.gen_range(1..=3), rng.gen_range(1..=3)] } else { vec![n, k] };
    let len = shape.iter().product();
    Case {
        inputs: vec![random_tensor(rng, &shape, 1.0), random_tensor(rng, &[k], 1.5)],
        differentiate: vec![true, true],
        graph: projected(|t, x| t.mask_scale(x[0], x[1]), project(rng, len)),
    }
}

pub fn reshape_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = [rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3)];
    let len = shape.iter().product();
    Case {
        inputs: vec![random_tensor(rng, &shape, 1.0)],
        differentiate: vec![true],
        graph: projected(|t, x| t.flatten(x[0]), project(rng, len)),
    }
}

pub fn cross_entropy_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, z) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..z)).collect();
    Case {
        inputs: vec![random_tensor(rng, &[n, z], 3.0)],
        differentiate: vec![true],
        graph: Box::new(move |t, x| t.softmax_cross_entropy(x[0], &labels)),
    }
}

pub fn soft_target_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, z) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
    let targets: Vec<f64> = (0..n * z).map(|_| rng.gen_range(0.0..1.0)).collect();
    Case {
        inputs: vec![random_tensor(rng, &[n, z], 3.0)],
        differentiate: vec![true],
        graph: Box::new(move |t, x| t.cross_entropy_with_targets(x[0], targets.clone())),
    }
}

pub fn weighted_sum_case(rng: &mut ChaCha8Rng) -> Case {
    let len = rng.gen_range(1..=12);
    Case {
        inputs: vec![random_tensor(rng, &[len], 2.0)],
        differentiate: vec![true],
        graph: projected(|_, x| Ok(x[0]), project(rng, len)),
    }
}

/// Small masked conv net ending in cross-entropy; the masks are real-valued
/// leaves so their gradients are checked as scalar perturbations of `m_k`.
pub fn masked_network_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.gen_range(1..=3);
    let (c1, c2, hidden) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(2..=5));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let mask = |rng: &mut ChaCha8Rng, k: usize| {
        Tensor::new(&[k], (0..k).map(|_| if rng.gen_bool(0.8) { 1.0 } else { rng.gen_range(0.0..1.0) }).collect()).unwrap()
    };
    Case {
        inputs: vec![
            random_tensor(rng, &[n, 1, 6, 6], 1.0),
            random_tensor(rng, &[c1, 1, 3, 3], 0.8),
            random_tensor(rng, &[c1], 0.3),
            mask(rng, c1),
            random_tensor(rng, &[c2, c1, 2, 2], 0.8),
            random_tensor(rng, &[c2], 0.3),
            mask(rng, c2),
            random_tensor(rng, &[hidden, c2], 0.8),
            random_tensor(rng, &[hidden], 0.3),
            mask(rng, hidden),
            random_tensor(rng, &[3, hidden], 0.8),
            random_tensor(rng, &[3], 0.3),
        ],
        differentiate: vec![false, true, true, true, true, true, true, true, true, true, true, true],
        graph: Box::new(move |t, x| {
            let h = t.conv2d(x[0], x[1], x[2], 1, 0)?; // 4x4
            let h = t.relu(h);
            let h = t.mask_scale(h, x[3])?;
            let h = t.maxpool2(h)?; // 2x2
            let h = t.conv2d(h, x[4], x[5], 1, 0)?; // 1x1
            let h = t.relu(h);
            let h = t.mask_scale(h, x[6])?;
            let h = t.flatten(h)?;
            let h = t.linear(h, x[7], x[8])?;
            let h = t.relu(h);
            let h = t.mask_scale(h, x[9])?;
            let h = t.linear(h, x[10], x[11])?;
            t.softmax_cross_entropy(h, &labels)
        }),
    }
}

pub fn all_oracles(cases: usize) -> Vec<OracleReport> {
    vec![
        run_oracle("conv2d", cases, 1, conv2d_case),
        run_oracle("maxpool2", cases, 2, maxpool_case),
        run_oracle("relu", cases, 3, relu_case),
        run_oracle("linear", cases, 4, linear_case),
        run_oracle("mask_scale", cases, 5, mask_scale_case),
        run_oracle("flatten", cases, 6, reshape_case),
        run_oracle("softmax_cross_entropy", cases, 7, cross_entropy_case),
        run_oracle("cross_entropy_with_targets", cases, 8, soft_target_case),
        run_oracle("weighted_sum", cases, 9, weighted_sum_case),
        run_oracle("masked network (mask gradients)", cases, 10, masked_network_case),
    ]
}

/// Largest gap between the summed per-sample mask gradients and the batch
/// mask gradient.
pub fn per_sample_mask_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = masked_network_case(&mut rng);
    let run = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = (case.graph)(&mut tape, &ids).unwrap();
        tape.backward(root).unwrap();
        (tape.mask_grad_per_sample(ids[9]).unwrap().clone(), tape.grad(ids[9]).unwrap())
    };
    let (per_sample, total) = run(&case.inputs);
    let (n, k) = (per_sample.shape()[0], per_sample.shape()[1]);
    let mut gap = 0.0f64;
    for j in 0..k {
        let s: f64 = (0..n).map(|i| per_sample.data()[i * k + j]).sum();
        gap = gap.max((s - total.data()[j]).abs());
    }
    gap
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &t in &idx[i..=j] {
                r[t] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Gaussian blobs in 16 dimensions (shaped `[1, 4, 4]`) labelled by a random
/// teacher, with some label noise so the optimum is not degenerate.
pub fn toy_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 4;
    let centers: Vec<Vec<f32>> = (0..classes).map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut data = Vec::with_capacity(n * 16);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.gen_range(0..classes);
        data.extend(centers[c].iter().map(|&m| m + rng.gen_range(-0.9f32..0.9)));
        labels.push(if rng.gen_bool(0.05) { rng.gen_range(0..classes) } else { c });
    }
    Dataset { images: Tensor::new(&[n, 1, 4, 4], data).unwrap(), labels, tag: "toy".into() }
}

pub struct ToyOracle {
    pub features: usize,
    pub train_error: f64,
    pub fisher: Vec<f64>,
    pub truth: Vec<f64>,
    pub rho: f64,
}

/// Trains a 16-24-4 MLP to convergence, then compares the Fisher estimate of
/// each hidden unit's removal cost with the measured full-data loss increase.
pub fn toy_fisher_oracle(seed: u64) -> ToyOracle {
    let data = toy_data(2000, seed);
    let layers = vec![
        LayerSpec::Flatten,
        LayerSpec::Linear { in_features: 16, out_features: 24 },
        LayerSpec::Relu,
        LayerSpec::Linear { in_features: 24, out_features: 4 },
    ];
    let model = MaskableModel::<f32>::new([1, 4, 4], layers, seed).unwrap();
    let cfg = TrainConfig {
        batch_size: 100,
        eval_every: 100,
        patience: 10,
        max_steps: 6000,
        eval_batch: 2000,
        seed,
        optimizer: OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::adam(0.01) },
    };
    // converge on the training set itself: the oracle is about the loss on
    // the data the signal is measured on
    let model = train(&model, &data, &data, &cfg, &Objective::CrossEntropy).unwrap().model;
    let base = evaluate(&model, &data, 2000).unwrap();

    let mut acc = SignalAccumulator::new(&model);
    for (x, labels) in data.sequential(100) {
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let pass = model.forward(&mut tape, xi).unwrap();
        let loss = tape.softmax_cross_entropy(pass.logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        acc.accumulate(&tape, &pass).unwrap();
    }
    let features = model.features();
    let mut fisher = Vec::new();
    let mut truth = Vec::new();
    for &f in &features {
        fisher.push(acc.fisher_delta(f).unwrap());
        let mut m = model.clone();
        m.set_mask(FeatureId::new(f.layer, f.index), false).unwrap();
        truth.push(evaluate(&m, &data, 2000).unwrap().loss - base.loss);
    }
    let rho = spearman(&fisher, &truth);
    ToyOracle { features: features.len(), train_error: base.error, fisher, truth, rho }
}
