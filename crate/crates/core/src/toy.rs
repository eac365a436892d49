//! Desk-scale experiments: a classification task whose classes share every
//! per-channel minimum and maximum, a quantile regression task, a training
//! loop with a linear head, and a module-level latency benchmark.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{descriptor_backward, Algorithm, OptimizerState};
use crate::cells::CellSlots;
use crate::descriptor::{Activation, AggregationWeights, Descriptor, DescriptorKind, Mlp};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::pointcloud::equal_extremes_unit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyTask {
    /// Two classes with identical per-channel extremes; class 0 interior
    /// points are uniform, class 1 interior points sit near both ends.
    EqualExtremes,
    /// Regress the upper quartile of channel 0 of each cell.
    QuantileRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub task: ToyTask,
    pub cells_per_class: usize,
    /// Points per cell (N); cells are full.
    pub capacity: usize,
    pub channels: usize,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            task: ToyTask::EqualExtremes,
            cells_per_class: 500,
            capacity: 32,
            channels: 4,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cells_per_class < 2 {
            return Err(Error::InvalidSpec("need at least two cells per class".into()));
        }
        if self.task == ToyTask::EqualExtremes && self.capacity < 3 {
            return Err(Error::InvalidSpec("equal-extremes cells need N >= 3".into()));
        }
        if self.capacity == 0 || self.channels == 0 {
            return Err(Error::InvalidSpec(
                "capacity and channels must be positive".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidSpec("train fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        match self.task {
            ToyTask::EqualExtremes => 2,
            ToyTask::QuantileRegression => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCells {
    pub cells: CellSlots,
    /// Class index (as `f64`) or regression target.
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub spec: ToyTaskSpec,
    pub train: LabeledCells,
    pub val: LabeledCells,
}

/// Row index of the upper quartile in a sorted full cell of `n` points.
pub fn upper_quartile_row(n: usize) -> usize {
    (3 * (n - 1)) / 4
}

fn equal_extremes_cell<R: Rng>(rng: &mut R, class: u32, n: usize, c: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    rows.push(vec![0.0; c]);
    rows.push(vec![1.0; c]);
    for _ in 2..n {
        rows.push((0..c).map(|_| equal_extremes_unit(rng, class)).collect());
    }
    rows.shuffle(rng);
    rows.concat()
}

pub fn build_toy_dataset(spec: &ToyTaskSpec) -> Result<ToyDataset> {
    spec.validate()?;
    let (n, c) = (spec.capacity, spec.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = match spec.task {
        ToyTask::EqualExtremes => 2,
        ToyTask::QuantileRegression => 1,
    };
    let mut train = (Vec::new(), Vec::new());
    let mut val = (Vec::new(), Vec::new());
    let n_train = ((spec.cells_per_class as f64 * spec.train_fraction).round() as usize)
        .clamp(1, spec.cells_per_class - 1);
    for class in 0..classes {
        let mut cells: Vec<(Vec<f64>, f64)> = (0..spec.cells_per_class)
            .map(|_| match spec.task {
                ToyTask::EqualExtremes => (equal_extremes_cell(&mut rng, class as u32, n, c), class as f64),
                ToyTask::QuantileRegression => {
                    let pts: Vec<f64> = (0..n * c).map(|_| rng.random::<f64>()).collect();
                    let mut ch0: Vec<f64> = pts.iter().step_by(c).copied().collect();
                    ch0.sort_by(f64::total_cmp);
                    let target = ch0[upper_quartile_row(n)];
                    (pts, target)
                }
            })
            .collect();
        cells.shuffle(&mut rng);
        for (i, (pts, label)) in cells.into_iter().enumerate() {
            let dst = if i < n_train { &mut train } else { &mut val };
            dst.0.push(pts);
            dst.1.push(label);
        }
    }
    // Interleave classes so minibatches and evaluation see both.
    let mix = |rng: &mut ChaCha8Rng, (cells, labels): (Vec<Vec<f64>>, Vec<f64>)| -> Result<LabeledCells> {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(rng);
        let cells: Vec<Vec<f64>> = order.iter().map(|&i| cells[i].clone()).collect();
        Ok(LabeledCells {
            cells: CellSlots::from_cells(n, c, &cells)?,
            labels: order.iter().map(|&i| labels[i]).collect(),
        })
    };
    let train = mix(&mut rng, train)?;
    let val = mix(&mut rng, val)?;
    Ok(ToyDataset {
        spec: spec.clone(),
        train,
        val,
    })
}

/// Linear map from cell features to logits (or a regression output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `inputs × outputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn random<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs)
                .map(|_| rng.random_range(-0.1..0.1))
                .collect(),
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, features: &[f64]) -> Vec<f64> {
        let k = features.len() / self.inputs;
        let mut out = Vec::with_capacity(k * self.outputs);
        for row in features.chunks_exact(self.inputs) {
            for j in 0..self.outputs {
                let mut s = self.bias[j];
                for (i, x) in row.iter().enumerate() {
                    s += x * self.weight[i * self.outputs + j];
                }
                out.push(s);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: DescriptorKind,
    /// MLP widths after the input; empty means the identity embedding.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_last_activation")]
    pub last_activation: Activation,
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Keep `w` at its initial value.
    #[serde(default)]
    pub freeze_w: bool,
    /// Uniform noise added to the `[0, …, 0, 1]` initialisation of `w`.
    #[serde(default)]
    pub w_noise: f64,
}

fn default_last_activation() -> Activation {
    Activation::Relu
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: DescriptorKind::Weighted,
            hidden: Vec::new(),
            last_activation: Activation::Relu,
            algorithm: Algorithm::Adam,
            learning_rate: 0.05,
            steps: 2000,
            batch_size: 64,
            eval_every: 100,
            seed: 0,
            freeze_w: false,
            w_noise: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidSpec(
                "steps, batch size and eval cadence must be >= 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidSpec("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub kind: DescriptorKind,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub kind: DescriptorKind,
    /// Minibatch loss before each optimizer step.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    pub final_accuracy: Option<f64>,
    pub final_mse: Option<f64>,
    pub wall_clock_s: f64,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub step: usize,
    pub descriptor: Descriptor,
    pub head: LinearHead,
    pub optimizer: OptimizerState,
    pub losses: Vec<f64>,
    pub evals: Vec<EvalRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Metrics,
    pub checkpoint: TrainCheckpoint,
}

/// Fresh model for a config: descriptor with `w` at `[0, …, 0, 1]` (plus
/// optional noise) and a small random head.
pub fn init_model(spec: &ToyTaskSpec, config: &TrainConfig) -> Result<(Descriptor, LinearHead)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mlp = if config.hidden.is_empty() {
        Mlp::identity()
    } else {
        let mut dims = vec![spec.channels];
        dims.extend_from_slice(&config.hidden);
        Mlp::random(&dims, config.last_activation, rng.random())?
    };
    let co = mlp.output_channels(spec.channels);
    let w = AggregationWeights::unit_last_noisy(spec.capacity, config.w_noise, rng.random());
    let head = LinearHead::random(co, spec.classes(), &mut rng);
    Ok((Descriptor::new(mlp, w)?, head))
}

/// Softmax cross-entropy (classification) or half squared error (regression),
/// averaged over cells. Returns the loss and `dL/d-outputs`.
fn head_loss(outputs: &[f64], labels: &[f64], classes: usize) -> (f64, Vec<f64>) {
    let k = labels.len() as f64;
    let mut grad = vec![0.0; outputs.len()];
    let mut loss = 0.0;
    if classes == 1 {
        for (i, (&o, &t)) in outputs.iter().zip(labels).enumerate() {
            let d = o - t;
            loss += 0.5 * d * d;
            grad[i] = d / k;
        }
    } else {
        for (i, (row, &y)) in outputs.chunks_exact(classes).zip(labels).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let y = y as usize;
            loss += z.ln() + m - row[y];
            for (j, v) in row.iter().enumerate() {
                let p = (v - m).exp() / z;
                grad[i * classes + j] = (p - if j == y { 1.0 } else { 0.0 }) / k;
            }
        }
    }
    (loss / k, grad)
}

fn evaluate(
    d: &Descriptor,
    head: &LinearHead,
    data: &LabeledCells,
    kind: DescriptorKind,
) -> Result<(f64, f64)> {
    let f = d.forward_exec(&data.cells, kind, Execution::Sequential)?;
    let out = head.forward(&f);
    let classes = head.outputs;
    let (loss, _) = head_loss(&out, &data.labels, classes);
    let metric = if classes == 1 {
        out.iter()
            .zip(&data.labels)
            .map(|(o, t)| (o - t) * (o - t))
            .sum::<f64>()
            / data.labels.len() as f64
    } else {
        let correct = out
            .chunks_exact(classes)
            .zip(&data.labels)
            .filter(|(row, &y)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
                best == y as usize
            })
            .count();
        correct as f64 / data.labels.len() as f64
    };
    Ok((loss, metric))
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Trains descriptor and head end-to-end, optionally resuming from a
/// checkpoint. Training runs on one thread and is bitwise reproducible.
pub fn train_descriptor(
    data: &ToyDataset,
    config: &TrainConfig,
    resume: Option<TrainCheckpoint>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let kind = config.kind;
    let classes = data.spec.classes();
    let mut ck = match resume {
        Some(ck) => ck,
        None => {
            let (descriptor, head) = init_model(&data.spec, config)?;
            TrainCheckpoint {
                step: 0,
                descriptor,
                head,
                optimizer: OptimizerState::new(config.algorithm, config.learning_rate),
                losses: Vec::new(),
                evals: Vec::new(),
            }
        }
    };
    let train_len = data.train.labels.len();
    let bs = config.batch_size.min(train_len);
    let update_w = kind == DescriptorKind::Weighted && !config.freeze_w;

    while ck.step < config.steps {
        let mut rng = step_rng(config.seed, ck.step);
        let idx = rand::seq::index::sample(&mut rng, train_len, bs).into_vec();
        let cells = data.train.cells.select(&idx);
        let labels: Vec<f64> = idx.iter().map(|&i| data.train.labels[i]).collect();

        let cache = ck
            .descriptor
            .forward_cached(&cells, kind, Execution::Sequential)?;
        let out = ck.head.forward(&cache.features);
        let (loss, dout) = head_loss(&out, &labels, classes);
        if !loss.is_finite() {
            return Err(Error::Diverged { step: ck.step, loss });
        }
        ck.losses.push(loss);

        let (hi, ho) = (ck.head.inputs, ck.head.outputs);
        let mut dhw = vec![0.0; hi * ho];
        let mut dhb = vec![0.0; ho];
        let mut up = vec![0.0; cache.features.len()];
        for (r, (frow, grow)) in cache
            .features
            .chunks_exact(hi)
            .zip(dout.chunks_exact(ho))
            .enumerate()
        {
            for (j, &g) in grow.iter().enumerate() {
                dhb[j] += g;
                for (i, &x) in frow.iter().enumerate() {
                    dhw[i * ho + j] += x * g;
                    up[r * hi + i] += g * ck.head.weight[i * ho + j];
                }
            }
        }
        let (grads, _) = descriptor_backward(&ck.descriptor, &cache, &up, false, Execution::Sequential)?;

        let mut gsl: Vec<Option<&[f64]>> = grads.groups().into_iter().map(Some).collect();
        if !update_w {
            *gsl.last_mut().expect("w group") = None;
        }
        gsl.push(Some(&dhw));
        gsl.push(Some(&dhb));
        let mut params = ck.descriptor.param_groups_mut();
        params.push(&mut ck.head.weight);
        params.push(&mut ck.head.bias);
        ck.optimizer.step(&mut params, &gsl)?;
        ck.step += 1;

        if ck.step % config.eval_every == 0 {
            let (_, metric) = evaluate(&ck.descriptor, &ck.head, &data.val, kind)?;
            ck.evals.push(EvalRecord {
                step: ck.step,
                kind,
                train_loss: loss,
                val_accuracy: (classes > 1).then_some(metric),
                val_mse: (classes == 1).then_some(metric),
            });
        }
    }
    let (_, metric) = evaluate(&ck.descriptor, &ck.head, &data.val, kind)?;
    // An off-cadence closing record goes to this run's metrics only, so a
    // checkpoint does not depend on where the run that wrote it stopped.
    let mut evals = ck.evals.clone();
    if ck.step % config.eval_every != 0 {
        if let Some(&loss) = ck.losses.last() {
            evals.push(EvalRecord {
                step: ck.step,
                kind,
                train_loss: loss,
                val_accuracy: (classes > 1).then_some(metric),
                val_mse: (classes == 1).then_some(metric),
            });
        }
    }
    let metrics = Metrics {
        kind,
        losses: ck.losses.clone(),
        evals,
        final_accuracy: (classes > 1).then_some(metric),
        final_mse: (classes == 1).then_some(metric),
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        metrics,
        checkpoint: ck,
    })
}

/// Validation accuracy of a classifier trained on identity-embedded max-pool
/// features; the features are constant on the equal-extremes task.
pub fn max_pool_baseline(data: &ToyDataset, config: &TrainConfig) -> Result<Metrics> {
    let cfg = TrainConfig {
        kind: DescriptorKind::Max,
        hidden: Vec::new(),
        ..config.clone()
    };
    Ok(train_descriptor(data, &cfg, None)?.metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub kinds: Vec<DescriptorKind>,
    pub capacity: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub cells: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Capacities for the aggregation-stage scaling sweep.
    pub sweep: Vec<usize>,
    /// Points per sweep batch (`cells × N` is held constant). Small enough
    /// to stay in cache, so the sweep measures compute rather than memory.
    pub sweep_points: usize,
    /// Batch passes per timed sweep sample.
    pub sweep_inner: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            kinds: DescriptorKind::ALL.to_vec(),
            capacity: 32,
            in_channels: 9,
            out_channels: 64,
            cells: 10_000,
            repetitions: 10,
            warmup: 2,
            sweep: vec![8, 32, 128, 256],
            sweep_points: 2048,
            sweep_inner: 100,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ms: f64,
    pub p90_ms: f64,
    pub samples: usize,
}

impl Timing {
    fn from_samples(mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let median = if n % 2 == 1 {
            ms[n / 2]
        } else {
            0.5 * (ms[n / 2 - 1] + ms[n / 2])
        };
        let p90 = ms[((0.9 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Self {
            median_ms: median,
            p90_ms: p90,
            samples: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindTiming {
    pub kind: DescriptorKind,
    pub full: Timing,
    pub aggregation: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub capacity: usize,
    pub cells: usize,
    pub weighted_ms: f64,
    pub max_ms: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub kinds: Vec<KindTiming>,
    /// Weighted over max, full forward (MLP + aggregation), medians.
    pub full_overhead_ratio: Option<f64>,
    /// Weighted over max, aggregation stage only, medians.
    pub aggregation_overhead_ratio: Option<f64>,
    pub sweep: Vec<SweepPoint>,
    pub sweep_ratio_monotone: bool,
    /// Every repetition produced bitwise-identical outputs.
    pub outputs_stable: bool,
}

fn bench_batch(seed: u64, cells: usize, capacity: usize, channels: usize) -> Result<CellSlots> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..cells * capacity * channels)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    CellSlots::new(capacity, channels, data, vec![capacity; cells])
}

type Job<'a> = Box<dyn FnMut() -> Result<Vec<f64>> + 'a>;

/// Times every job once per repetition, interleaved, so slow periods on a
/// shared machine hit all jobs alike. Also reports whether each job returned
/// bitwise-identical output on every repetition.
fn time_interleaved(warmup: usize, reps: usize, jobs: &mut [Job<'_>]) -> Result<(Vec<Timing>, bool)> {
    for _ in 0..warmup {
        for job in jobs.iter_mut() {
            std::hint::black_box(job()?);
        }
    }
    let mut samples = vec![Vec::with_capacity(reps); jobs.len()];
    let mut first: Vec<Option<Vec<f64>>> = vec![None; jobs.len()];
    let mut stable = true;
    for _ in 0..reps {
        for (j, job) in jobs.iter_mut().enumerate() {
            let t = Instant::now();
            let out = std::hint::black_box(job()?);
            samples[j].push(t.elapsed().as_secs_f64() * 1e3);
            match &first[j] {
                None => first[j] = Some(out),
                Some(prev) => stable &= prev.iter().zip(&out).all(|(a, b)| a.to_bits() == b.to_bits()),
            }
        }
    }
    Ok((samples.into_iter().map(Timing::from_samples).collect(), stable))
}

/// Times full-descriptor forward and the aggregation stage per kind, then
/// sweeps N for the aggregation stage of weighted vs max.
pub fn bench_descriptor(config: &BenchConfig) -> Result<BenchReport> {
    if config.repetitions == 0 || config.cells == 0 || config.capacity == 0 {
        return Err(Error::InvalidSpec(
            "benchmark needs cells, capacity and repetitions".into(),
        ));
    }
    par::with_threads(config.threads.max(1), || run_bench(config))
}

fn run_bench(config: &BenchConfig) -> Result<BenchReport> {
    let exec = Execution::default();
    let batch = bench_batch(config.seed, config.cells, config.capacity, config.in_channels)?;
    let d = Descriptor::new(
        Mlp::random(
            &[config.in_channels, config.out_channels],
            Activation::Relu,
            config.seed,
        )?,
        AggregationWeights::unit_last_noisy(config.capacity, 0.1, config.seed),
    )?;
    let embedded = d.embed_batch(&batch, exec)?;
    let mut jobs: Vec<Job<'_>> = Vec::new();
    for &kind in &config.kinds {
        let (d, batch, embedded) = (&d, &batch, &embedded);
        jobs.push(Box::new(move || d.forward_exec(batch, kind, exec)));
        jobs.push(Box::new(move || d.aggregate_batch(embedded, kind, exec)));
    }
    let (timings, mut stable) = time_interleaved(config.warmup, config.repetitions, &mut jobs)?;
    drop(jobs);
    let kinds: Vec<KindTiming> = config
        .kinds
        .iter()
        .zip(timings.chunks_exact(2))
        .map(|(&kind, t)| KindTiming {
            kind,
            full: t[0].clone(),
            aggregation: t[1].clone(),
        })
        .collect();
    let find = |k: DescriptorKind| kinds.iter().find(|t| t.kind == k);
    let (full_overhead_ratio, aggregation_overhead_ratio) =
        match (find(DescriptorKind::Weighted), find(DescriptorKind::Max)) {
            (Some(w), Some(m)) => (
                Some(w.full.median_ms / m.full.median_ms),
                Some(w.aggregation.median_ms / m.aggregation.median_ms),
            ),
            _ => (None, None),
        };

    let mut sweep = Vec::new();
    for &n in &config.sweep {
        let cells = (config.sweep_points / n).max(1);
        let emb = bench_batch(config.seed ^ n as u64, cells, n, config.out_channels)?;
        let dn = Descriptor::new(
            Mlp::identity(),
            AggregationWeights::unit_last_noisy(n, 0.1, config.seed),
        )?;
        let inner = config.sweep_inner.max(1);
        let repeat = |kind| {
            let (dn, emb) = (&dn, &emb);
            move || {
                for _ in 1..inner {
                    std::hint::black_box(dn.aggregate_batch(emb, kind, exec)?);
                }
                dn.aggregate_batch(emb, kind, exec)
            }
        };
        let mut jobs: Vec<Job<'_>> = vec![
            Box::new(repeat(DescriptorKind::Weighted)),
            Box::new(repeat(DescriptorKind::Max)),
        ];
        let (t, s) = time_interleaved(config.warmup, config.repetitions, &mut jobs)?;
        drop(jobs);
        stable &= s;
        let (w, m) = (&t[0], &t[1]);
        sweep.push(SweepPoint {
            capacity: n,
            cells,
            weighted_ms: w.median_ms,
            max_ms: m.median_ms,
            ratio: w.median_ms / m.median_ms,
        });
    }
    let sweep_ratio_monotone = sweep.windows(2).all(|p| p[1].ratio > p[0].ratio);
    Ok(BenchReport {
        config: config.clone(),
        kinds,
        full_overhead_ratio,
        aggregation_overhead_ratio,
        sweep,
        sweep_ratio_monotone,
        outputs_stable: stable,
    })
}
