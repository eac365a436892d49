//! Property suites over random descriptors and cells.
//!
//! Each suite samples its own cases from the configured seed and reports
//! how many failed. `scramble_sort` sets the descriptor fault hook so the
//! suites can be shown to catch a broken sort.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{finite_difference_check, sample_tie_free_case, FdOptions};
use crate::cells::CellSlots;
use crate::descriptor::{
    aggregate_mean, aggregate_weighted, sort_project, Activation, AggregationWeights, Descriptor,
    DescriptorKind, Mlp,
};
use crate::error::Result;
use crate::par::Execution;

/// Cells per sampled descriptor.
const GROUP: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Random cells per cell-level suite.
    pub cells: usize,
    /// Shuffles per cell for the invariance suite.
    pub shuffles: usize,
    /// Random instances for the gradient suite.
    pub grad_configs: usize,
    pub fd: FdOptions,
    #[serde(skip)]
    pub scramble_sort: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cells: 1000,
            shuffles: 20,
            grad_configs: 100,
            fd: FdOptions::default(),
            scramble_sort: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub pass: bool,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_relative_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
    pub pass: bool,
}

struct Tally {
    name: &'static str,
    start: Instant,
    cases: usize,
    failures: usize,
    first: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            start: Instant::now(),
            cases: 0,
            failures: 0,
            first: None,
        }
    }

    fn record(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            if self.first.is_none() {
                self.first = Some(what());
            }
        }
    }

    fn finish(self, max_relative_error: Option<f64>) -> SuiteReport {
        SuiteReport {
            name: self.name.into(),
            cases: self.cases,
            failures: self.failures,
            pass: self.failures == 0 && self.cases > 0,
            seconds: self.start.elapsed().as_secs_f64(),
            max_relative_error,
            first_failure: self.first,
        }
    }
}

/// Shape of a sampled group of cells.
#[derive(Clone, Copy)]
struct GroupShape {
    capacity: usize,
    last: Activation,
    full: bool,
}

/// Random MLP (depth 1–2, output width 1–64) and `GROUP` cells. A quarter of
/// the groups draw values on a coarse lattice so ties are common.
fn sample_group(
    rng: &mut ChaCha8Rng,
    shape: GroupShape,
    aggregation: Option<AggregationWeights>,
) -> Result<(Descriptor, CellSlots)> {
    let cin = rng.random_range(1..=8);
    let cout = rng.random_range(1..=64);
    let mut dims = vec![cin];
    if rng.random::<bool>() {
        dims.push(rng.random_range(2..=16));
    }
    dims.push(cout);
    let mlp = Mlp::random(&dims, shape.last, rng.random())?;
    let n = shape.capacity;
    let aggregation = match aggregation {
        Some(a) => a,
        None if rng.random_range(0..4) == 0 => AggregationWeights::PerChannel {
            capacity: n,
            channels: cout,
            w: (0..n * cout).map(|_| rng.random_range(-1.0..1.0)).collect(),
        },
        None => AggregationWeights::Shared {
            w: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        },
    };
    let lattice = rng.random_range(0..4) == 0;
    let cells: Vec<Vec<f64>> = (0..GROUP)
        .map(|_| {
            let valid = if shape.full { n } else { rng.random_range(1..=n) };
            (0..valid * cin)
                .map(|_| {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    if lattice {
                        (v * 4.0).round() / 4.0
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    Ok((
        Descriptor::new(mlp, aggregation)?,
        CellSlots::from_cells(n, cin, &cells)?,
    ))
}

fn random_last(rng: &mut ChaCha8Rng) -> Activation {
    if rng.random::<bool>() {
        Activation::Relu
    } else {
        Activation::Identity
    }
}

fn groups(cells: usize) -> usize {
    cells.div_ceil(GROUP)
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Shuffling the valid slots of a cell leaves every descriptor kind's output
/// bitwise unchanged. N alternates between 5 and 32.
pub fn permutation_invariance(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5045_524d);
    let mut tally = Tally::new("permutation_invariance");
    for g in 0..groups(cfg.cells) {
        let shape = GroupShape {
            capacity: if g % 2 == 0 { 5 } else { 32 },
            last: random_last(&mut rng),
            full: false,
        };
        let (mut d, batch) = sample_group(&mut rng, shape, None)?;
        d.scramble_sort = cfg.scramble_sort;
        let co = d.output_channels(batch.channels());
        let base: Vec<Vec<f64>> = DescriptorKind::ALL
            .iter()
            .map(|&k| d.forward(&batch, k))
            .collect::<Result<_>>()?;
        let mut ok = vec![true; batch.len()];
        for _ in 0..cfg.shuffles {
            let mut shuffled = batch.clone();
            for (k, &n) in batch.valid_counts().iter().enumerate() {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                shuffled.permute_cell(k, &order);
            }
            for (kind, want) in DescriptorKind::ALL.iter().zip(&base) {
                let got = d.forward(&shuffled, *kind)?;
                for (k, flag) in ok.iter_mut().enumerate() {
                    *flag &= same_bits(&got[k * co..(k + 1) * co], &want[k * co..(k + 1) * co]);
                }
            }
        }
        for (k, &flag) in ok.iter().enumerate() {
            tally.record(flag, || {
                format!("group {g} cell {k}: output changed under shuffling")
            });
        }
    }
    Ok(tally.finish(None))
}

/// `w = [0, …, 0, 1]` reproduces max pooling bit for bit: on partial cells
/// with a final ReLU, and on full cells with an identity final layer.
pub fn special_case(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5350_4543);
    let mut tally = Tally::new("special_case");
    for g in 0..groups(cfg.cells) {
        let relu = g % 2 == 0;
        let shape = GroupShape {
            capacity: [5, 32][(g / 2) % 2],
            last: if relu {
                Activation::Relu
            } else {
                Activation::Identity
            },
            full: !relu,
        };
        let unit = AggregationWeights::unit_last(shape.capacity);
        let (mut d, batch) = sample_group(&mut rng, shape, Some(unit))?;
        d.scramble_sort = cfg.scramble_sort;
        let co = d.output_channels(batch.channels());
        let w = d.forward(&batch, DescriptorKind::Weighted)?;
        let m = d.forward(&batch, DescriptorKind::Max)?;
        for k in 0..batch.len() {
            let ok = same_bits(&w[k * co..(k + 1) * co], &m[k * co..(k + 1) * co]);
            tally.record(ok, || {
                format!(
                    "group {g} cell {k} (n = {}): weighted differs from max",
                    batch.valid_count(k)
                )
            });
        }
    }
    Ok(tally.finish(None))
}

/// The cached sorted matrices: padding rows zero, columns non-decreasing,
/// per-channel multisets and permutations preserved. Also checks that the
/// inference path (sorting networks) agrees with the cached one.
pub fn sorted_contract(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x534f_5254);
    let mut tally = Tally::new("sorted_contract");
    for g in 0..groups(cfg.cells) {
        let shape = GroupShape {
            capacity: [5, 8, 32, 40][g % 4],
            last: random_last(&mut rng),
            full: false,
        };
        let (mut d, batch) = sample_group(&mut rng, shape, None)?;
        d.scramble_sort = cfg.scramble_sort;
        let cache = d.forward_cached(&batch, DescriptorKind::Weighted, Execution::default())?;
        let fast = d.forward(&batch, DescriptorKind::Weighted)?;
        let co = cache.out_channels;
        for (k, cell) in cache.cells.iter().enumerate() {
            let problem = check_sorted(cell, co, shape.capacity).or_else(|| {
                (!same_bits(&fast[k * co..(k + 1) * co], &cache.features[k * co..(k + 1) * co]))
                    .then(|| "network sort disagrees with the reference sort".to_string())
            });
            tally.record(problem.is_none(), || {
                format!("group {g} cell {k}: {}", problem.unwrap_or_default())
            });
        }
    }
    Ok(tally.finish(None))
}

fn check_sorted(cell: &crate::descriptor::CellCache, co: usize, cap: usize) -> Option<String> {
    let Some(a) = &cell.sorted else {
        return Some("no sorted matrix cached".into());
    };
    let emb = cell.embedded();
    let n = cell.valid;
    let pad = cap - n;
    for c in 0..co {
        let col = a.column(c);
        if col[..pad].iter().any(|&v| v != 0.0) {
            return Some(format!("channel {c}: padding row not zero"));
        }
        if col[pad..].windows(2).any(|p| p[1] < p[0]) {
            return Some(format!("channel {c}: column decreases"));
        }
        let mut input: Vec<f64> = (0..n).map(|i| emb[i * co + c]).collect();
        input.sort_by(f64::total_cmp);
        if input != col[pad..] {
            return Some(format!("channel {c}: multiset changed"));
        }
        let mut seen = vec![false; cap];
        for r in 0..cap {
            let s = a.source_slot(r, c);
            if s >= cap || std::mem::replace(&mut seen[s], true) {
                return Some(format!("channel {c}: permutation is not a bijection"));
            }
            if r >= pad && a.get(r, c) != emb[s * co + c] {
                return Some(format!("channel {c}: row {r} does not come from slot {s}"));
            }
        }
    }
    None
}

/// Weighted aggregation with `w = 1/n` on the bottom `n` rows equals mean
/// pooling exactly, for both the reference functions and the batch path.
pub fn mean_consistency(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4d45_414e);
    let mut tally = Tally::new("mean_consistency");
    for g in 0..groups(cfg.cells) {
        let shape = GroupShape {
            capacity: [5, 32][g % 2],
            last: random_last(&mut rng),
            full: false,
        };
        let (mut d, batch) = sample_group(&mut rng, shape, None)?;
        d.scramble_sort = cfg.scramble_sort;
        let cap = shape.capacity;
        let emb = d.embed_batch(&batch, Execution::default())?;
        let co = emb.channels();
        let means = d.aggregate_batch(&emb, DescriptorKind::Mean, Execution::default())?;
        for k in 0..emb.len() {
            let n = emb.valid_count(k);
            let w = AggregationWeights::mean_of(cap, n);
            let weighted = aggregate_weighted(&w, &sort_project(emb.cell(k), cap, co, n)?)?;
            let mean = aggregate_mean(emb.cell(k), cap, co, n)?;
            let mut dw = d.clone();
            dw.aggregation = w;
            let fast =
                dw.aggregate_batch(&emb.select(&[k]), DescriptorKind::Weighted, Execution::Sequential)?;
            let ok = same_bits(&weighted, &mean)
                && same_bits(&fast, &mean)
                && same_bits(&means[k * co..(k + 1) * co], &mean);
            tally.record(ok, || {
                format!("group {g} cell {k} (n = {n}): weighted mean differs")
            });
        }
    }
    Ok(tally.finish(None))
}

/// Analytic gradients against central differences on random tie-free
/// instances: N in 3..=8, output width in 2..=8, depth 1 or 2, every kind.
pub fn gradient_check(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4752_4144);
    let mut tally = Tally::new("gradient_check");
    let mut worst = 0.0f64;
    for i in 0..cfg.grad_configs {
        let kind = DescriptorKind::ALL[i % 3];
        let (n, cin, cout, depth) = (
            rng.random_range(3..=8),
            rng.random_range(1..=4),
            rng.random_range(2..=8),
            rng.random_range(1..=2),
        );
        let case = sample_tie_free_case(&mut rng, n, cin, cout, depth, 3, kind, cfg.fd.step, 100)?;
        let opts = FdOptions {
            seed: rng.random(),
            ..cfg.fd
        };
        let report = finite_difference_check(&case.descriptor, &case.batch, kind, &case.loss, &opts)?;
        worst = worst.max(report.max_relative_error);
        tally.record(report.pass, || {
            format!(
                "instance {i} ({}): max relative error {:.3e}",
                kind.name(),
                report.max_relative_error
            )
        });
    }
    Ok(tally.finish(Some(worst)))
}

/// Runs every suite.
pub fn run_all(cfg: &SuiteConfig) -> Result<CheckReport> {
    let suites = vec![
        permutation_invariance(cfg)?,
        special_case(cfg)?,
        sorted_contract(cfg)?,
        mean_consistency(cfg)?,
        gradient_check(cfg)?,
    ];
    Ok(CheckReport {
        seed: cfg.seed,
        pass: suites.iter().all(|s| s.pass),
        suites,
    })
}
