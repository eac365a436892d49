//! Reverse-mode gradients for [`Descriptor`], a central finite-difference
//! checker, and SGD/Adam.
//!
//! The sort is treated as a fixed permutation: the gradient of `A[i][c]` flows
//! back to the slot recorded in the forward cache. Padding rows receive no
//! gradient. Per-cell contributions are computed independently and folded in
//! cell order, so gradients are bitwise reproducible for any execution mode.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::CellSlots;
use crate::descriptor::{AggregationWeights, CellCache, Descriptor, DescriptorKind, ForwardCache};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients mirroring the descriptor's parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub aggregation: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(d: &Descriptor) -> Self {
        Self {
            layers: d
                .mlp
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            aggregation: vec![0.0; d.aggregation.values().len()],
        }
    }

    /// Same order as [`Descriptor::param_groups`].
    pub fn groups(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.aggregation);
        out
    }

    pub fn groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.aggregation);
        out
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.groups_mut().into_iter().zip(other.groups()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Lexicographic order of two rows; identical rows compare by index.
fn cmp_rows(x: &[f64], width: usize, a: usize, b: usize) -> Ordering {
    let ra = &x[a * width..(a + 1) * width];
    let rb = &x[b * width..(b + 1) * width];
    ra.iter()
        .zip(rb)
        .map(|(u, v)| u.total_cmp(v))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Gradient of the loss w.r.t. the embedded slots of one cell (`n × C_out`).
fn embedded_grad(
    kind: DescriptorKind,
    weights: &AggregationWeights,
    cell: &CellCache,
    capacity: usize,
    co: usize,
    up: &[f64],
    agg_grad: &mut [f64],
) -> Result<Vec<f64>> {
    let n = cell.valid;
    let mut de = vec![0.0; n * co];
    match kind {
        DescriptorKind::Weighted => {
            let a = cell
                .sorted
                .as_ref()
                .ok_or_else(|| Error::Cache("weighted cell without sorted matrix".into()))?;
            match weights {
                AggregationWeights::Shared { .. } => {
                    for (i, g) in agg_grad.iter_mut().enumerate() {
                        let row = &a.values[i * co..(i + 1) * co];
                        *g = row.iter().zip(up).map(|(v, u)| u * v).sum();
                    }
                }
                AggregationWeights::PerChannel { .. } => {
                    for i in 0..capacity {
                        for c in 0..co {
                            agg_grad[i * co + c] = up[c] * a.values[i * co + c];
                        }
                    }
                }
            }
            for c in 0..co {
                for i in capacity - n..capacity {
                    let slot = a.source_slot(i, c);
                    de[slot * co + c] = weights.weight(i, c) * up[c];
                }
            }
        }
        DescriptorKind::Max => {
            let arg = cell
                .argmax
                .as_ref()
                .ok_or_else(|| Error::Cache("max cell without argmax".into()))?;
            for c in 0..co {
                de[arg[c] * co + c] = up[c];
            }
        }
        DescriptorKind::Mean => {
            let inv = 1.0 / n as f64;
            for row in de.chunks_mut(co) {
                for (d, u) in row.iter_mut().zip(up) {
                    *d = inv * u;
                }
            }
        }
    }
    Ok(de)
}

fn cell_backward(
    d: &Descriptor,
    cache: &ForwardCache,
    k: usize,
    up: &[f64],
    want_input: bool,
) -> Result<(Gradients, Option<Vec<f64>>)> {
    let cell = &cache.cells[k];
    let co = cache.out_channels;
    let n = cell.valid;
    let mut grads = Gradients::zeros_like(d);
    let mut dy = embedded_grad(
        cache.kind,
        &d.aggregation,
        cell,
        cache.capacity,
        co,
        up,
        &mut grads.aggregation,
    )?;

    // Parameter gradients sum over rows in a content-defined order so that
    // permuting slots leaves them bitwise unchanged.
    let mut order: Vec<usize> = (0..n).collect();
    let input = &cell.activations[0];
    let ci = cache.in_channels;
    order.sort_unstable_by(|&a, &b| cmp_rows(input, ci, a, b));

    for (l, layer) in d.mlp.layers.iter().enumerate().rev() {
        let (li, lo) = (layer.inputs, layer.outputs);
        let pre = &cell.preacts[l];
        let x = &cell.activations[l];
        let mut dz = vec![0.0; n * lo];
        for (dzi, (&p, &g)) in dz.iter_mut().zip(pre.iter().zip(&dy)) {
            *dzi = layer.activation.gate(p, g);
        }
        let lg = &mut grads.layers[l];
        for &r in &order {
            let dzr = &dz[r * lo..(r + 1) * lo];
            let xr = &x[r * li..(r + 1) * li];
            for (b, &g) in lg.bias.iter_mut().zip(dzr) {
                *b += g;
            }
            for (kk, &xv) in xr.iter().enumerate() {
                let wr = &mut lg.weight[kk * lo..(kk + 1) * lo];
                for (w, &g) in wr.iter_mut().zip(dzr) {
                    *w += xv * g;
                }
            }
        }
        if l > 0 || want_input {
            let mut dx = vec![0.0; n * li];
            for r in 0..n {
                let dzr = &dz[r * lo..(r + 1) * lo];
                for (kk, dxv) in dx[r * li..(r + 1) * li].iter_mut().enumerate() {
                    let wr = &layer.weight[kk * lo..(kk + 1) * lo];
                    *dxv = wr.iter().zip(dzr).map(|(w, g)| w * g).sum();
                }
            }
            dy = dx;
        }
    }
    let dinput = want_input.then(|| {
        let mut full = vec![0.0; cache.capacity * ci];
        full[..n * ci].copy_from_slice(&dy[..n * ci]);
        full
    });
    Ok((grads, dinput))
}

/// Backward pass from per-cell upstream gradients `dL/dO` (`K × C_out`).
/// Returns parameter gradients and, when requested, `dL/d-input` laid out like
/// the input batch.
pub fn descriptor_backward(
    d: &Descriptor,
    cache: &ForwardCache,
    upstream: &[f64],
    want_input: bool,
    exec: Execution,
) -> Result<(Gradients, Option<Vec<f64>>)> {
    let co = cache.out_channels;
    if upstream.len() != cache.cells.len() * co {
        return Err(Error::Shape(format!(
            "upstream has {} values for {} cells × {co}",
            upstream.len(),
            cache.cells.len()
        )));
    }
    if d.mlp.layers.len() + 1
        != cache
            .cells
            .first()
            .map_or(d.mlp.layers.len() + 1, |c| c.activations.len())
        || d.mlp.output_channels(cache.in_channels) != co
    {
        return Err(Error::Cache("cache does not match descriptor".into()));
    }
    if cache.kind == DescriptorKind::Weighted && d.aggregation.capacity() != cache.capacity {
        return Err(Error::Cache("aggregation capacity differs from cache".into()));
    }
    if let Some((i, _)) = upstream.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteGradient {
            group: "upstream".into(),
            index: i,
        });
    }
    let per_cell = par::map_indices(exec, cache.cells.len(), |k| {
        cell_backward(d, cache, k, &upstream[k * co..(k + 1) * co], want_input)
    });
    let mut total = Gradients::zeros_like(d);
    let mut dinput = want_input.then(Vec::new);
    for r in per_cell {
        let (g, dx) = r?;
        total.add_assign(&g);
        if let (Some(all), Some(dx)) = (dinput.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
    }
    Ok((total, dinput))
}

/// A scalar loss on the `K × C` cell features.
pub trait Loss: Sync {
    /// Returns the loss and `dL/d-features`.
    fn evaluate(&self, features: &[f64], channels: usize) -> (f64, Vec<f64>);
}

/// `L = Σ O`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearSum;

impl Loss for LinearSum {
    fn evaluate(&self, features: &[f64], _channels: usize) -> (f64, Vec<f64>) {
        (features.iter().sum(), vec![1.0; features.len()])
    }
}

/// `L = ½ Σ (O − target)²`.
#[derive(Debug, Clone, Default)]
pub struct SquaredError {
    pub target: Vec<f64>,
}

impl Loss for SquaredError {
    fn evaluate(&self, features: &[f64], _channels: usize) -> (f64, Vec<f64>) {
        let diff: Vec<f64> = features.iter().zip(&self.target).map(|(o, t)| o - t).collect();
        (0.5 * diff.iter().map(|d| d * d).sum::<f64>(), diff)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdOptions {
    /// Relative step: each scalar is perturbed by `step · max(1, |θ|)`.
    pub step: f64,
    pub tolerance: f64,
    /// Groups larger than this are checked on a random subsample of this size.
    pub max_scalars_per_group: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            max_scalars_per_group: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub scalars_checked: usize,
    pub max_relative_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
    pub max_relative_error: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Checks that the sort and every ReLU are locally constant within `margin`:
/// no two live embedded values of a channel closer than `margin`, and no
/// ReLU pre-activation within `margin` of zero.
pub fn is_tie_free(d: &Descriptor, cache: &ForwardCache, margin: f64) -> bool {
    let check_sort = cache.kind != DescriptorKind::Mean;
    let co = cache.out_channels;
    let last_relu = d
        .mlp
        .layers
        .last()
        .is_some_and(|l| l.activation == crate::descriptor::Activation::Relu);
    for cell in &cache.cells {
        for (l, layer) in d.mlp.layers.iter().enumerate() {
            if layer.activation == crate::descriptor::Activation::Relu
                && cell.preacts[l].iter().any(|p| p.abs() < margin)
            {
                return false;
            }
        }
        if !check_sort {
            continue;
        }
        let emb = cell.embedded();
        let n = cell.valid;
        let mut col = Vec::with_capacity(n);
        for c in 0..co {
            col.clear();
            // Clamped ReLU outputs stay exactly zero under perturbation.
            col.extend(
                (0..n)
                    .map(|r| emb[r * co + c])
                    .filter(|&v| !(last_relu && v == 0.0)),
            );
            col.sort_by(f64::total_cmp);
            if col.windows(2).any(|w| w[1] - w[0] < margin) {
                return false;
            }
        }
    }
    true
}

fn eval_loss(d: &Descriptor, batch: &CellSlots, kind: DescriptorKind, loss: &dyn Loss) -> Result<f64> {
    let co = d.output_channels(batch.channels());
    let f = d.forward_exec(batch, kind, Execution::Sequential)?;
    Ok(loss.evaluate(&f, co).0)
}

/// Compares analytic gradients against central differences
/// `(L(θ+h) − L(θ−h)) / 2h` for every parameter group.
pub fn finite_difference_check(
    d: &Descriptor,
    batch: &CellSlots,
    kind: DescriptorKind,
    loss: &dyn Loss,
    opts: &FdOptions,
) -> Result<FdReport> {
    let analytic = analytic_gradients(d, batch, kind, loss)?;
    finite_difference_compare(d, batch, kind, loss, opts, &analytic)
}

pub fn analytic_gradients(
    d: &Descriptor,
    batch: &CellSlots,
    kind: DescriptorKind,
    loss: &dyn Loss,
) -> Result<Gradients> {
    let cache = d.forward_cached(batch, kind, Execution::Sequential)?;
    let (_, up) = loss.evaluate(&cache.features, cache.out_channels);
    Ok(descriptor_backward(d, &cache, &up, false, Execution::Sequential)?.0)
}

/// Like [`finite_difference_check`] but against supplied gradients, so the
/// harness itself can be tested with corrupted input.
pub fn finite_difference_compare(
    d: &Descriptor,
    batch: &CellSlots,
    kind: DescriptorKind,
    loss: &dyn Loss,
    opts: &FdOptions,
    analytic: &Gradients,
) -> Result<FdReport> {
    let cache = d.forward_cached(batch, kind, Execution::Sequential)?;
    let scale = d
        .param_groups()
        .iter()
        .flat_map(|(_, g)| g.iter())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    if !is_tie_free(d, &cache, 10.0 * opts.step * scale) {
        return Err(Error::TieDetected(0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let names: Vec<String> = d.param_groups().into_iter().map(|(n, _)| n).collect();
    let mut groups = Vec::with_capacity(names.len());
    let agrads = analytic.groups();
    for (g, name) in names.iter().enumerate() {
        // The aggregation weights only enter the weighted descriptor.
        if name == "w" && kind != DescriptorKind::Weighted {
            continue;
        }
        let len = agrads[g].len();
        let indices: Vec<usize> = if len > opts.max_scalars_per_group {
            let mut v = rand::seq::index::sample(&mut rng, len, opts.max_scalars_per_group).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..len).collect()
        };
        let mut worst = 0.0f64;
        let mut probe = d.clone();
        for &j in &indices {
            let theta = d.param_groups()[g].1[j];
            let h = opts.step * theta.abs().max(1.0);
            probe.param_groups_mut()[g][j] = theta + h;
            let plus = eval_loss(&probe, batch, kind, loss)?;
            probe.param_groups_mut()[g][j] = theta - h;
            let minus = eval_loss(&probe, batch, kind, loss)?;
            probe.param_groups_mut()[g][j] = theta;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(agrads[g][j], numeric));
        }
        groups.push(GroupReport {
            group: name.clone(),
            scalars_checked: indices.len(),
            max_relative_error: worst,
            pass: worst <= opts.tolerance,
        });
    }
    let max_relative_error = groups.iter().map(|g| g.max_relative_error).fold(0.0, f64::max);
    Ok(FdReport {
        tolerance: opts.tolerance,
        pass: groups.iter().all(|g| g.pass),
        groups,
        max_relative_error,
    })
}

/// Random gradient-check instance: a descriptor, a batch and a loss target.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub descriptor: Descriptor,
    pub batch: CellSlots,
    pub kind: DescriptorKind,
    pub loss: SquaredError,
}

/// Samples a tie-free instance, resampling up to `attempts` times.
#[allow(clippy::too_many_arguments)]
pub fn sample_tie_free_case<R: Rng>(
    rng: &mut R,
    capacity: usize,
    in_channels: usize,
    out_channels: usize,
    depth: usize,
    cells: usize,
    kind: DescriptorKind,
    step: f64,
    attempts: usize,
) -> Result<GradCase> {
    use crate::descriptor::{Activation, Mlp};
    for _ in 0..attempts {
        let mut dims = vec![in_channels];
        for _ in 1..depth {
            dims.push(rng.random_range(2..=8));
        }
        dims.push(out_channels);
        let last = if rng.random::<bool>() {
            Activation::Identity
        } else {
            Activation::Relu
        };
        let mlp = Mlp::random(&dims, last, rng.random())?;
        let w: Vec<f64> = (0..capacity).map(|_| rng.random_range(-1.0..1.0)).collect();
        let descriptor = Descriptor::new(mlp, AggregationWeights::Shared { w })?;
        let pts: Vec<Vec<f64>> = (0..cells)
            .map(|_| {
                let n = rng.random_range(1..=capacity);
                (0..n * in_channels)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let batch = CellSlots::from_cells(capacity, in_channels, &pts)?;
        let cache = descriptor.forward_cached(&batch, kind, Execution::Sequential)?;
        let scale = descriptor
            .param_groups()
            .iter()
            .flat_map(|(_, g)| g.iter())
            .fold(1.0f64, |m, v| m.max(v.abs()));
        if !is_tie_free(&descriptor, &cache, 10.0 * step * scale) {
            continue;
        }
        let target = (0..cache.features.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        return Ok(GradCase {
            descriptor,
            batch,
            kind,
            loss: SquaredError { target },
        });
    }
    Err(Error::TieDetected(attempts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub step: u64,
    /// First and second moments per parameter group (Adam only).
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(algorithm: Algorithm, learning_rate: f64) -> Self {
        Self {
            algorithm,
            learning_rate,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates `params[g][j] -= …` from `grads[g][j]`, group by group.
    /// Groups are matched by position; a `None` gradient freezes that group.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Option<&[f64]>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter groups but {} gradient groups",
                params.len(),
                grads.len()
            )));
        }
        for (g, (p, gr)) in params.iter().zip(grads).enumerate() {
            if let Some(gr) = gr {
                if p.len() != gr.len() {
                    return Err(Error::Shape(format!(
                        "group {g}: {} params, {} grads",
                        p.len(),
                        gr.len()
                    )));
                }
                if let Some(i) = gr.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        group: g.to_string(),
                        index: i,
                    });
                }
            }
        }
        if self.algorithm == Algorithm::Adam && self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.algorithm == Algorithm::Adam
            && (self.m.len() != params.len()
                || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()))
        {
            return Err(Error::Shape("optimizer moments do not match parameters".into()));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.algorithm {
            Algorithm::Sgd => {
                for (p, gr) in params.iter_mut().zip(grads) {
                    if let Some(gr) = gr {
                        for (x, g) in p.iter_mut().zip(gr.iter()) {
                            *x -= lr * g;
                        }
                    }
                }
            }
            Algorithm::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (gi, (p, gr)) in params.iter_mut().zip(grads).enumerate() {
                    let Some(gr) = gr else { continue };
                    let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
                    for j in 0..p.len() {
                        let g = gr[j];
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        p[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{Activation, DenseLayer, Mlp};

    fn upstream_onehot(co: usize, c: usize) -> Vec<f64> {
        let mut u = vec![0.0; co];
        u[c] = 1.0;
        u
    }

    #[test]
    fn sorted_full_cell_routes_weights_directly() {
        // Already ascending in both channels: perm is the identity.
        let cell = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let batch = CellSlots::from_cells(3, 2, &[cell]).unwrap();
        let w = vec![0.5, -1.0, 2.0];
        let d = Descriptor::new(Mlp::identity(), AggregationWeights::Shared { w: w.clone() }).unwrap();
        let cache = d
            .forward_cached(&batch, DescriptorKind::Weighted, Execution::Sequential)
            .unwrap();
        let up = [0.7, -0.3];
        let (_, dx) = descriptor_backward(&d, &cache, &up, true, Execution::Sequential).unwrap();
        let dx = dx.unwrap();
        for i in 0..3 {
            for c in 0..2 {
                assert_eq!(dx[i * 2 + c], w[i] * up[c]);
            }
        }
    }

    #[test]
    fn w_gradient_is_column_of_a() {
        let batch = CellSlots::from_cells(3, 2, &[vec![3.0, 1.0, 1.0, 2.0, 2.0, 0.0]]).unwrap();
        let d = Descriptor::new(Mlp::identity(), AggregationWeights::unit_last(3)).unwrap();
        let cache = d
            .forward_cached(&batch, DescriptorKind::Weighted, Execution::Sequential)
            .unwrap();
        for c in 0..2 {
            let (g, _) =
                descriptor_backward(&d, &cache, &upstream_onehot(2, c), false, Execution::Sequential)
                    .unwrap();
            assert_eq!(g.aggregation, cache.cells[0].sorted.as_ref().unwrap().column(c));
        }
    }

    #[test]
    fn padded_rows_get_no_gradient() {
        let batch = CellSlots::from_cells(4, 1, &[vec![2.0, -1.0]]).unwrap();
        let d = Descriptor::new(
            Mlp::identity(),
            AggregationWeights::Shared {
                w: vec![1.0, 1.0, 1.0, 1.0],
            },
        )
        .unwrap();
        let cache = d
            .forward_cached(&batch, DescriptorKind::Weighted, Execution::Sequential)
            .unwrap();
        let (_, dx) = descriptor_backward(&d, &cache, &[1.0], true, Execution::Sequential).unwrap();
        assert_eq!(dx.unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_and_mean_routing() {
        let batch = CellSlots::from_cells(3, 2, &[vec![3.0, 1.0, 1.0, 2.0, 2.0, 0.0]]).unwrap();
        let d = Descriptor::new(Mlp::identity(), AggregationWeights::unit_last(3)).unwrap();
        let cache = d
            .forward_cached(&batch, DescriptorKind::Max, Execution::Sequential)
            .unwrap();
        let (_, dx) = descriptor_backward(&d, &cache, &[1.0, 2.0], true, Execution::Sequential).unwrap();
        assert_eq!(dx.unwrap(), vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let cache = d
            .forward_cached(&batch, DescriptorKind::Mean, Execution::Sequential)
            .unwrap();
        let (_, dx) = descriptor_backward(&d, &cache, &[3.0, 6.0], true, Execution::Sequential).unwrap();
        assert_eq!(dx.unwrap(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn linear_loss_matches_column_sums_and_fd() {
        let batch =
            CellSlots::from_cells(4, 3, &[vec![0.3, -0.2, 0.9, 0.1, 0.5, -0.7, -0.4, 0.8, 0.2]]).unwrap();
        let d = Descriptor::new(
            Mlp::new(vec![DenseLayer::identity(3)]).unwrap(),
            AggregationWeights::Shared {
                w: vec![0.1, 0.2, 0.3, 0.4],
            },
        )
        .unwrap();
        let g = analytic_gradients(&d, &batch, DescriptorKind::Weighted, &LinearSum).unwrap();
        let cache = d
            .forward_cached(&batch, DescriptorKind::Weighted, Execution::Sequential)
            .unwrap();
        let a = cache.cells[0].sorted.as_ref().unwrap();
        for i in 0..4 {
            let row_sum: f64 = (0..3).map(|c| a.get(i, c)).sum();
            assert_eq!(g.aggregation[i], row_sum);
        }
        let report = finite_difference_check(
            &d,
            &batch,
            DescriptorKind::Weighted,
            &LinearSum,
            &FdOptions {
                tolerance: 1e-8,
                ..FdOptions::default()
            },
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn random_instance_passes_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for kind in DescriptorKind::ALL {
            let case = sample_tie_free_case(&mut rng, 4, 3, 3, 2, 2, kind, 1e-5, 100).unwrap();
            let report = finite_difference_check(
                &case.descriptor,
                &case.batch,
                kind,
                &case.loss,
                &FdOptions::default(),
            )
            .unwrap();
            assert!(report.pass, "{kind:?}: {report:?}");
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let case =
            sample_tie_free_case(&mut rng, 4, 3, 3, 1, 2, DescriptorKind::Weighted, 1e-5, 100).unwrap();
        let mut g = analytic_gradients(&case.descriptor, &case.batch, case.kind, &case.loss).unwrap();
        let j = g.aggregation.iter().position(|v| v.abs() > 1e-3).unwrap();
        g.aggregation[j] *= 2.0;
        let report = finite_difference_compare(
            &case.descriptor,
            &case.batch,
            case.kind,
            &case.loss,
            &FdOptions::default(),
            &g,
        )
        .unwrap();
        assert!(!report.pass);
        let failing: Vec<&str> = report
            .groups
            .iter()
            .filter(|g| !g.pass)
            .map(|g| g.group.as_str())
            .collect();
        assert_eq!(failing, vec!["w"]);
    }

    #[test]
    fn tie_is_rejected() {
        let batch = CellSlots::from_cells(2, 1, &[vec![0.5, 0.5]]).unwrap();
        let d = Descriptor::new(Mlp::identity(), AggregationWeights::Shared { w: vec![0.3, 0.7] }).unwrap();
        let err = finite_difference_check(
            &d,
            &batch,
            DescriptorKind::Weighted,
            &LinearSum,
            &FdOptions::default(),
        );
        assert!(matches!(err, Err(Error::TieDetected(_))));
    }

    #[test]
    fn backward_rejects_mismatch() {
        let batch = CellSlots::from_cells(2, 1, &[vec![0.5]]).unwrap();
        let d = Descriptor::new(Mlp::identity(), AggregationWeights::unit_last(2)).unwrap();
        let cache = d
            .forward_cached(&batch, DescriptorKind::Weighted, Execution::Sequential)
            .unwrap();
        assert!(descriptor_backward(&d, &cache, &[1.0, 2.0], false, Execution::Sequential).is_err());
        let other = Descriptor::new(
            Mlp::random(&[1, 2], Activation::Relu, 0).unwrap(),
            AggregationWeights::unit_last(2),
        )
        .unwrap();
        assert!(matches!(
            descriptor_backward(&other, &cache, &[1.0], false, Execution::Sequential),
            Err(Error::Cache(_))
        ));
    }

    #[test]
    fn sgd_step() {
        let mut p = vec![1.0];
        let mut opt = OptimizerState::new(Algorithm::Sgd, 0.1);
        opt.step(&mut [&mut p], &[Some(&[2.0][..])]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
        opt.step(&mut [&mut p], &[Some(&[0.0][..])]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_moves_nothing() {
        let mut p = vec![1.0, -2.0];
        let mut opt = OptimizerState::new(Algorithm::Adam, 0.1);
        opt.step(&mut [&mut p], &[Some(&[0.0, 0.0][..])]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_oracle() {
        let lr = 0.01;
        let mut p = vec![0.5; 3];
        let mut opt = OptimizerState::new(Algorithm::Adam, lr);
        opt.step(&mut [&mut p], &[Some(&[1.0, 1.0, 1.0][..])]).unwrap();
        // m = 0.1, v = 0.001, m̂ = 1, v̂ = 1 → Δ = lr / (1 + ε)
        let expected = 0.5 - lr / (1.0 + 1e-8);
        for v in p {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn optimizer_rejects_non_finite() {
        let mut p = vec![1.0];
        let mut opt = OptimizerState::new(Algorithm::Sgd, 0.1);
        assert!(matches!(
            opt.step(&mut [&mut p], &[Some(&[f64::NAN][..])]),
            Err(Error::NonFiniteGradient { .. })
        ));
        assert_eq!(p, vec![1.0]);
    }
}
