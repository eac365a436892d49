//! Per-point embedding, sorted projection and cell aggregation.
//!
//! A cell's valid points are embedded by a shared MLP `h`, then each output
//! channel is sorted independently. The resulting `N × C` matrix `A` has the
//! valid values of every column in ascending order at rows `N-n..N` and zero
//! padding above them, so row `N-1` always holds the per-channel maximum.
//! The weighted aggregator computes `O = wᵀA`; with `w = [0, …, 0, 1]` this is
//! exactly max pooling.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::CellSlots;
use crate::error::{Error, Result};
use crate::network::SortPlan;
use crate::par::{self, Execution};
use crate::simd::{self, Isa};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Identity => v,
        }
    }

    /// Gradient gate: passes `g` where the activation is locally linear with
    /// slope one, else exactly `+0.0`.
    #[inline]
    pub fn gate(self, pre: f64, g: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    g
                } else {
                    0.0
                }
            }
            Activation::Identity => g,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    /// Row-major `inputs × outputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(
        inputs: usize,
        outputs: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        let layer = Self {
            inputs,
            outputs,
            activation,
            weight,
            bias,
        };
        layer.validate()?;
        Ok(layer)
    }

    fn validate(&self) -> Result<()> {
        if self.inputs == 0 || self.outputs == 0 {
            return Err(Error::Shape("layer dimensions must be positive".into()));
        }
        if self.weight.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return Err(Error::Shape(format!(
                "layer {}→{} has {} weights and {} biases",
                self.inputs,
                self.outputs,
                self.weight.len(),
                self.bias.len()
            )));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite layer parameter".into()));
        }
        Ok(())
    }

    pub fn identity(channels: usize) -> Self {
        let mut weight = vec![0.0; channels * channels];
        for i in 0..channels {
            weight[i * channels + i] = 1.0;
        }
        Self {
            inputs: channels,
            outputs: channels,
            activation: Activation::Identity,
            weight,
            bias: vec![0.0; channels],
        }
    }

    /// Glorot-uniform weights, biases uniform in ±0.1.
    pub fn random<R: Rng>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            activation,
            weight: (0..inputs * outputs).map(|_| rng.random_range(-a..a)).collect(),
            bias: (0..outputs).map(|_| rng.random_range(-0.1..0.1)).collect(),
        }
    }

    /// `out[r] = x[r] · W + b` for each of `rows` rows, storing pre-activations
    /// into `pre` when given and activated values into `out`.
    #[inline(always)]
    fn forward_rows(&self, x: &[f64], rows: usize, out: &mut [f64], mut pre: Option<&mut [f64]>) {
        let (ci, co) = (self.inputs, self.outputs);
        for r in 0..rows {
            let xr = &x[r * ci..(r + 1) * ci];
            let o = &mut out[r * co..(r + 1) * co];
            o.copy_from_slice(&self.bias);
            for (k, &xv) in xr.iter().enumerate() {
                let wr = &self.weight[k * co..(k + 1) * co];
                for (oj, &wj) in o.iter_mut().zip(wr) {
                    *oj += xv * wj;
                }
            }
            if let Some(p) = pre.as_deref_mut() {
                p[r * co..(r + 1) * co].copy_from_slice(o);
            }
            if self.activation == Activation::Relu {
                for v in o.iter_mut() {
                    *v = Activation::Relu.apply(*v);
                }
            }
        }
    }
}

/// The per-point embedding `h`. Zero layers means the identity embedding.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let mlp = Self { layers };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn identity() -> Self {
        Self { layers: Vec::new() }
    }

    /// Random MLP with layer widths `dims[0] → dims[1] → …`. Hidden layers use
    /// ReLU; the last layer uses `last`.
    pub fn random(dims: &[usize], last: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape(
                "an MLP needs at least input and output widths".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { last } else { Activation::Relu };
                DenseLayer::random(dims[l], dims[l + 1], act, &mut rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            l.validate()?;
        }
        for w in self.layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::Shape(format!(
                    "layer widths do not chain: {} then {}",
                    w[0].outputs, w[1].inputs
                )));
            }
        }
        Ok(())
    }

    pub fn output_channels(&self, input: usize) -> usize {
        self.layers.last().map_or(input, |l| l.outputs)
    }

    pub fn check_input(&self, input: usize) -> Result<()> {
        match self.layers.first() {
            Some(l) if l.inputs != input => Err(Error::Shape(format!(
                "MLP expects {} input channels, got {input}",
                l.inputs
            ))),
            _ => Ok(()),
        }
    }

    fn max_width(&self, input: usize) -> usize {
        self.layers
            .iter()
            .map(|l| l.outputs)
            .chain([input])
            .max()
            .unwrap_or(input)
    }

    /// Embeds `rows` rows of `x` into `out`. `scratch` must hold at least
    /// `2 × rows × max_width` values.
    #[inline(always)]
    fn embed_rows(&self, x: &[f64], rows: usize, input: usize, out: &mut [f64], scratch: &mut [f64]) {
        let nl = self.layers.len();
        if nl == 0 {
            out[..rows * input].copy_from_slice(&x[..rows * input]);
            return;
        }
        if nl == 1 {
            self.layers[0].forward_rows(x, rows, out, None);
            return;
        }
        let half = scratch.len() / 2;
        let (a, b) = scratch.split_at_mut(half);
        self.layers[0].forward_rows(x, rows, a, None);
        let mut cur_in_a = true;
        for (l, layer) in self.layers.iter().enumerate().skip(1) {
            let last = l + 1 == nl;
            let (src, dst): (&[f64], &mut [f64]) = match (cur_in_a, last) {
                (true, true) => (a, out),
                (false, true) => (b, out),
                (true, false) => (a, b),
                (false, false) => (b, a),
            };
            layer.forward_rows(src, rows, dst, None);
            cur_in_a = !cur_in_a;
        }
    }

    /// Applies `h` to the first `valid` slots of a `capacity × input` cell.
    /// Padding slots stay exactly zero.
    pub fn forward_cell(
        &self,
        cell: &[f64],
        capacity: usize,
        input: usize,
        valid: usize,
    ) -> Result<Vec<f64>> {
        self.check_input(input)?;
        if cell.len() != capacity * input || valid > capacity {
            return Err(Error::Shape(format!(
                "cell of {} values with capacity {capacity}, {input} channels, {valid} valid",
                cell.len()
            )));
        }
        let co = self.output_channels(input);
        let mut out = vec![0.0; capacity * co];
        let mut scratch = vec![0.0; 2 * capacity * self.max_width(input)];
        self.embed_rows(cell, valid, input, &mut out, &mut scratch);
        Ok(out)
    }

    /// Forward over `rows` rows recording every layer's input and pre-activation.
    fn forward_traced(&self, x: &[f64], rows: usize, input: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut acts = vec![x[..rows * input].to_vec()];
        let mut pres = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut out = vec![0.0; rows * layer.outputs];
            let mut pre = vec![0.0; rows * layer.outputs];
            layer.forward_rows(
                acts.last().expect("input present"),
                rows,
                &mut out,
                Some(&mut pre),
            );
            acts.push(out);
            pres.push(pre);
        }
        (acts, pres)
    }
}

/// The aggregation weights `w` of `O = wᵀA`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum AggregationWeights {
    /// One weight per sorted row, shared by all channels.
    Shared { w: Vec<f64> },
    /// A weight per (row, channel), row-major `capacity × channels`.
    PerChannel {
        capacity: usize,
        channels: usize,
        w: Vec<f64>,
    },
}

impl AggregationWeights {
    /// `[0, …, 0, 1]`: reproduces max pooling.
    pub fn unit_last(capacity: usize) -> Self {
        let mut w = vec![0.0; capacity];
        w[capacity - 1] = 1.0;
        Self::Shared { w }
    }

    pub fn unit_last_per_channel(capacity: usize, channels: usize) -> Self {
        let mut w = vec![0.0; capacity * channels];
        w[(capacity - 1) * channels..].fill(1.0);
        Self::PerChannel {
            capacity,
            channels,
            w,
        }
    }

    /// `1/n` on the bottom `n` rows: the mean of a cell with `n` valid points.
    pub fn mean_of(capacity: usize, valid: usize) -> Self {
        let mut w = vec![0.0; capacity];
        w[capacity - valid..].fill(1.0 / valid as f64);
        Self::Shared { w }
    }

    /// `unit_last` plus uniform noise in `±noise`.
    pub fn unit_last_noisy(capacity: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut this = Self::unit_last(capacity);
        if noise > 0.0 {
            for v in this.values_mut() {
                *v += rng.random_range(-noise..noise);
            }
        }
        this
    }

    pub fn capacity(&self) -> usize {
        match self {
            Self::Shared { w } => w.len(),
            Self::PerChannel { capacity, .. } => *capacity,
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Self::Shared { w } | Self::PerChannel { w, .. } => w,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match self {
            Self::Shared { w } | Self::PerChannel { w, .. } => w,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Self::PerChannel {
            capacity,
            channels,
            w,
        } = self
        {
            if w.len() != capacity * channels {
                return Err(Error::Shape(format!(
                    "per-channel weights hold {} values, expected {capacity}×{channels}",
                    w.len()
                )));
            }
        }
        if self.capacity() == 0 {
            return Err(Error::Shape("aggregation weights are empty".into()));
        }
        if self.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite aggregation weight".into()));
        }
        Ok(())
    }

    fn check(&self, capacity: usize, channels: usize) -> Result<()> {
        let ok = match self {
            Self::Shared { w } => w.len() == capacity,
            Self::PerChannel {
                capacity: n,
                channels: c,
                ..
            } => *n == capacity && *c == channels,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "aggregation weights do not match a {capacity}×{channels} sorted matrix"
            )))
        }
    }

    /// `O[c] = Σ_i w(i, c)·A[i][c]`, summed in ascending row order.
    #[inline(always)]
    fn apply(&self, a: &[f64], capacity: usize, channels: usize, out: &mut [f64]) {
        out.fill(0.0);
        match self {
            Self::Shared { w } => {
                for (i, &wi) in w.iter().enumerate() {
                    let row = &a[i * channels..(i + 1) * channels];
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += wi * v;
                    }
                }
            }
            Self::PerChannel { w, .. } => {
                for i in 0..capacity {
                    let row = &a[i * channels..(i + 1) * channels];
                    let wr = &w[i * channels..(i + 1) * channels];
                    for ((o, &v), &wi) in out.iter_mut().zip(row).zip(wr) {
                        *o += wi * v;
                    }
                }
            }
        }
    }

    #[inline]
    pub fn weight(&self, row: usize, channel: usize) -> f64 {
        match self {
            Self::Shared { w } => w[row],
            Self::PerChannel { channels, w, .. } => w[row * channels + channel],
        }
    }
}

/// The sorted projection `A` of one cell together with the argsort used.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedFeatureMatrix {
    pub capacity: usize,
    pub channels: usize,
    pub valid: usize,
    /// Row-major `capacity × channels`.
    pub values: Vec<f64>,
    /// `perm[c * capacity + row]` is the source slot of `values[row][c]`.
    pub perm: Vec<usize>,
}

impl SortedFeatureMatrix {
    pub fn get(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channels + channel]
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        (0..self.capacity).map(|r| self.get(r, channel)).collect()
    }

    pub fn source_slot(&self, row: usize, channel: usize) -> usize {
        self.perm[channel * self.capacity + row]
    }
}

fn cmp_slots(col: &[f64], a: usize, b: usize) -> Ordering {
    col[a].total_cmp(&col[b]).then(a.cmp(&b))
}

/// Sorts each channel of the first `valid` slots ascending and places them at
/// rows `capacity-valid..capacity`; ties keep ascending slot order. Padding
/// rows are zero and map to the padding slots in order. `-0.0` is stored as
/// `+0.0`, so equal values are bitwise equal and any correct sort agrees.
pub fn sort_project(
    embedded: &[f64],
    capacity: usize,
    channels: usize,
    valid: usize,
) -> Result<SortedFeatureMatrix> {
    if valid == 0 {
        return Err(Error::EmptyCell);
    }
    if valid > capacity || embedded.len() != capacity * channels {
        return Err(Error::Shape(format!(
            "{} values for {capacity}×{channels} with {valid} valid",
            embedded.len()
        )));
    }
    let pad = capacity - valid;
    let mut values = vec![0.0; capacity * channels];
    let mut perm = vec![0usize; capacity * channels];
    let mut col = vec![0.0; valid];
    let mut idx: Vec<usize> = Vec::with_capacity(valid);
    for c in 0..channels {
        for (s, v) in col.iter_mut().enumerate() {
            *v = embedded[s * channels + c] + 0.0;
        }
        idx.clear();
        idx.extend(0..valid);
        idx.sort_unstable_by(|&a, &b| cmp_slots(&col, a, b));
        let p = &mut perm[c * capacity..(c + 1) * capacity];
        for (r, slot) in p[..pad].iter_mut().enumerate() {
            *slot = valid + r;
        }
        for (r, &s) in idx.iter().enumerate() {
            p[pad + r] = s;
            values[(pad + r) * channels + c] = col[s];
        }
    }
    Ok(SortedFeatureMatrix {
        capacity,
        channels,
        valid,
        values,
        perm,
    })
}

/// `O = wᵀA` for one sorted matrix.
pub fn aggregate_weighted(w: &AggregationWeights, a: &SortedFeatureMatrix) -> Result<Vec<f64>> {
    w.check(a.capacity, a.channels)?;
    let mut out = vec![0.0; a.channels];
    w.apply(&a.values, a.capacity, a.channels, &mut out);
    Ok(out)
}

fn check_cell(embedded: &[f64], capacity: usize, channels: usize, valid: usize) -> Result<()> {
    if valid == 0 {
        return Err(Error::EmptyCell);
    }
    if valid > capacity || embedded.len() != capacity * channels {
        return Err(Error::Shape(format!(
            "{} values for {capacity}×{channels} with {valid} valid",
            embedded.len()
        )));
    }
    Ok(())
}

#[inline(always)]
fn max_rows(rows: &[f64], valid: usize, channels: usize, out: &mut [f64]) {
    out.copy_from_slice(&rows[..channels]);
    for r in 1..valid {
        for (o, &v) in out.iter_mut().zip(&rows[r * channels..(r + 1) * channels]) {
            if v >= *o {
                *o = v;
            }
        }
    }
}

/// `Σ a·(1/n)` over already-sorted rows, ascending. Written as a weighted sum
/// so it matches `aggregate_weighted` with [`AggregationWeights::mean_of`]
/// bit for bit: padded rows only add `0·0`.
#[inline(always)]
fn mean_sorted_rows(rows: &[f64], valid: usize, channels: usize, out: &mut [f64]) {
    out.fill(0.0);
    let inv = 1.0 / valid as f64;
    for r in 0..valid {
        for (o, &v) in out.iter_mut().zip(&rows[r * channels..(r + 1) * channels]) {
            *o += inv * v;
        }
    }
}

/// Per-channel maximum over the valid slots.
pub fn aggregate_max(embedded: &[f64], capacity: usize, channels: usize, valid: usize) -> Result<Vec<f64>> {
    check_cell(embedded, capacity, channels, valid)?;
    let mut out = vec![0.0; channels];
    max_rows(embedded, valid, channels, &mut out);
    Ok(out)
}

/// Per-channel arithmetic mean over the valid slots. Each channel is summed in
/// ascending value order so the result does not depend on slot order.
pub fn aggregate_mean(embedded: &[f64], capacity: usize, channels: usize, valid: usize) -> Result<Vec<f64>> {
    check_cell(embedded, capacity, channels, valid)?;
    let sorted = sort_project(embedded, capacity, channels, valid)?;
    let mut out = vec![0.0; channels];
    let pad = capacity - valid;
    mean_sorted_rows(&sorted.values[pad * channels..], valid, channels, &mut out);
    Ok(out)
}

/// Slot that `aggregate_max` takes each channel from: the highest slot among
/// ties, matching the last row of the stable sort.
pub fn argmax_slots(embedded: &[f64], channels: usize, valid: usize) -> Vec<usize> {
    let mut best = vec![0usize; channels];
    for r in 1..valid {
        for c in 0..channels {
            if embedded[r * channels + c] >= embedded[best[c] * channels + c] {
                best[c] = r;
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    Weighted,
    Max,
    Mean,
}

impl DescriptorKind {
    pub const ALL: [DescriptorKind; 3] = [Self::Weighted, Self::Max, Self::Mean];

    pub fn name(self) -> &'static str {
        match self {
            Self::Weighted => "weighted",
            Self::Max => "max",
            Self::Mean => "mean",
        }
    }
}

impl std::str::FromStr for DescriptorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Self::Weighted),
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            other => Err(Error::InvalidSpec(format!("unknown descriptor kind {other:?}"))),
        }
    }
}

/// Everything the backward pass needs from one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCache {
    pub valid: usize,
    /// Layer inputs for the valid rows; the last entry is the embedding.
    pub activations: Vec<Vec<f64>>,
    pub preacts: Vec<Vec<f64>>,
    pub sorted: Option<SortedFeatureMatrix>,
    pub argmax: Option<Vec<usize>>,
}

impl CellCache {
    pub fn embedded(&self) -> &[f64] {
        self.activations.last().expect("at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub kind: DescriptorKind,
    pub capacity: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Row-major `K × out_channels`.
    pub features: Vec<f64>,
    pub cells: Vec<CellCache>,
}

/// A grid-cell descriptor: embedding MLP plus aggregation weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub mlp: Mlp,
    pub aggregation: AggregationWeights,
    /// Fault-injection hook for harness checks: skips the per-channel sort.
    #[serde(skip)]
    #[doc(hidden)]
    pub scramble_sort: bool,
}

impl Descriptor {
    pub fn new(mlp: Mlp, aggregation: AggregationWeights) -> Result<Self> {
        mlp.validate()?;
        aggregation.validate()?;
        Ok(Self {
            mlp,
            aggregation,
            scramble_sort: false,
        })
    }

    /// Default configuration: one `input → width` ReLU layer and `w = [0, …, 0, 1]`.
    pub fn default_for(input: usize, width: usize, capacity: usize, seed: u64) -> Result<Self> {
        Self::new(
            Mlp::random(&[input, width], Activation::Relu, seed)?,
            AggregationWeights::unit_last(capacity),
        )
    }

    pub fn capacity(&self) -> usize {
        self.aggregation.capacity()
    }

    pub fn output_channels(&self, input: usize) -> usize {
        self.mlp.output_channels(input)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Descriptor = serde_json::from_str(text)?;
        Self::new(d.mlp, d.aggregation)
    }

    fn check_batch(&self, batch: &CellSlots, kind: DescriptorKind) -> Result<usize> {
        self.mlp.check_input(batch.channels())?;
        let co = self.output_channels(batch.channels());
        if kind == DescriptorKind::Weighted {
            self.aggregation.check(batch.capacity(), co)?;
        }
        Ok(co)
    }

    /// Named parameter groups in a fixed order: per layer weight then bias,
    /// then the aggregation weights.
    pub fn param_groups(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (l, layer) in self.mlp.layers.iter().enumerate() {
            out.push((format!("layer{l}.weight"), &layer.weight));
            out.push((format!("layer{l}.bias"), &layer.bias));
        }
        out.push(("w".into(), self.aggregation.values()));
        out
    }

    pub fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.mlp.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(self.aggregation.values_mut());
        out
    }

    pub fn forward(&self, batch: &CellSlots, kind: DescriptorKind) -> Result<Vec<f64>> {
        self.forward_exec(batch, kind, Execution::default())
    }

    /// Inference forward: returns `K × C_out` cell features.
    pub fn forward_exec(&self, batch: &CellSlots, kind: DescriptorKind, exec: Execution) -> Result<Vec<f64>> {
        let co = self.check_batch(batch, kind)?;
        let (cap, ci) = (batch.capacity(), batch.channels());
        let nets = (kind != DescriptorKind::Max).then(|| SortPlan::new(cap));
        let width = self.mlp.max_width(ci);
        let mut out = vec![0.0; batch.len() * co];
        let init = || (vec![0.0; cap * co], vec![0.0; 2 * cap * width]);
        par::for_each_chunk_init(exec, &mut out, co, init, |(emb, scratch), k, o| {
            simd::dispatch(
                #[inline(always)]
                |isa| {
                    let n = batch.valid_count(k);
                    let pad = cap - n;
                    // Valid rows land at the bottom so the sort can run in place.
                    let target = if kind == DescriptorKind::Max {
                        &mut emb[..n * co]
                    } else {
                        emb[..pad * co].fill(0.0);
                        &mut emb[pad * co..]
                    };
                    self.mlp.embed_rows(batch.cell(k), n, ci, target, scratch);
                    self.aggregate_block(isa, kind, nets.as_ref(), emb, cap, co, n, o);
                },
            )
        });
        Ok(out)
    }

    /// Embeds every cell; the result has the same slot layout as the input.
    pub fn embed_batch(&self, batch: &CellSlots, exec: Execution) -> Result<CellSlots> {
        self.mlp.check_input(batch.channels())?;
        let (cap, ci) = (batch.capacity(), batch.channels());
        let co = self.output_channels(ci);
        let width = self.mlp.max_width(ci);
        let mut data = vec![0.0; batch.len() * cap * co];
        let init = || vec![0.0; 2 * cap * width];
        par::for_each_chunk_init(exec, &mut data, cap * co, init, |scratch, k, o| {
            simd::dispatch(
                #[inline(always)]
                |_| {
                    self.mlp
                        .embed_rows(batch.cell(k), batch.valid_count(k), ci, o, scratch)
                },
            )
        });
        if batch.is_empty() {
            return Ok(CellSlots::empty(cap, co));
        }
        CellSlots::new(cap, co, data, batch.valid_counts().to_vec())
    }

    /// Aggregation stage only, over already-embedded cells.
    pub fn aggregate_batch(
        &self,
        embedded: &CellSlots,
        kind: DescriptorKind,
        exec: Execution,
    ) -> Result<Vec<f64>> {
        let (cap, co) = (embedded.capacity(), embedded.channels());
        if kind == DescriptorKind::Weighted {
            self.aggregation.check(cap, co)?;
        }
        let nets = (kind != DescriptorKind::Max).then(|| SortPlan::new(cap));
        let mut out = vec![0.0; embedded.len() * co];
        par::for_each_chunk_init(
            exec,
            &mut out,
            co,
            || vec![0.0; cap * co],
            |block, k, o| {
                simd::dispatch(
                    #[inline(always)]
                    |isa| {
                        let n = embedded.valid_count(k);
                        let src = embedded.cell(k);
                        if kind == DescriptorKind::Max {
                            max_rows(src, n, co, o);
                            return;
                        }
                        let pad = cap - n;
                        block[..pad * co].fill(0.0);
                        block[pad * co..].copy_from_slice(&src[..n * co]);
                        self.aggregate_block(isa, kind, nets.as_ref(), block, cap, co, n, o);
                    },
                )
            },
        );
        Ok(out)
    }

    /// `block` holds the embedded rows at `0..n` for max, or at `pad..cap`
    /// with zero rows above for the sorting kinds.
    #[allow(clippy::too_many_arguments)]
    #[inline(always)]
    fn aggregate_block(
        &self,
        isa: Isa,
        kind: DescriptorKind,
        nets: Option<&SortPlan>,
        block: &mut [f64],
        cap: usize,
        co: usize,
        n: usize,
        out: &mut [f64],
    ) {
        let pad = cap - n;
        match kind {
            DescriptorKind::Max => max_rows(block, n, co, out),
            DescriptorKind::Weighted | DescriptorKind::Mean => {
                if !self.scramble_sort {
                    nets.expect("sort plan").sort_valid(isa, block, co, n);
                }
                if kind == DescriptorKind::Mean {
                    mean_sorted_rows(&block[pad * co..], n, co, out);
                } else {
                    self.aggregation.apply(block, cap, co, out);
                }
            }
        }
    }

    /// Forward pass that records per-cell intermediates for backward.
    pub fn forward_cached(
        &self,
        batch: &CellSlots,
        kind: DescriptorKind,
        exec: Execution,
    ) -> Result<ForwardCache> {
        let co = self.check_batch(batch, kind)?;
        let (cap, ci) = (batch.capacity(), batch.channels());
        let cells: Vec<Result<(CellCache, Vec<f64>)>> = par::map_indices(exec, batch.len(), |k| {
            let n = batch.valid_count(k);
            let (activations, preacts) = self.mlp.forward_traced(batch.cell(k), n, ci);
            let mut emb = vec![0.0; cap * co];
            emb[..n * co].copy_from_slice(activations.last().expect("input present"));
            let mut feat = vec![0.0; co];
            let (sorted, argmax) = match kind {
                DescriptorKind::Max => {
                    max_rows(&emb, n, co, &mut feat);
                    (None, Some(argmax_slots(&emb, co, n)))
                }
                DescriptorKind::Weighted | DescriptorKind::Mean => {
                    let sorted = if self.scramble_sort {
                        unsorted_projection(&emb, cap, co, n)
                    } else {
                        sort_project(&emb, cap, co, n)?
                    };
                    if kind == DescriptorKind::Mean {
                        mean_sorted_rows(&sorted.values[(cap - n) * co..], n, co, &mut feat);
                    } else {
                        self.aggregation.apply(&sorted.values, cap, co, &mut feat);
                    }
                    (Some(sorted), None)
                }
            };
            Ok((
                CellCache {
                    valid: n,
                    activations,
                    preacts,
                    sorted,
                    argmax,
                },
                feat,
            ))
        });
        let mut features = Vec::with_capacity(batch.len() * co);
        let mut caches = Vec::with_capacity(batch.len());
        for r in cells {
            let (c, f) = r?;
            features.extend_from_slice(&f);
            caches.push(c);
        }
        Ok(ForwardCache {
            kind,
            capacity: cap,
            in_channels: ci,
            out_channels: co,
            features,
            cells: caches,
        })
    }
}

/// Identity "sort" used by the fault-injection hook.
fn unsorted_projection(emb: &[f64], cap: usize, co: usize, n: usize) -> SortedFeatureMatrix {
    let pad = cap - n;
    let mut values = vec![0.0; cap * co];
    values[pad * co..].copy_from_slice(&emb[..n * co]);
    let mut perm = vec![0usize; cap * co];
    for c in 0..co {
        for r in 0..cap {
            perm[c * cap + r] = if r < pad { n + r } else { r - pad };
        }
    }
    SortedFeatureMatrix {
        capacity: cap,
        channels: co,
        valid: n,
        values,
        perm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_sorted_columns(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let c = rows[0].len();
        (0..c)
            .map(|j| {
                let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                // insertion sort, independent of the library path
                for i in 1..col.len() {
                    let mut k = i;
                    while k > 0 && col[k - 1] > col[k] {
                        col.swap(k - 1, k);
                        k -= 1;
                    }
                }
                col
            })
            .collect()
    }

    #[test]
    fn sort_project_three_points() {
        let rows = vec![vec![3.0, 1.0], vec![1.0, 2.0], vec![2.0, 0.0]];
        let cols = naive_sorted_columns(&rows);
        let flat: Vec<f64> = rows.concat();
        let a = sort_project(&flat, 3, 2, 3).unwrap();
        assert_eq!(a.column(0), cols[0]);
        assert_eq!(a.column(1), cols[1]);
        assert_eq!(a.values, vec![1.0, 0.0, 2.0, 1.0, 3.0, 2.0]);
        assert_eq!(&a.perm[..3], &[1, 2, 0]);
        assert_eq!(&a.perm[3..], &[2, 0, 1]);
    }

    #[test]
    fn four_point_identity_is_order_free() {
        // a=(0,0), b=(2,1), c=(1,2), d=(3,3): column 0 orders a<c<b<d, column 1 a<b<c<d.
        let (a, b, c, d) = ([0.0, 0.0], [2.0, 1.0], [1.0, 2.0], [3.0, 3.0]);
        let abcd: Vec<f64> = [a, b, c, d].concat();
        let cdba: Vec<f64> = [c, d, b, a].concat();
        let m1 = sort_project(&abcd, 4, 2, 4).unwrap();
        let m2 = sort_project(&cdba, 4, 2, 4).unwrap();
        assert_eq!(m1.values, m2.values);
        assert_eq!(m1.values, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        // column 0 picks a, c, b, d
        let picked: Vec<usize> = (0..4).map(|r| m1.source_slot(r, 0)).collect();
        assert_eq!(picked, vec![0, 2, 1, 3]);
    }

    #[test]
    fn single_point_padding_sits_on_top() {
        let cell = [5.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let a = sort_project(&cell, 4, 2, 1).unwrap();
        assert_eq!(a.values, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0, -1.0]);
        assert_eq!(&a.perm[..4], &[1, 2, 3, 0]);
    }

    #[test]
    fn ties_keep_slot_order() {
        let cell = [1.0, 1.0, 0.5];
        let a = sort_project(&cell, 3, 1, 3).unwrap();
        assert_eq!(a.perm, vec![2, 0, 1]);
    }

    #[test]
    fn sort_project_rejects_empty() {
        assert!(matches!(sort_project(&[0.0; 4], 2, 2, 0), Err(Error::EmptyCell)));
        assert!(matches!(aggregate_max(&[0.0; 4], 2, 2, 0), Err(Error::EmptyCell)));
        assert!(matches!(
            aggregate_mean(&[0.0; 4], 2, 2, 0),
            Err(Error::EmptyCell)
        ));
    }

    #[test]
    fn weighted_examples() {
        let a = sort_project(&[3.0, 1.0, 1.0, 2.0, 2.0, 0.0], 3, 2, 3).unwrap();
        let w = AggregationWeights::Shared {
            w: vec![0.5, 0.5, 0.0],
        };
        assert_eq!(aggregate_weighted(&w, &a).unwrap(), vec![1.5, 0.5]);
        let unit = AggregationWeights::unit_last(3);
        assert_eq!(aggregate_weighted(&unit, &a).unwrap(), vec![3.0, 2.0]);
        let third = AggregationWeights::Shared { w: vec![0.25; 4] };
        assert!(aggregate_weighted(&third, &a).is_err());
        let full = AggregationWeights::Shared { w: vec![0.25; 4] };
        let a4 = sort_project(&[1.0, 2.0, 3.0, 4.0], 4, 1, 4).unwrap();
        assert_eq!(aggregate_weighted(&full, &a4).unwrap(), vec![2.5]);
    }

    #[test]
    fn per_channel_weights() {
        let a = sort_project(&[3.0, 1.0, 1.0, 2.0, 2.0, 0.0], 3, 2, 3).unwrap();
        let w = AggregationWeights::PerChannel {
            capacity: 3,
            channels: 2,
            w: vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        };
        assert_eq!(aggregate_weighted(&w, &a).unwrap(), vec![1.0, 2.0]);
        let unit = AggregationWeights::unit_last_per_channel(3, 2);
        assert_eq!(aggregate_weighted(&unit, &a).unwrap(), vec![3.0, 2.0]);
    }

    #[test]
    fn max_and_mean_examples() {
        let cell = [3.0, 1.0, 1.0, 2.0, 2.0, 0.0];
        assert_eq!(aggregate_max(&cell, 3, 2, 3).unwrap(), vec![3.0, 2.0]);
        assert_eq!(aggregate_max(&cell, 3, 2, 1).unwrap(), vec![3.0, 1.0]);
        assert_eq!(
            aggregate_mean(&[2.0, 0.0, 4.0, 2.0], 2, 2, 2).unwrap(),
            vec![3.0, 1.0]
        );
        assert_eq!(aggregate_mean(&[7.0, 0.0, 0.0], 3, 1, 1).unwrap(), vec![7.0]);
        assert_eq!(aggregate_mean(&[0.3; 5], 5, 1, 5).unwrap(), vec![0.3]);
        assert_eq!(aggregate_max(&[0.3; 5], 5, 1, 5).unwrap(), vec![0.3]);
    }

    #[test]
    fn identity_mlp_is_identity() {
        let mlp = Mlp::new(vec![DenseLayer::identity(3)]).unwrap();
        let cell = [1.0, -2.0, 3.5, 0.25, 0.5, -0.75, 0.0, 0.0, 0.0];
        assert_eq!(mlp.forward_cell(&cell, 3, 3, 2).unwrap(), cell.to_vec());
        assert_eq!(
            Mlp::identity().forward_cell(&cell, 3, 3, 2).unwrap(),
            cell.to_vec()
        );
    }

    #[test]
    fn mlp_masks_padding() {
        let mlp = Mlp::random(&[3, 5, 4], Activation::Identity, 1).unwrap();
        let cell = [1.0, 2.0, 3.0, 0.0, 0.0, 0.0];
        let out = mlp.forward_cell(&cell, 2, 3, 1).unwrap();
        assert!(out[4..].iter().all(|&v| v == 0.0));
        assert!(out[..4].iter().any(|&v| v != 0.0));
        assert!(mlp.forward_cell(&cell, 3, 2, 1).is_err());
    }

    #[test]
    fn mlp_matches_straight_line_matmul() {
        let mlp = Mlp::random(&[4, 6, 3], Activation::Relu, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = mlp.forward_cell(&cell, 5, 4, 5).unwrap();
        for r in 0..5 {
            let mut x: Vec<f64> = cell[r * 4..(r + 1) * 4].to_vec();
            for l in &mlp.layers {
                let mut y = vec![0.0; l.outputs];
                for (j, yj) in y.iter_mut().enumerate() {
                    let mut s = l.bias[j];
                    for (k, xk) in x.iter().enumerate() {
                        s += xk * l.weight[k * l.outputs + j];
                    }
                    *yj = l.activation.apply(s);
                }
                x = y;
            }
            for (a, b) in x.iter().zip(&out[r * 3..(r + 1) * 3]) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mlp_rejects_bad_chain() {
        let a = DenseLayer::identity(3);
        let b = DenseLayer::identity(4);
        assert!(Mlp::new(vec![a, b]).is_err());
    }

    fn random_batch(seed: u64, cells: usize, cap: usize, ch: usize) -> CellSlots {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..cells)
            .map(|_| {
                let n = rng.random_range(1..=cap);
                (0..n * ch).map(|_| rng.random_range(-1.0..1.0)).collect()
            })
            .collect();
        CellSlots::from_cells(cap, ch, &pts).unwrap()
    }

    #[test]
    fn fast_and_cached_paths_agree() {
        let batch = random_batch(4, 50, 8, 5);
        let d = Descriptor::new(
            Mlp::random(&[5, 7, 6], Activation::Relu, 9).unwrap(),
            AggregationWeights::unit_last_noisy(8, 0.3, 1),
        )
        .unwrap();
        for kind in DescriptorKind::ALL {
            let fast = d.forward_exec(&batch, kind, Execution::Sequential).unwrap();
            let par = d.forward_exec(&batch, kind, Execution::Parallel).unwrap();
            let cached = d.forward_cached(&batch, kind, Execution::Parallel).unwrap();
            let staged = d
                .aggregate_batch(
                    &d.embed_batch(&batch, Execution::Parallel).unwrap(),
                    kind,
                    Execution::Sequential,
                )
                .unwrap();
            assert_eq!(fast, par);
            assert_eq!(fast, cached.features);
            assert_eq!(fast, staged);
        }
    }

    #[test]
    fn identity_mlp_composes_hand_result() {
        let batch = CellSlots::from_cells(3, 2, &[vec![3.0, 1.0, 1.0, 2.0, 2.0, 0.0]]).unwrap();
        let d = Descriptor::new(
            Mlp::identity(),
            AggregationWeights::Shared {
                w: vec![0.5, 0.5, 0.0],
            },
        )
        .unwrap();
        assert_eq!(
            d.forward(&batch, DescriptorKind::Weighted).unwrap(),
            vec![1.5, 0.5]
        );
        assert_eq!(d.forward(&batch, DescriptorKind::Max).unwrap(), vec![3.0, 2.0]);
        assert_eq!(d.forward(&batch, DescriptorKind::Mean).unwrap(), vec![2.0, 1.0]);
    }

    #[test]
    fn checkpoint_json_roundtrip() {
        let d = Descriptor::new(
            Mlp::random(&[9, 16], Activation::Relu, 3).unwrap(),
            AggregationWeights::unit_last_noisy(32, 0.01, 4),
        )
        .unwrap();
        let back = Descriptor::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(back, d);
        let json = d.to_json().unwrap();
        assert!(json.contains("\"mode\": \"shared\""));
        assert!(json.contains("\"activation\": \"relu\""));
    }
}
