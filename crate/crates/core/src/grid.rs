//! Pillar/voxel partitioning, per-point decoration and scatter to a dense map.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::CellSlots;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::pointcloud::PointCloud;

/// Channels appended by decoration: offsets from the cell's point mean
/// (x_c, y_c, z_c) and from the cell's geometric center (x_p, y_p).
pub const DECORATION_CHANNELS: usize = 5;

/// Dense maps larger than this many `f64` elements are refused (1 GiB).
pub const MAX_MAP_ELEMENTS: usize = 1 << 27;

/// Integer cell index `[x, y, z]`; `z` is always 0 in pillar mode.
pub type CellCoord = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    Pillar,
    Voxel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum OverflowPolicy {
    KeepFirst,
    SeededSubsample { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub mode: GridMode,
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub cell_size: [f64; 3],
    /// Maximum points kept per cell (N).
    pub capacity: usize,
    /// Maximum number of cells materialized (K_max).
    pub max_cells: usize,
    #[serde(default = "default_overflow")]
    pub overflow: OverflowPolicy,
    #[serde(default = "default_decorate")]
    pub decorate: bool,
}

fn default_overflow() -> OverflowPolicy {
    OverflowPolicy::KeepFirst
}

fn default_decorate() -> bool {
    true
}

impl GridSpec {
    /// KITTI pillar configuration: 0.16 m × 0.16 m × 4 m pillars, 32 points each.
    pub fn pillar_default() -> Self {
        Self {
            mode: GridMode::Pillar,
            range_min: [0.0, -39.68, -3.0],
            range_max: [69.12, 39.68, 1.0],
            cell_size: [0.16, 0.16, 4.0],
            capacity: 32,
            max_cells: 12_000,
            overflow: OverflowPolicy::KeepFirst,
            decorate: true,
        }
    }

    /// KITTI voxel configuration: 0.05 m × 0.05 m × 0.1 m voxels, 5 points each,
    /// over a 6.4 m × 6.4 m × 3.2 m window so the dense map stays allocatable.
    pub fn voxel_default() -> Self {
        Self {
            mode: GridMode::Voxel,
            range_min: [0.0, -3.2, -2.0],
            range_max: [6.4, 3.2, 1.2],
            cell_size: [0.05, 0.05, 0.1],
            capacity: 5,
            max_cells: 16_000,
            overflow: OverflowPolicy::KeepFirst,
            decorate: true,
        }
    }

    pub fn default_for(mode: GridMode) -> Self {
        match mode {
            GridMode::Pillar => Self::pillar_default(),
            GridMode::Voxel => Self::voxel_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.range_min[a].is_finite() && self.range_max[a].is_finite())
                || self.range_max[a] <= self.range_min[a]
            {
                return Err(Error::InvalidSpec(format!(
                    "axis {a}: range_max must exceed range_min"
                )));
            }
            if !(self.cell_size[a].is_finite() && self.cell_size[a] > 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "axis {a}: cell size must be positive"
                )));
            }
        }
        if self.capacity == 0 || self.max_cells == 0 {
            return Err(Error::InvalidSpec(
                "capacity and max_cells must be at least 1".into(),
            ));
        }
        if self.dims().contains(&0) {
            return Err(Error::InvalidSpec("grid has an axis with zero cells".into()));
        }
        Ok(())
    }

    fn axis_cells(&self, a: usize) -> usize {
        // The epsilon absorbs representation error in ranges that are exact
        // multiples of the cell size (69.12 / 0.16 must give 432, not 431).
        ((self.range_max[a] - self.range_min[a]) / self.cell_size[a] + 1e-9).floor() as usize
    }

    /// Grid dimensions `[nx, ny, nz]`; `nz = 1` in pillar mode.
    pub fn dims(&self) -> [usize; 3] {
        let nz = match self.mode {
            GridMode::Pillar => 1,
            GridMode::Voxel => self.axis_cells(2),
        };
        [self.axis_cells(0), self.axis_cells(1), nz]
    }

    pub fn cell_count(&self) -> usize {
        self.dims().iter().product()
    }

    /// Row-major linear index (z slowest, x fastest).
    pub fn linear_index(&self, c: CellCoord) -> usize {
        let [nx, ny, _] = self.dims();
        (c[2] * ny + c[1]) * nx + c[0]
    }

    pub fn coord_of(&self, linear: usize) -> CellCoord {
        let [nx, ny, _] = self.dims();
        [linear % nx, (linear / nx) % ny, linear / (nx * ny)]
    }

    pub fn contains_coord(&self, c: CellCoord) -> bool {
        let d = self.dims();
        (0..3).all(|a| c[a] < d[a])
    }

    /// Spatial box `[lo, hi)` of a cell.
    pub fn cell_bounds(&self, c: CellCoord) -> ([f64; 3], [f64; 3]) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            if a == 2 && self.mode == GridMode::Pillar {
                lo[a] = self.range_min[2];
                hi[a] = self.range_max[2];
            } else {
                lo[a] = self.range_min[a] + c[a] as f64 * self.cell_size[a];
                hi[a] = lo[a] + self.cell_size[a];
            }
        }
        (lo, hi)
    }

    pub fn cell_center(&self, c: CellCoord) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (a, o) in out.iter_mut().enumerate() {
            *o = if a == 2 && self.mode == GridMode::Pillar {
                0.5 * (self.range_min[2] + self.range_max[2])
            } else {
                self.range_min[a] + (c[a] as f64 + 0.5) * self.cell_size[a]
            };
        }
        out
    }

    /// Cell of a single point, or `None` if it lies outside `[range_min, range_max)`.
    pub fn locate(&self, p: &[f64]) -> Option<CellCoord> {
        let dims = self.dims();
        let mut c = [0usize; 3];
        for a in 0..3 {
            let v = p[a];
            if v < self.range_min[a] || v >= self.range_max[a] {
                return None;
            }
            if a == 2 && self.mode == GridMode::Pillar {
                continue;
            }
            let idx = ((v - self.range_min[a]) / self.cell_size[a]).floor() as usize;
            if idx >= dims[a] {
                return None;
            }
            c[a] = idx;
        }
        Some(c)
    }

    pub fn decorated_channels(&self, raw: usize) -> usize {
        if self.decorate {
            raw + DECORATION_CHANNELS
        } else {
            raw
        }
    }
}

/// Cell of every point; `None` for points outside the grid range.
pub fn assign_cells(cloud: &PointCloud, spec: &GridSpec) -> Vec<Option<CellCoord>> {
    cloud.iter().map(|p| spec.locate(p)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellBatch {
    pub slots: CellSlots,
    pub coords: Vec<CellCoord>,
    pub spec: GridSpec,
    /// Indices into the source cloud of the points kept in each cell.
    pub kept: Vec<Vec<usize>>,
    pub points_in_range: usize,
}

impl CellBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

pub fn build_cell_batch(cloud: &PointCloud, spec: &GridSpec) -> Result<CellBatch> {
    build_cell_batch_exec(cloud, spec, Execution::default())
}

pub fn build_cell_batch_exec(cloud: &PointCloud, spec: &GridSpec, exec: Execution) -> Result<CellBatch> {
    spec.validate()?;
    let raw = cloud.channel_count();
    let channels = spec.decorated_channels(raw);
    let n_cap = spec.capacity;

    let mut pairs: Vec<(usize, usize)> = assign_cells(cloud, spec)
        .into_iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| (spec.linear_index(c), i)))
        .collect();
    let points_in_range = pairs.len();
    pairs.sort_by_key(|&(lin, _)| lin);

    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (lin, i) in pairs {
        match groups.last_mut() {
            Some((l, pts)) if *l == lin => pts.push(i),
            _ => groups.push((lin, vec![i])),
        }
    }

    if groups.len() > spec.max_cells {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.sort_by(|&a, &b| groups[b].1.len().cmp(&groups[a].1.len()).then(a.cmp(&b)));
        order.truncate(spec.max_cells);
        order.sort_unstable();
        groups = order
            .into_iter()
            .map(|k| std::mem::take(&mut groups[k]))
            .collect();
    }

    let kept: Vec<Vec<usize>> = groups
        .iter()
        .map(|(lin, pts)| truncate_cell(pts, n_cap, spec.overflow, *lin))
        .collect();
    let coords: Vec<CellCoord> = groups.iter().map(|(lin, _)| spec.coord_of(*lin)).collect();

    let stride = n_cap * channels;
    let mut data = vec![0.0; kept.len() * stride];
    par::for_each_chunk(exec, &mut data, stride, |k, out| {
        fill_cell(cloud, spec, coords[k], &kept[k], raw, channels, out);
    });
    let valid = kept.iter().map(Vec::len).collect();
    let slots = if kept.is_empty() {
        CellSlots::empty(n_cap, channels)
    } else {
        CellSlots::new(n_cap, channels, data, valid)?
    };
    Ok(CellBatch {
        slots,
        coords,
        spec: spec.clone(),
        kept,
        points_in_range,
    })
}

fn truncate_cell(points: &[usize], cap: usize, policy: OverflowPolicy, linear: usize) -> Vec<usize> {
    if points.len() <= cap {
        return points.to_vec();
    }
    match policy {
        OverflowPolicy::KeepFirst => points[..cap].to_vec(),
        OverflowPolicy::SeededSubsample { seed } => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (linear as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut picked = rand::seq::index::sample(&mut rng, points.len(), cap).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| points[i]).collect()
        }
    }
}

fn fill_cell(
    cloud: &PointCloud,
    spec: &GridSpec,
    coord: CellCoord,
    kept: &[usize],
    raw: usize,
    channels: usize,
    out: &mut [f64],
) {
    for (slot, &i) in kept.iter().enumerate() {
        out[slot * channels..slot * channels + raw].copy_from_slice(cloud.point(i));
    }
    if !spec.decorate {
        return;
    }
    let mut mean = [0.0; 3];
    for &i in kept {
        let p = cloud.point(i);
        for a in 0..3 {
            mean[a] += p[a];
        }
    }
    let n = kept.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    let center = spec.cell_center(coord);
    for (slot, &i) in kept.iter().enumerate() {
        let p = cloud.point(i);
        let row = &mut out[slot * channels + raw..(slot + 1) * channels];
        row[0] = p[0] - mean[0];
        row[1] = p[1] - mean[1];
        row[2] = p[2] - mean[2];
        row[3] = p[0] - center[0];
        row[4] = p[1] - center[1];
    }
}

/// Dense per-cell feature map: `[ny, nx, C]` for pillars, `[nz, ny, nx, C]` for voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
    pub byte_order: String,
}

impl FeatureMap {
    pub fn zeros(spec: &GridSpec, channels: usize) -> Result<Self> {
        let [nx, ny, nz] = spec.dims();
        let shape = match spec.mode {
            GridMode::Pillar => vec![ny, nx, channels],
            GridMode::Voxel => vec![nz, ny, nx, channels],
        };
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::MapTooLarge(usize::MAX))?;
        if len > MAX_MAP_ELEMENTS {
            return Err(Error::MapTooLarge(len));
        }
        Ok(Self {
            shape,
            data: vec![0.0; len],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn channels(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, c: CellCoord) -> Option<usize> {
        let ch = self.channels();
        let (nz, ny, nx) = match self.shape.len() {
            3 => (1, self.shape[0], self.shape[1]),
            _ => (self.shape[0], self.shape[1], self.shape[2]),
        };
        if c[0] >= nx || c[1] >= ny || c[2] >= nz {
            return None;
        }
        Some(((c[2] * ny + c[1]) * nx + c[0]) * ch)
    }

    pub fn gather(&self, c: CellCoord) -> Option<&[f64]> {
        let ch = self.channels();
        self.offset(c).map(|o| &self.data[o..o + ch])
    }

    pub fn header(&self) -> FeatureMapHeader {
        FeatureMapHeader {
            shape: self.shape.clone(),
            dtype: "f64".into(),
            order: "row-major".into(),
            byte_order: "little".into(),
        }
    }

    /// Writes the raw little-endian blob and its JSON header.
    pub fn write(&self, blob: impl AsRef<Path>, header: impl AsRef<Path>) -> Result<()> {
        let blob = blob.as_ref();
        let header = header.as_ref();
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(blob, bytes).map_err(|e| Error::io(blob, e))?;
        let json = serde_json::to_string_pretty(&self.header())?;
        fs::write(header, json + "\n").map_err(|e| Error::io(header, e))
    }

    pub fn read(blob: impl AsRef<Path>, header: impl AsRef<Path>) -> Result<Self> {
        let blob = blob.as_ref();
        let header = header.as_ref();
        let text = fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
        let h: FeatureMapHeader = serde_json::from_str(&text)?;
        if h.dtype != "f64" {
            return Err(Error::Shape(format!("unsupported dtype {}", h.dtype)));
        }
        let bytes = fs::read(blob).map_err(|e| Error::io(blob, e))?;
        let len: usize = h.shape.iter().product();
        if bytes.len() != len * 8 {
            return Err(Error::Shape(format!(
                "blob has {} bytes, header implies {}",
                bytes.len(),
                len * 8
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self { shape: h.shape, data })
    }
}

/// Writes `features[k]` (row `k` of a `K × channels` array) at `coords[k]`.
pub fn scatter_to_grid(
    features: &[f64],
    channels: usize,
    coords: &[CellCoord],
    spec: &GridSpec,
) -> Result<FeatureMap> {
    if features.len() != coords.len() * channels {
        return Err(Error::Shape(format!(
            "{} feature values for {} cells of {channels} channels",
            features.len(),
            coords.len()
        )));
    }
    let mut map = FeatureMap::zeros(spec, channels)?;
    let mut seen = vec![false; spec.cell_count()];
    for (k, &c) in coords.iter().enumerate() {
        let offset = map.offset(c).ok_or(Error::CoordOutOfRange(c))?;
        let lin = spec.linear_index(c);
        if std::mem::replace(&mut seen[lin], true) {
            return Err(Error::DuplicateCoord(c));
        }
        map.data[offset..offset + channels].copy_from_slice(&features[k * channels..(k + 1) * channels]);
    }
    Ok(map)
}
