use crate::error::{Error, Result};

/// Fixed-capacity point slots for a batch of cells: `K × N × C` values,
/// row-major, with the first `valid[k]` slots of cell `k` holding real points
/// and the rest exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSlots {
    capacity: usize,
    channels: usize,
    data: Vec<f64>,
    valid: Vec<usize>,
}

impl CellSlots {
    pub fn new(capacity: usize, channels: usize, data: Vec<f64>, valid: Vec<usize>) -> Result<Self> {
        if capacity == 0 || channels == 0 {
            return Err(Error::Shape("capacity and channel count must be positive".into()));
        }
        let stride = capacity * channels;
        if data.len() != valid.len() * stride {
            return Err(Error::Shape(format!(
                "{} values for {} cells of {capacity}×{channels}",
                data.len(),
                valid.len()
            )));
        }
        for (k, &n) in valid.iter().enumerate() {
            if n == 0 || n > capacity {
                return Err(Error::Shape(format!(
                    "cell {k}: valid count {n} outside 1..={capacity}"
                )));
            }
            let cell = &data[k * stride..(k + 1) * stride];
            if cell[n * channels..].iter().any(|&v| v != 0.0) {
                return Err(Error::Shape(format!("cell {k}: padding slots are not zero")));
            }
            if let Some(i) = cell.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    point: i / channels,
                    channel: i % channels,
                });
            }
        }
        Ok(Self {
            capacity,
            channels,
            data,
            valid,
        })
    }

    pub fn empty(capacity: usize, channels: usize) -> Self {
        Self {
            capacity,
            channels,
            data: Vec::new(),
            valid: Vec::new(),
        }
    }

    /// Builds a batch from per-cell point lists (each `n_k × channels`).
    pub fn from_cells(capacity: usize, channels: usize, cells: &[Vec<f64>]) -> Result<Self> {
        let stride = capacity * channels;
        let mut data = vec![0.0; cells.len() * stride];
        let mut valid = Vec::with_capacity(cells.len());
        for (k, pts) in cells.iter().enumerate() {
            if pts.len() % channels != 0 || pts.len() > stride {
                return Err(Error::Shape(format!("cell {k}: {} values", pts.len())));
            }
            data[k * stride..k * stride + pts.len()].copy_from_slice(pts);
            valid.push(pts.len() / channels);
        }
        Self::new(capacity, channels, data, valid)
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cell_stride(&self) -> usize {
        self.capacity * self.channels
    }

    pub fn valid_counts(&self) -> &[usize] {
        &self.valid
    }

    pub fn valid_count(&self, k: usize) -> usize {
        self.valid[k]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// All `N × C` slots of cell `k`.
    pub fn cell(&self, k: usize) -> &[f64] {
        let s = self.cell_stride();
        &self.data[k * s..(k + 1) * s]
    }

    /// Permutes the valid slots of cell `k`: new slot `i` takes old slot `order[i]`.
    pub fn permute_cell(&mut self, k: usize, order: &[usize]) {
        let n = self.valid[k];
        assert_eq!(order.len(), n, "permutation must cover the valid slots");
        let c = self.channels;
        let s = self.cell_stride();
        let old = self.data[k * s..k * s + n * c].to_vec();
        for (dst, &src) in order.iter().enumerate() {
            self.data[k * s + dst * c..k * s + (dst + 1) * c].copy_from_slice(&old[src * c..(src + 1) * c]);
        }
    }

    /// A batch holding the given cells, in the given order.
    pub fn select(&self, cells: &[usize]) -> Self {
        let s = self.cell_stride();
        let mut data = Vec::with_capacity(cells.len() * s);
        for &k in cells {
            data.extend_from_slice(self.cell(k));
        }
        Self {
            capacity: self.capacity,
            channels: self.channels,
            data,
            valid: cells.iter().map(|&k| self.valid[k]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_padding_and_counts() {
        assert!(CellSlots::new(2, 1, vec![1.0, 0.0], vec![1]).is_ok());
        assert!(CellSlots::new(2, 1, vec![1.0, 2.0], vec![1]).is_err());
        assert!(CellSlots::new(2, 1, vec![0.0, 0.0], vec![0]).is_err());
        assert!(CellSlots::new(2, 1, vec![0.0, 0.0], vec![3]).is_err());
        assert!(CellSlots::new(2, 1, vec![f64::NAN, 0.0], vec![1]).is_err());
    }

    #[test]
    fn permute_moves_rows() {
        let mut s = CellSlots::from_cells(3, 2, &[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        s.permute_cell(0, &[1, 0]);
        assert_eq!(s.cell(0), &[3.0, 4.0, 1.0, 2.0, 0.0, 0.0]);
    }
}
