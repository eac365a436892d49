//! Column sorting for the sorted projection. Every routine here is a fixed
//! sequence of compare-exchanges, so the result depends only on the values.

#[cfg(target_arch = "x86_64")]
use std::arch::x86_64::{__m128d, __m256d, __m512d};

use crate::simd::{Isa, Lanes};

#[cfg(target_arch = "x86_64")]
type BaseLanes = __m128d;
#[cfg(not(target_arch = "x86_64"))]
type BaseLanes = f64;

/// Batcher odd-even merge sorting network for `n` inputs, as `(lo, hi)` pairs.
pub fn sorting_network(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut p = 1;
    while p < n {
        let mut k = p;
        while k >= 1 {
            let mut j = k % p;
            while j + k < n {
                for i in 0..k.min(n - j - k) {
                    if (i + j) / (2 * p) == (i + j + k) / (2 * p) {
                        pairs.push((i + j, i + j + k));
                    }
                }
                j += 2 * k;
            }
            k /= 2;
        }
        p *= 2;
    }
    pairs
}

/// Sorting networks for every size `0..=capacity`.
#[derive(Debug, Clone)]
pub struct NetworkTable(Vec<Vec<(usize, usize)>>);

impl NetworkTable {
    pub fn new(capacity: usize) -> Self {
        Self((0..=capacity).map(sorting_network).collect())
    }

    /// Sorts every column of a `rows × channels` block in place.
    #[inline(always)]
    pub fn sort_columns(&self, block: &mut [f64], rows: usize, channels: usize) {
        self.sort_columns_with::<BaseLanes>(block, rows, channels);
    }

    #[inline(always)]
    fn sort_columns_with<V: Lanes>(&self, block: &mut [f64], rows: usize, channels: usize) {
        for &(lo, hi) in &self.0[rows] {
            let (top, bottom) = block.split_at_mut(hi * channels);
            compare_exchange_rows::<V>(
                &mut top[lo * channels..(lo + 1) * channels],
                &mut bottom[..channels],
            );
        }
    }
}

/// Element-wise `(a, b) <- (b < a ? b : a, b < a ? a : b)`.
#[inline(always)]
fn compare_exchange_rows<V: Lanes>(a: &mut [f64], b: &mut [f64]) {
    let n = a.len().min(b.len());
    let (pa, pb) = (a.as_mut_ptr(), b.as_mut_ptr());
    let mut i = 0;
    while i + V::WIDTH <= n {
        // SAFETY: `i + WIDTH <= n`, both slices hold `n` values, and callers
        // guarantee `V` is usable on this CPU.
        unsafe {
            let (lo, hi) = V::min_max(V::load(pa.add(i)), V::load(pb.add(i)));
            lo.store(pa.add(i));
            hi.store(pb.add(i));
        }
        i += V::WIDTH;
    }
    for j in i..n {
        // SAFETY: the scalar impl has no requirements.
        let (lo, hi) = unsafe { f64::min_max(a[j], b[j]) };
        a[j] = lo;
        b[j] = hi;
    }
}

/// Callers guarantee `V` is usable on this CPU.
#[inline(always)]
fn cx<V: Lanes, const M: usize>(r: &mut [V; M], a: usize, b: usize) {
    // SAFETY: see above.
    let (lo, hi) = unsafe { V::min_max(r[a], r[b]) };
    r[a] = lo;
    r[b] = hi;
}

/// Loads `V::WIDTH`-wide column strips of an `M × channels` block into an
/// array the compiler keeps in registers, sorts them with `net`, and stores
/// them back. Leftover columns go through `tail` one at a time. Values are
/// canonicalised on the way in.
#[inline(always)]
fn sort_strips<V: Lanes, const M: usize>(
    block: &mut [f64],
    channels: usize,
    net: impl Fn(&mut [V; M]),
    tail: impl Fn(&mut [f64; M]),
) {
    assert!(block.len() >= M * channels);
    let p = block.as_mut_ptr();
    let mut c0 = 0;
    while c0 + V::WIDTH <= channels {
        // SAFETY: rows `< M` and columns `c0..c0 + WIDTH <= channels` lie in
        // `block`; callers guarantee `V` is usable on this CPU.
        unsafe {
            let mut r: [V; M] = std::array::from_fn(|i| V::load(p.add(i * channels + c0)).canonical());
            net(&mut r);
            for (i, v) in r.iter().enumerate() {
                v.store(p.add(i * channels + c0));
            }
        }
        c0 += V::WIDTH;
    }
    for c in c0..channels {
        let mut r: [f64; M] = std::array::from_fn(|i| block[i * channels + c] + 0.0);
        tail(&mut r);
        for (i, &v) in r.iter().enumerate() {
            block[i * channels + c] = v;
        }
    }
}

include!(concat!(env!("OUT_DIR"), "/networks.rs"));

/// Same contract as [`sort_strips`] for any row count, with the network
/// applied to a contiguous copy of each strip. Working on the block in place
/// is much slower: rows a power-of-two apart share 4 KiB offsets and the
/// loads stall behind unrelated stores.
#[inline(always)]
fn sort_strips_table<V: Lanes>(block: &mut [f64], rows: usize, channels: usize, pairs: &[(usize, usize)]) {
    assert!(block.len() >= rows * channels);
    let p = block.as_mut_ptr();
    let mut buf: Vec<V> = Vec::with_capacity(rows);
    let mut c0 = 0;
    while c0 + V::WIDTH <= channels {
        buf.clear();
        // SAFETY: rows `< rows` and columns `c0..c0 + WIDTH <= channels` lie
        // in `block`; callers guarantee `V` is usable on this CPU.
        unsafe {
            buf.extend((0..rows).map(|i| V::load(p.add(i * channels + c0)).canonical()));
            for &(lo, hi) in pairs {
                let (a, b) = V::min_max(buf[lo], buf[hi]);
                buf[lo] = a;
                buf[hi] = b;
            }
            for (i, v) in buf.iter().enumerate() {
                v.store(p.add(i * channels + c0));
            }
        }
        c0 += V::WIDTH;
    }
    let mut col = vec![0.0; rows];
    for c in c0..channels {
        for (i, v) in col.iter_mut().enumerate() {
            *v = block[i * channels + c] + 0.0;
        }
        for &(lo, hi) in pairs {
            // SAFETY: the scalar impl has no requirements.
            let (a, b) = unsafe { f64::min_max(col[lo], col[hi]) };
            col[lo] = a;
            col[hi] = b;
        }
        for (i, &v) in col.iter().enumerate() {
            block[i * channels + c] = v;
        }
    }
}

// One out-of-line copy of each kernel per instruction set.

fn unrolled_base(m: usize, block: &mut [f64], channels: usize) {
    sort_unrolled::<BaseLanes>(m, block, channels)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn unrolled_avx2(m: usize, block: &mut [f64], channels: usize) {
    sort_unrolled::<__m256d>(m, block, channels)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn unrolled_avx512(m: usize, block: &mut [f64], channels: usize) {
    sort_unrolled::<__m512d>(m, block, channels)
}

fn table_base(table: &NetworkTable, block: &mut [f64], rows: usize, channels: usize) {
    sort_strips_table::<BaseLanes>(block, rows, channels, &table.0[rows])
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn table_avx2(table: &NetworkTable, block: &mut [f64], rows: usize, channels: usize) {
    sort_strips_table::<__m256d>(block, rows, channels, &table.0[rows])
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn table_avx512(table: &NetworkTable, block: &mut [f64], rows: usize, channels: usize) {
    sort_strips_table::<__m512d>(block, rows, channels, &table.0[rows])
}

/// Picks a network for a cell of `capacity` slots.
#[derive(Debug, Clone)]
pub struct SortPlan {
    capacity: usize,
    table: NetworkTable,
}

impl SortPlan {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            table: NetworkTable::new(capacity),
        }
    }

    /// Sorts the columns of the last `valid` rows of a `capacity × channels`
    /// block whose other rows are zero; those rows are left zero. `-0.0`
    /// becomes `+0.0` so the result is independent of the network used.
    ///
    /// When an unrolled network of `m` rows fits (`valid <= m <= capacity`),
    /// the `m - valid` zero rows just above the valid ones are set to `-∞`,
    /// sorted along (they stay on top) and then reset to zero.
    #[inline]
    pub(crate) fn sort_valid(&self, isa: Isa, block: &mut [f64], channels: usize, valid: usize) {
        let cap = self.capacity;
        match UNROLLED
            .iter()
            .copied()
            .find(|&m| m >= valid && m <= cap && valid > 1)
        {
            Some(m) => {
                let start = (cap - m) * channels;
                let fill = (m - valid) * channels;
                block[start..start + fill].fill(f64::NEG_INFINITY);
                let rows = &mut block[start..cap * channels];
                match isa {
                    // SAFETY: `isa` is only Avx512/Avx2 when the CPU has it.
                    #[cfg(target_arch = "x86_64")]
                    Isa::Avx512 => unsafe { unrolled_avx512(m, rows, channels) },
                    #[cfg(target_arch = "x86_64")]
                    Isa::Avx2 => unsafe { unrolled_avx2(m, rows, channels) },
                    Isa::Base => unrolled_base(m, rows, channels),
                }
                block[start..start + fill].fill(0.0);
            }
            None => {
                // Also covers `valid == 1`, where the sort itself is a no-op.
                let rows = &mut block[(cap - valid) * channels..];
                match isa {
                    // SAFETY: as above.
                    #[cfg(target_arch = "x86_64")]
                    Isa::Avx512 => unsafe { table_avx512(&self.table, rows, valid, channels) },
                    #[cfg(target_arch = "x86_64")]
                    Isa::Avx2 => unsafe { table_avx2(&self.table, rows, valid, channels) },
                    Isa::Base => table_base(&self.table, rows, valid, channels),
                }
            }
        }
    }
}
