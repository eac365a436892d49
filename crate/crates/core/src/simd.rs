//! Runtime selection of wider vector units for the per-cell kernels.
//!
//! [`dispatch`] inlines its closure into a function compiled with the extra
//! target features and tells it which unit was picked. No FMA contraction
//! happens, so every path produces the same bits as the baseline build.

/// Instruction set chosen for the current call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Isa {
    Base,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

#[inline(always)]
pub(crate) fn dispatch<R>(f: impl FnOnce(Isa) -> R) -> R {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports the enabled features.
            return unsafe { avx512(|| f(Isa::Avx512)) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { avx2(|| f(Isa::Avx2)) };
        }
    }
    f(Isa::Base)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn avx512<R>(f: impl FnOnce() -> R) -> R {
    f()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn avx2<R>(f: impl FnOnce() -> R) -> R {
    f()
}

/// A register of `f64` lanes.
///
/// # Safety
/// Every method of a vector impl requires the CPU feature of its [`Isa`].
pub(crate) trait Lanes: Copy {
    const WIDTH: usize;

    /// `p` must also be valid for reading `WIDTH` values.
    unsafe fn load(p: *const f64) -> Self;

    /// `p` must also be valid for writing `WIDTH` values.
    unsafe fn store(self, p: *mut f64);

    /// Lane-wise `x + 0.0`, which turns `-0.0` into `+0.0`.
    unsafe fn canonical(self) -> Self;

    /// Lane-wise `(b < a ? b : a, b < a ? a : b)`.
    unsafe fn min_max(a: Self, b: Self) -> (Self, Self);
}

impl Lanes for f64 {
    const WIDTH: usize = 1;

    #[inline(always)]
    unsafe fn load(p: *const f64) -> Self {
        *p
    }

    #[inline(always)]
    unsafe fn store(self, p: *mut f64) {
        *p = self;
    }

    #[inline(always)]
    unsafe fn canonical(self) -> Self {
        self + 0.0
    }

    #[inline(always)]
    unsafe fn min_max(a: Self, b: Self) -> (Self, Self) {
        if b < a {
            (b, a)
        } else {
            (a, b)
        }
    }
}

// `minpd(x, y)` returns `x < y ? x : y` and `maxpd(x, y)` returns
// `x > y ? x : y`, which is exactly the swap rule above, zeros included.
#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    use super::Lanes;

    macro_rules! lanes {
        ($ty:ty, $feat:literal, $width:literal, $load:ident, $store:ident, $add:ident, $zero:ident, $min:ident, $max:ident) => {
            impl Lanes for $ty {
                const WIDTH: usize = $width;

                #[inline]
                #[target_feature(enable = $feat)]
                unsafe fn load(p: *const f64) -> Self {
                    $load(p)
                }

                #[inline]
                #[target_feature(enable = $feat)]
                unsafe fn store(self, p: *mut f64) {
                    $store(p, self)
                }

                #[inline]
                #[target_feature(enable = $feat)]
                unsafe fn canonical(self) -> Self {
                    $add(self, $zero())
                }

                #[inline]
                #[target_feature(enable = $feat)]
                unsafe fn min_max(a: Self, b: Self) -> (Self, Self) {
                    ($min(b, a), $max(a, b))
                }
            }
        };
    }

    lanes!(
        __m128d,
        "sse2",
        2,
        _mm_loadu_pd,
        _mm_storeu_pd,
        _mm_add_pd,
        _mm_setzero_pd,
        _mm_min_pd,
        _mm_max_pd
    );
    lanes!(
        __m256d,
        "avx2",
        4,
        _mm256_loadu_pd,
        _mm256_storeu_pd,
        _mm256_add_pd,
        _mm256_setzero_pd,
        _mm256_min_pd,
        _mm256_max_pd
    );
    lanes!(
        __m512d,
        "avx512f",
        8,
        _mm512_loadu_pd,
        _mm512_storeu_pd,
        _mm512_add_pd,
        _mm512_setzero_pd,
        _mm512_min_pd,
        _mm512_max_pd
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_min_max_matches_scalar_rule() {
        let vals = [-1.5, -0.0, 0.0, 0.25, 3.0, f64::NEG_INFINITY];
        let mut a = Vec::new();
        let mut b = Vec::new();
        for &x in &vals {
            for &y in &vals {
                a.push(x);
                b.push(y);
            }
        }
        // 36 pairs; pad to a multiple of 8.
        a.resize(40, 0.0);
        b.resize(40, 0.0);
        let expect: Vec<(u64, u64)> = a
            .iter()
            .zip(&b)
            .map(|(&x, &y)| {
                // SAFETY: the scalar impl has no requirements.
                let (l, h) = unsafe { f64::min_max(x, y) };
                (l.to_bits(), h.to_bits())
            })
            .collect();
        dispatch(|isa| {
            let got = min_max_all(isa, &a, &b);
            assert_eq!(got, expect, "{isa:?}");
        });
    }

    #[inline(always)]
    fn min_max_all(isa: Isa, a: &[f64], b: &[f64]) -> Vec<(u64, u64)> {
        fn run<V: Lanes>(a: &[f64], b: &[f64]) -> Vec<(u64, u64)> {
            let mut out = Vec::new();
            for i in (0..a.len()).step_by(V::WIDTH) {
                let mut l = vec![0.0; V::WIDTH];
                let mut h = vec![0.0; V::WIDTH];
                // SAFETY: `a.len()` is a multiple of every width and `isa` was detected.
                unsafe {
                    let (lo, hi) = V::min_max(V::load(a.as_ptr().add(i)), V::load(b.as_ptr().add(i)));
                    lo.store(l.as_mut_ptr());
                    hi.store(h.as_mut_ptr());
                }
                out.extend(l.iter().zip(&h).map(|(x, y)| (x.to_bits(), y.to_bits())));
            }
            out
        }
        match isa {
            Isa::Base => run::<f64>(a, b),
            #[cfg(target_arch = "x86_64")]
            Isa::Avx2 => run::<std::arch::x86_64::__m256d>(a, b),
            #[cfg(target_arch = "x86_64")]
            Isa::Avx512 => run::<std::arch::x86_64::__m512d>(a, b),
        }
    }
}
