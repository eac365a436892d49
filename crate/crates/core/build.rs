//! Emits fully unrolled sorting networks for a few row counts so that a
//! strip of columns can be sorted in registers.

use std::fmt::Write;
use std::path::Path;
use std::{env, fs};

const UNROLLED: [usize; 5] = [2, 4, 8, 16, 32];

/// Batcher odd-even merge network; kept in step with `network::sorting_network`.
fn sorting_network(n: usize) -> Vec<(usize, usize)> {
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

fn main() -> std::fmt::Result {
    let mut src = String::new();
    writeln!(
        src,
        "pub(crate) const UNROLLED: [usize; {}] = {UNROLLED:?};\n",
        UNROLLED.len()
    )?;
    for n in UNROLLED {
        writeln!(
            src,
            "#[inline(always)]\nfn unrolled_{n}<V: Lanes>(r: &mut [V; {n}]) {{"
        )?;
        for (a, b) in sorting_network(n) {
            writeln!(src, "    cx(r, {a}, {b});")?;
        }
        writeln!(src, "}}\n")?;
    }
    writeln!(
        src,
        "/// Sorts the columns of an `m × channels` block with the unrolled network for `m`.\n\
         // The closures pin the generic instantiation for each lane type.\n\
         #[allow(clippy::redundant_closure)]\n\
         #[inline(always)]\n\
         fn sort_unrolled<V: Lanes>(m: usize, block: &mut [f64], channels: usize) {{\n    match m {{"
    )?;
    for n in UNROLLED {
        writeln!(
            src,
            "        {n} => sort_strips::<V, {n}>(\n            block,\n            channels,\n            #[inline(always)] |r| unrolled_{n}(r),\n            #[inline(always)] |r| unrolled_{n}(r),\n        ),"
        )?;
    }
    writeln!(
        src,
        "        _ => unreachable!(\"no unrolled network for {{m}} rows\"),\n    }}\n}}"
    )?;
    let out = Path::new(&env::var("OUT_DIR").expect("OUT_DIR")).join("networks.rs");
    fs::write(out, src).expect("write generated networks");
    println!("cargo::rerun-if-changed=build.rs");
    Ok(())
}
