//! Acceptance criteria, one pass/fail line each. Runs without the libtest
//! harness so the criteria execute one at a time and the timing criterion
//! does not compete with other tests for the CPU.

use std::process::ExitCode;
use std::time::Instant;

use pillarkit::pipeline::featurize;
use pillarkit::pointcloud::{Extent, GeneratorKind};
use pillarkit::suites::{self, SuiteConfig, SuiteReport};
use pillarkit::toy::{
    bench_descriptor, build_toy_dataset, max_pool_baseline, train_descriptor, BenchConfig, ToyTaskSpec,
    TrainConfig,
};
use pillarkit::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn suite_outcome(r: &SuiteReport, limit_s: Option<f64>) -> Outcome {
    let in_time = limit_s.is_none_or(|l| r.seconds <= l);
    let mut detail = format!("{} cases, {} failures, {:.2} s", r.cases, r.failures, r.seconds);
    if let Some(l) = limit_s {
        detail += &format!(" (limit {l} s)");
    }
    if let Some(f) = &r.first_failure {
        detail += &format!("; first failure: {f}");
    }
    Outcome {
        pass: r.pass && in_time,
        detail,
    }
}

fn permutation_invariance() -> Outcome {
    let cfg = SuiteConfig::default();
    assert!(cfg.cells >= 1000 && cfg.shuffles >= 20);
    let r = suites::permutation_invariance(&cfg).expect("suite runs");
    let mut o = suite_outcome(&r, Some(10.0));
    o.detail = format!("{} shuffles, 3 kinds, bitwise; {}", cfg.shuffles, o.detail);
    o
}

fn special_case() -> Outcome {
    let r = suites::special_case(&SuiteConfig::default()).expect("suite runs");
    let mut o = suite_outcome(&r, None);
    o.pass &= r.cases >= 1000;
    o.detail = format!(
        "w = unit at N-1 vs max, bitwise, partial ReLU cells included; {}",
        o.detail
    );
    o
}

fn sorted_contract() -> Outcome {
    let r = suites::sorted_contract(&SuiteConfig::default()).expect("suite runs");
    let mut o = suite_outcome(&r, None);
    o.pass &= r.cases >= 1000;
    o.detail = format!("column order, multisets, permutations, exact; {}", o.detail);
    o
}

fn gradient_correctness() -> Outcome {
    let cfg = SuiteConfig::default();
    assert!(cfg.grad_configs >= 100);
    assert!(cfg.fd.tolerance <= 1e-5);
    let r = suites::gradient_check(&cfg).expect("suite runs");
    let err = r.max_relative_error.unwrap_or(f64::INFINITY);
    let mut o = suite_outcome(&r, Some(60.0));
    o.pass &= err <= 1e-5;
    o.detail = format!("max relative error {err:.2e} (tolerance 1e-5); {}", o.detail);
    o
}

fn mechanism() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 0..5u64 {
        let data = build_toy_dataset(&ToyTaskSpec {
            seed,
            ..ToyTaskSpec::default()
        })
        .expect("dataset");
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        assert!(cfg.steps <= 2000);
        let started = Instant::now();
        let weighted = train_descriptor(&data, &cfg, None).expect("training").metrics;
        let seconds = started.elapsed().as_secs_f64();
        let baseline = max_pool_baseline(&data, &cfg).expect("baseline");
        let w = weighted.final_accuracy.unwrap_or(0.0);
        let m = baseline.final_accuracy.unwrap_or(1.0);
        let descending = weighted.losses[200] < weighted.losses[0];
        pass &= w >= 0.95 && m <= 0.60 && descending && seconds <= 120.0;
        parts.push(format!(
            "seed {seed}: weighted {w:.3}, max {m:.3}, loss@200 {:.2e} < loss@0 {:.3}, {seconds:.1} s",
            weighted.losses[200], weighted.losses[0]
        ));
    }
    Outcome {
        pass,
        detail: format!(
            "need weighted >= 0.95, max <= 0.60 within 2000 steps, 5/5 seeds; {}",
            parts.join("; ")
        ),
    }
}

fn overhead() -> Outcome {
    let cfg = BenchConfig::default();
    assert!(cfg.repetitions >= 10 && cfg.cells == 10_000 && cfg.capacity == 32 && cfg.out_channels == 64);
    let r = bench_descriptor(&cfg).expect("bench runs");
    let full = r.full_overhead_ratio.expect("weighted and max timed");
    let agg = r.aggregation_overhead_ratio.expect("weighted and max timed");
    let sweep: Vec<String> = r
        .sweep
        .iter()
        .map(|p| format!("N={} {:.2}", p.capacity, p.ratio))
        .collect();
    let ms = |k: DescriptorKind| {
        let t = r.kinds.iter().find(|t| t.kind == k).expect("kind timed");
        format!("{:.1}/{:.1} ms", t.full.median_ms, t.aggregation.median_ms)
    };
    Outcome {
        pass: full <= 1.5 && r.sweep_ratio_monotone && r.outputs_stable,
        detail: format!(
            "full weighted/max {full:.3} (limit 1.5), aggregation-only {agg:.3}, median of {} (full/aggregation: weighted {}, max {}); sweep ratios [{}] monotone: {}",
            cfg.repetitions,
            ms(DescriptorKind::Weighted),
            ms(DescriptorKind::Max),
            sweep.join(", "),
            r.sweep_ratio_monotone
        ),
    }
}

fn io_fidelity() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut exact = 0;
    for i in 0..100 {
        let n = rng.random_range(0..2000);
        let values: Vec<f64> = (0..n * 4)
            .map(|_| rng.random_range(-80.0f32..80.0) as f64)
            .collect();
        let cloud = PointCloud::kitti(values, "mem").expect("cloud");
        let path = dir.path().join(format!("{i}.bin"));
        write_kitti_bin(&cloud, &path).expect("write");
        let back = load_kitti_bin(&path).expect("read");
        if back.values().len() == cloud.values().len()
            && back
                .values()
                .iter()
                .zip(cloud.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
        {
            exact += 1;
        }
    }

    let cloud = generate_synthetic(&SyntheticCloudSpec::new(
        GeneratorKind::UniformBox,
        Extent {
            min: [0.0, -30.0, -2.5],
            max: [60.0, 30.0, 0.5],
        },
        30_000,
        3,
    ))
    .expect("cloud");
    let input = dir.path().join("scene.bin");
    write_kitti_bin(&cloud, &input).expect("write");
    let run = |name: &str| {
        let cloud = load_kitti_bin(&input).expect("read");
        let spec = GridSpec::pillar_default();
        let d =
            Descriptor::default_for(spec.decorated_channels(4), 64, spec.capacity, 11).expect("descriptor");
        let f = featurize(&cloud, &spec, &d, DescriptorKind::Weighted).expect("featurize");
        let blob = dir.path().join(format!("{name}.bin"));
        let header = dir.path().join(format!("{name}.json"));
        f.map.write(&blob, &header).expect("write map");
        (
            std::fs::read(blob).expect("blob"),
            std::fs::read(header).expect("header"),
            f.batch.len(),
        )
    };
    let (a, ha, cells) = run("a");
    let (b, hb, _) = run("b");
    let identical = a == b && ha == hb;
    Outcome {
        pass: exact == 100 && identical && cells > 0,
        detail: format!(
            "KITTI roundtrip exact on {exact}/100 clouds; featurize twice ({cells} pillars, {} MB map): files identical: {identical}",
            a.len() / 1_000_000
        ),
    }
}

fn main() -> ExitCode {
    // libtest arguments (filters, --nocapture) are accepted and ignored;
    // `--list` reports nothing so tooling that enumerates tests keeps working.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [Criterion; 7] = [
        ("permutation invariance", permutation_invariance),
        ("max-pool special case", special_case),
        ("sorted-matrix contract", sorted_contract),
        ("gradient correctness", gradient_correctness),
        ("mechanism demonstration", mechanism),
        ("overhead proxy", overhead),
        ("I/O fidelity", io_fidelity),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {} {:<24} {}  {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
