use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pillarkit::pipeline::{featurize as featurize_cloud, Featurized};
use pillarkit::suites::{self, CheckReport, SuiteConfig, SuiteReport};
use pillarkit::toy::{bench_descriptor, build_toy_dataset, train_descriptor, BenchReport, TrainCheckpoint};
use pillarkit::{load_kitti_bin, Activation, AggregationWeights, Descriptor, DescriptorKind, GridMode, Mlp};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{io, CliError};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))?;
    fs::write(path, text + "\n").map_err(io(path))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out).map_err(io(&cfg.out))?;
    Ok(cfg.out.clone())
}

#[derive(Debug, Serialize)]
pub struct FeaturizeSummary {
    pub input: String,
    pub mode: GridMode,
    pub kind: DescriptorKind,
    pub points: usize,
    pub points_in_range: usize,
    pub cells: usize,
    pub grid_cells: usize,
    pub occupancy: f64,
    pub shape: Vec<usize>,
}

/// Seeded descriptor for `input` decorated channels, or the one in `params`.
fn featurize_descriptor(cfg: &RunConfig, input: usize, capacity: usize) -> Result<Descriptor, CliError> {
    let s = &cfg.descriptor;
    let d = match &s.params {
        Some(path) => Descriptor::from_json(&fs::read_to_string(path).map_err(io(path))?)?,
        None => {
            let mut dims = vec![input];
            dims.extend_from_slice(&s.hidden);
            dims.push(s.width);
            let aggregation = if s.per_channel {
                AggregationWeights::unit_last_per_channel(capacity, s.width)
            } else {
                AggregationWeights::unit_last(capacity)
            };
            Descriptor::new(Mlp::random(&dims, Activation::Relu, cfg.seed)?, aggregation)?
        }
    };
    if d.capacity() != capacity {
        return Err(CliError::Config(format!(
            "descriptor expects N = {}, grid has N = {capacity}",
            d.capacity()
        )));
    }
    d.mlp
        .check_input(input)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(d)
}

pub fn featurize(cfg: &RunConfig, input: &Path) -> Result<String, CliError> {
    let started = Instant::now();
    let spec = cfg.grid_spec();
    let cloud = load_kitti_bin(input)?;
    let d = featurize_descriptor(cfg, spec.decorated_channels(cloud.channel_count()), spec.capacity)?;
    let Featurized { batch, map, .. } = featurize_cloud(&cloud, &spec, &d, cfg.descriptor.kind)?;

    let dir = out_dir(cfg)?;
    map.write(dir.join("features.bin"), dir.join("features.json"))?;
    fs::write(dir.join("descriptor.json"), d.to_json()? + "\n").map_err(io(dir.join("descriptor.json")))?;
    let summary = FeaturizeSummary {
        input: input.display().to_string(),
        mode: spec.mode,
        kind: cfg.descriptor.kind,
        points: cloud.len(),
        points_in_range: batch.points_in_range,
        cells: batch.len(),
        grid_cells: spec.cell_count(),
        occupancy: batch.len() as f64 / spec.cell_count() as f64,
        shape: map.shape().to_vec(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(format!(
        "featurize: {} points ({} in range) -> {} {} cells ({:.3}% occupied), {} descriptor, map {:?}, {:.1} ms\nwrote {}",
        summary.points,
        summary.points_in_range,
        summary.cells,
        format!("{:?}", spec.mode).to_lowercase(),
        100.0 * summary.occupancy,
        cfg.descriptor.kind.name(),
        summary.shape,
        started.elapsed().as_secs_f64() * 1e3,
        dir.display()
    ))
}

pub fn train_toy(cfg: &RunConfig, resume: Option<&Path>) -> Result<String, CliError> {
    let data = build_toy_dataset(&cfg.toy)?;
    let resume = match resume {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io(path))?;
            let ck: TrainCheckpoint = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            Some(ck)
        }
        None => None,
    };
    let outcome = train_descriptor(&data, &cfg.train, resume)?;
    let dir = out_dir(cfg)?;
    let mut lines = String::new();
    for record in &outcome.metrics.evals {
        lines += &serde_json::to_string(record).map_err(|e| CliError::Core(e.into()))?;
        lines.push('\n');
    }
    fs::write(dir.join("metrics.jsonl"), lines).map_err(io(dir.join("metrics.jsonl")))?;
    write_json(&dir.join("metrics.json"), &outcome.metrics)?;
    write_json(&dir.join("checkpoint.json"), &outcome.checkpoint)?;
    let m = &outcome.metrics;
    let result = match (m.final_accuracy, m.final_mse) {
        (Some(a), _) => format!("validation accuracy {a:.4}"),
        (None, Some(e)) => format!("validation MSE {e:.6}"),
        _ => "no evaluation".into(),
    };
    Ok(format!(
        "train-toy: {} descriptor, {} steps, final loss {:.5}, {result}, {:.2} s\nwrote {}",
        m.kind.name(),
        outcome.checkpoint.step,
        m.losses.last().copied().unwrap_or(f64::NAN),
        m.wall_clock_s,
        dir.display()
    ))
}

fn suite_line(s: &SuiteReport) -> String {
    let mut line = format!(
        "{:<24} {:>5} cases {:>5} failed  {}  {:.2} s",
        s.name,
        s.cases,
        s.failures,
        if s.pass { "PASS" } else { "FAIL" },
        s.seconds
    );
    if let Some(e) = s.max_relative_error {
        line += &format!("  max rel err {e:.2e}");
    }
    if let Some(f) = &s.first_failure {
        line += &format!("\n    first failure: {f}");
    }
    line
}

fn finish_check(report: &CheckReport, file: &Path) -> Result<String, CliError> {
    write_json(file, report)?;
    let mut text: Vec<String> = report.suites.iter().map(suite_line).collect();
    text.push(format!("wrote {}", file.display()));
    let text = text.join("\n");
    if report.pass {
        Ok(text)
    } else {
        Err(CliError::CheckFailed(text))
    }
}

pub fn check_grad(cfg: &RunConfig) -> Result<String, CliError> {
    let suite = suites::gradient_check(&cfg.suites)?;
    let report = CheckReport {
        seed: cfg.seed,
        pass: suite.pass,
        suites: vec![suite],
    };
    finish_check(&report, &out_dir(cfg)?.join("grad_report.json"))
}

pub fn prop_test(cfg: &RunConfig, inject_fault: bool) -> Result<String, CliError> {
    let suite_cfg = SuiteConfig {
        scramble_sort: inject_fault,
        ..cfg.suites.clone()
    };
    let report = suites::run_all(&suite_cfg)?;
    finish_check(&report, &out_dir(cfg)?.join("check_report.json"))
}

pub fn bench(cfg: &RunConfig, max_threads: Option<usize>) -> Result<String, CliError> {
    let mut bench = cfg.bench.clone();
    if let Some(t) = max_threads {
        bench.threads = bench.threads.min(t);
    }
    let report: BenchReport = bench_descriptor(&bench)?;
    let dir = out_dir(cfg)?;
    write_json(&dir.join("bench.json"), &report)?;
    let mut text = vec![format!(
        "bench: N = {}, C = {} -> {}, {} cells, {} repetitions, {} thread(s)",
        bench.capacity, bench.in_channels, bench.out_channels, bench.cells, bench.repetitions, bench.threads
    )];
    for k in &report.kinds {
        text.push(format!(
            "{:<9} full median {:>9.3} ms p90 {:>9.3} ms | aggregation median {:>9.3} ms p90 {:>9.3} ms",
            k.kind.name(),
            k.full.median_ms,
            k.full.p90_ms,
            k.aggregation.median_ms,
            k.aggregation.p90_ms
        ));
    }
    if let (Some(f), Some(a)) = (report.full_overhead_ratio, report.aggregation_overhead_ratio) {
        text.push(format!("weighted / max: full {f:.3}, aggregation {a:.3}"));
    }
    for p in &report.sweep {
        text.push(format!(
            "sweep N = {:>4}: weighted {:>9.3} ms, max {:>9.3} ms, ratio {:>8.2}",
            p.capacity, p.weighted_ms, p.max_ms, p.ratio
        ));
    }
    text.push(format!(
        "sweep ratio monotone: {}, outputs stable: {}",
        report.sweep_ratio_monotone, report.outputs_stable
    ));
    text.push(format!("wrote {}", dir.join("bench.json").display()));
    Ok(text.join("\n"))
}
