use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use sparsevar::metrics::{exclusion_fraction, image_l1, l1_stage_diff, metric_rows_csv};
use sparsevar::oracle::{run_battery, PropertyResult};
use sparsevar::{compare_metrics, cost_report, Mask, RunOutput, ScalarGrid, SparsifierParams, ToyStack};

use crate::config::RunConfig;
use crate::output;
use crate::SweepParam;

pub struct CmdError {
    pub code: u8,
    pub error: anyhow::Error,
}

/// `Ok(false)` means the command ran but something it checks failed.
pub type Outcome = Result<bool, CmdError>;

trait Classify<T> {
    fn config_err(self) -> Result<T, CmdError>;
    fn run_err(self) -> Result<T, CmdError>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config_err(self) -> Result<T, CmdError> {
        self.map_err(|e| CmdError {
            code: 2,
            error: e.into(),
        })
    }

    fn run_err(self) -> Result<T, CmdError> {
        self.map_err(|e| CmdError {
            code: 1,
            error: e.into(),
        })
    }
}

fn load(path: &Path) -> Result<(RunConfig, ToyStack), CmdError> {
    let cfg = RunConfig::load(path).config_err()?;
    let stack = ToyStack::build(&cfg.stack).config_err()?;
    Ok((cfg, stack))
}

fn print_json(value: &impl Serialize) -> Result<(), CmdError> {
    println!("{}", serde_json::to_string_pretty(value).run_err()?);
    Ok(())
}

#[derive(Serialize)]
struct RunBrief {
    dir: PathBuf,
    exclusion_fraction: f64,
    /// Attended pairs over dense pairs for stages from the start stage on.
    pair_ratio: f64,
    total_pair_ratio: f64,
    speedup: f64,
    total_pairs: u64,
    extra_decodes: usize,
}

fn write_run(dir: &Path, run: &RunOutput, cfg: &RunConfig, stack: &ToyStack) -> Result<RunBrief, CmdError> {
    let report = cost_report(&run.stats, cfg.params.alpha, cfg.params.start_stage).run_err()?;
    output::ppm(&dir.join("image.ppm"), &run.image).run_err()?;
    output::text(&dir.join("stats.json"), &(run.stats.to_json() + "\n")).run_err()?;
    output::json(&dir.join("cost_report.json"), &report).run_err()?;
    let sparse = !run.exclusion.stages.is_empty();
    for k in 1..=stack.schedule.stages() {
        let (h, w) = stack.schedule.resolution(k);
        if cfg.dump_masks && sparse {
            let ex = run.exclusion.stage(k);
            let active = ex.map_or_else(|| Mask::filled(h, w, true), |s| s.active.clone());
            output::mask(&dir.join(format!("masks/stage_{k:02}_active.pgm")), &active).run_err()?;
            if let Some(s) = ex {
                output::mask(&dir.join(format!("masks/stage_{k:02}_low.pgm")), &s.low).run_err()?;
            }
        }
        if cfg.dump_maps {
            output::heatmap(&dir.join(format!("maps/mse_stage_{k:02}.pgm")), &run.mse_maps[k - 1]).run_err()?;
        }
    }
    Ok(RunBrief {
        dir: dir.to_path_buf(),
        exclusion_fraction: exclusion_fraction(run),
        pair_ratio: report.pair_ratio,
        total_pair_ratio: report.total_pair_ratio,
        speedup: report.speedup,
        total_pairs: run.stats.total_pairs(),
        extra_decodes: run.stats.extra_decodes,
    })
}

#[derive(Serialize)]
struct RunSummary {
    dense: Option<RunBrief>,
    sparse: Option<RunBrief>,
    /// Mean absolute pixel difference between the sparse and dense images.
    l1_error: Option<f64>,
}

pub fn run(path: &Path, json: bool) -> Outcome {
    let (cfg, stack) = load(path)?;
    let pipe = stack.pipeline();
    let root = &cfg.output_dir;
    let mut summary = RunSummary {
        dense: None,
        sparse: None,
        l1_error: None,
    };
    let dense = if cfg.mode.dense() {
        let d = pipe.run_dense(cfg.params.selected_block).run_err()?;
        summary.dense = Some(write_run(&root.join("dense"), &d, &cfg, &stack)?);
        Some(d)
    } else {
        None
    };
    if cfg.mode.sparse() {
        let s = pipe.run_sparse_with(&cfg.params, cfg.metric).run_err()?;
        summary.sparse = Some(write_run(&root.join("sparse"), &s, &cfg, &stack)?);
        if let Some(d) = &dense {
            summary.l1_error = Some(image_l1(&s.image, &d.image).run_err()?);
        }
    }
    output::json(&root.join("summary.json"), &summary).run_err()?;

    if json {
        print_json(&summary)?;
    } else {
        for (name, b) in [("dense", &summary.dense), ("sparse", &summary.sparse)] {
            if let Some(b) = b {
                println!(
                    "{name}: {} attended pairs, exclusion {:.4}, pair ratio {:.4}, speedup {:.2}x -> {}",
                    b.total_pairs,
                    b.exclusion_fraction,
                    b.pair_ratio,
                    b.speedup,
                    b.dir.display()
                );
            }
        }
        if let Some(l1) = summary.l1_error {
            println!("image l1 error vs dense: {l1:.6}");
        }
    }
    Ok(true)
}

struct SweepPoint {
    label: String,
    params: SparsifierParams,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::Alpha => "alpha",
            SweepParam::StartStage => "P",
            SweepParam::Block => "block",
        }
    }

    fn defaults(self, cfg: &RunConfig) -> Vec<String> {
        let stages = cfg.stack.schedule.stages();
        let ints = |r: std::ops::RangeInclusive<usize>| r.map(|v| v.to_string()).collect();
        match self {
            SweepParam::Tau => ["0.4", "0.5", "0.6", "0.7"].map(String::from).to_vec(),
            SweepParam::Alpha => ints(2..=5),
            SweepParam::StartStage => ints(stages.saturating_sub(3).max(2)..=stages),
            SweepParam::Block => ints(2..=cfg.stack.model.n_blocks),
        }
    }

    fn point(self, raw: &str, base: &SparsifierParams) -> anyhow::Result<SweepPoint> {
        let int = || -> anyhow::Result<usize> {
            raw.parse()
                .map_err(|_| anyhow::anyhow!("{} value {raw:?} is not a nonnegative integer", self.name()))
        };
        let mut params = base.clone();
        let label = match self {
            SweepParam::Tau => {
                params.tau = raw
                    .parse()
                    .map_err(|_| anyhow::anyhow!("tau value {raw:?} is not a number"))?;
                params.tau.to_string()
            }
            SweepParam::Alpha => {
                params.alpha = int()?;
                params.alpha.to_string()
            }
            SweepParam::StartStage => {
                params.start_stage = int()?;
                params.start_stage.to_string()
            }
            SweepParam::Block => {
                params.selected_block = int()?;
                params.selected_block.to_string()
            }
        };
        Ok(SweepPoint { label, params })
    }
}

#[derive(Serialize)]
struct SweepRow {
    value: String,
    exclusion_fraction: f64,
    l1_error: f64,
    /// Whole-run attended pairs over dense pairs.
    pair_ratio: f64,
    /// The same ratio restricted to stages from the start stage on.
    sparse_pair_ratio: f64,
    speedup: f64,
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("value,exclusion_fraction,l1_error,pair_ratio,sparse_pair_ratio,speedup\n");
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{}\n",
            r.value, r.exclusion_fraction, r.l1_error, r.pair_ratio, r.sparse_pair_ratio, r.speedup
        );
    }
    s
}

pub fn sweep(path: &Path, param: SweepParam, values: Option<&str>, jobs: usize, json: bool) -> Outcome {
    let (cfg, stack) = load(path)?;
    let raw: Vec<String> = match values {
        Some(v) => v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect(),
        None => param.defaults(&cfg),
    };
    if raw.is_empty() {
        return Err(anyhow::anyhow!("--values lists no {} values", param.name())).config_err();
    }
    let mut points = Vec::with_capacity(raw.len());
    for r in &raw {
        let p = param.point(r, &cfg.params).config_err()?;
        p.params
            .validate(stack.schedule.stages(), stack.model.config().n_blocks)
            .config_err()?;
        points.push(p);
    }

    let root = cfg.output_dir.join("sweep").join(param.name());
    let dense = stack.pipeline().run_dense(cfg.params.selected_block).run_err()?;
    output::ppm(&root.join("dense/image.ppm"), &dense.image).run_err()?;

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<SweepRow, CmdError>>>> = points.iter().map(|_| Mutex::new(None)).collect();
    let job = |p: &SweepPoint| -> Result<SweepRow, CmdError> {
        let run = stack.pipeline().run_sparse_with(&p.params, cfg.metric).run_err()?;
        let dir = root.join(format!("{}_{}", param.name(), p.label));
        let job_cfg = RunConfig {
            params: p.params.clone(),
            ..cfg.clone()
        };
        let brief = write_run(&dir, &run, &job_cfg, &stack)?;
        Ok(SweepRow {
            value: p.label.clone(),
            exclusion_fraction: brief.exclusion_fraction,
            l1_error: image_l1(&run.image, &dense.image).run_err()?,
            pair_ratio: brief.total_pair_ratio,
            sparse_pair_ratio: brief.pair_ratio,
            speedup: brief.speedup,
        })
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.min(points.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(p) = points.get(i) else { break };
                *slots[i].lock().expect("sweep slot") = Some(job(p));
            });
        }
    });
    let mut rows = Vec::with_capacity(points.len());
    for slot in slots {
        rows.push(slot.into_inner().expect("sweep slot").expect("every point ran")?);
    }
    output::text(&root.join("sweep.csv"), &sweep_csv(&rows)).run_err()?;

    if json {
        print_json(&rows)?;
    } else {
        print!("{}", sweep_csv(&rows));
    }
    Ok(true)
}

pub fn compare(path: &Path, json: bool) -> Outcome {
    let (cfg, stack) = load(path)?;
    let rows = compare_metrics(&stack.pipeline(), &cfg.params, &cfg.compare).run_err()?;
    let csv = metric_rows_csv(&rows);
    output::text(&cfg.output_dir.join("compare_metrics.csv"), &csv).run_err()?;
    if json {
        print_json(&rows)?;
    } else {
        print!("{csv}");
    }
    Ok(true)
}

#[derive(Serialize)]
struct OracleReport {
    passed: bool,
    properties: Vec<PropertyResult>,
}

pub fn oracle(path: &Path, json: bool) -> Outcome {
    let (cfg, stack) = load(path)?;
    let properties = run_battery(&stack, &cfg.params, &cfg.oracle).run_err()?;
    let report = OracleReport {
        passed: properties.iter().all(|p| p.passed),
        properties,
    };
    if json {
        print_json(&report)?;
    } else {
        for p in &report.properties {
            println!("{} {}: {}", if p.passed { "PASS" } else { "FAIL" }, p.name, p.detail);
        }
        let n = report.properties.iter().filter(|p| p.passed).count();
        println!("{n} of {} properties passed", report.properties.len());
    }
    Ok(report.passed)
}

#[derive(Serialize)]
struct MapSummary {
    max: f64,
    mean: f64,
    flat_mean: Option<f64>,
    textured_mean: Option<f64>,
}

#[derive(Serialize)]
struct BlockMap {
    /// The map compares the outputs of blocks `block - 1` and `block`.
    block: usize,
    file: String,
    summary: MapSummary,
}

#[derive(Serialize)]
struct StageObs {
    k: usize,
    h: usize,
    w: usize,
    l1_file: Option<String>,
    l1: Option<MapSummary>,
    blocks: Vec<BlockMap>,
}

pub fn dump_obs(path: &Path, json: bool) -> Outcome {
    let (cfg, stack) = load(path)?;
    let root = cfg.output_dir.join("obs");
    let dense = stack.pipeline().run_dense(cfg.params.selected_block).run_err()?;
    let block_maps = stack.dense_block_maps().run_err()?;
    output::ppm(&root.join("image.ppm"), &dense.image).run_err()?;

    let mut stages = Vec::new();
    for (idx, maps) in block_maps.iter().enumerate() {
        let k = idx + 1;
        let (h, w) = stack.schedule.resolution(k);
        let regions = stack
            .fixture
            .as_ref()
            .map(|f| (f.flat_region(h, w), f.textured_region(h, w)));
        let summarize = |m: &ScalarGrid| MapSummary {
            max: m.max(),
            mean: m.data().iter().sum::<f64>() / m.len() as f64,
            flat_mean: regions.as_ref().and_then(|(f, _)| m.masked_mean(f)),
            textured_mean: regions.as_ref().and_then(|(_, t)| m.masked_mean(t)),
        };
        let mut obs = StageObs {
            k,
            h,
            w,
            l1_file: None,
            l1: None,
            blocks: Vec::with_capacity(maps.len()),
        };
        if k >= 2 {
            let l1 = l1_stage_diff(&dense.accumulated[idx], &dense.accumulated[idx - 1], &stack.decoder).run_err()?;
            let file = format!("l1_stage_{k:02}.pgm");
            output::heatmap(&root.join(&file), &l1).run_err()?;
            obs.l1 = Some(summarize(&l1));
            obs.l1_file = Some(file);
        }
        for (b, m) in maps.iter().enumerate() {
            let block = b + 2;
            let file = format!("mse_stage_{k:02}_block_{block:02}.pgm");
            output::heatmap(&root.join(&file), m).run_err()?;
            obs.blocks.push(BlockMap {
                block,
                file,
                summary: summarize(m),
            });
        }
        stages.push(obs);
    }
    output::json(&root.join("obs.json"), &stages).run_err()?;

    if json {
        print_json(&stages)?;
    } else {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        println!(
            "stage  size     l1 flat/tex        mse(block {}) flat/tex",
            cfg.params.selected_block
        );
        for s in &stages {
            let l1 = s.l1.as_ref();
            let sel = &s.blocks[cfg.params.selected_block - 2].summary;
            println!(
                "{:>5}  {:>7}  {:>8} / {:<8}  {:>8} / {:<8}",
                s.k,
                format!("{}x{}", s.h, s.w),
                fmt(l1.and_then(|m| m.flat_mean)),
                fmt(l1.and_then(|m| m.textured_mean)),
                fmt(sel.flat_mean),
                fmt(sel.textured_mean)
            );
        }
        println!("wrote {}", root.display());
    }
    Ok(true)
}
