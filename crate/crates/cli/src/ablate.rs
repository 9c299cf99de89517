//! Ablation sweeps: one training run per (value, seed) cell, summarized into
//! a CSV with per-value aggregate rows.

use std::io::Write;
use std::path::{Path, PathBuf};

use cgrpo_core::curriculum::Strategy;
use cgrpo_core::difficulty::Tier;
use cgrpo_core::eval::EvalReport;
use cgrpo_core::io::write_atomic;
use cgrpo_core::synth::{generate_dataset, SceneSample};
use cgrpo_core::trainer::{train, RunLayout, RunOptions};
use rayon::prelude::*;

use crate::commands::OutputRoot;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Total steps used by the phase-length axis so that every interval fits.
pub const PHASE_AXIS_MIN_STEPS: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Lr,
    AlphaIou,
    BetaKl,
    PhaseLength,
    Strategy,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Lr => "lr",
            Axis::AlphaIou => "alpha_iou",
            Axis::BetaKl => "beta_kl",
            Axis::PhaseLength => "phase_length",
            Axis::Strategy => "strategy",
        }
    }

    /// Default grid, as strings accepted by [`Axis::apply`].
    pub fn default_values(self, cfg: &RunConfig) -> Vec<String> {
        match self {
            Axis::Lr => [0.1, 0.316, 1.0, 3.16, 10.0].iter().map(|f| format!("{}", cfg.train.lr * f)).collect(),
            Axis::AlphaIou => ["0.5", "1", "2"].map(String::from).to_vec(),
            Axis::BetaKl => ["0", "0.04", "0.1", "0.3", "1"].map(String::from).to_vec(),
            Axis::PhaseLength => ["500", "1000", "1500", "2000", "2500"].map(String::from).to_vec(),
            Axis::Strategy => Strategy::ALL.iter().map(|s| s.name().to_string()).collect(),
        }
    }

    /// Configuration of one grid cell.
    pub fn apply(self, base: &RunConfig, value: &str) -> CliResult<RunConfig> {
        let bad = |e: String| CliError::Config(format!("{} value {value:?}: {e}", self.name()));
        let float = || value.parse::<f64>().map_err(|e| bad(e.to_string()));
        let mut c = base.clone();
        match self {
            Axis::Lr => c.train.lr = float()?,
            Axis::AlphaIou => c.reward.alpha_iou = float()?,
            Axis::BetaKl => c.reward.beta_kl = float()?,
            Axis::PhaseLength => {
                c.curriculum.phase_length = None;
                c.curriculum.stage_interval = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
                c.train.total_steps = c.train.total_steps.max(PHASE_AXIS_MIN_STEPS);
                c.curriculum.total_steps = c.train.total_steps;
            }
            Axis::Strategy => c.curriculum.strategy = value.parse().map_err(|e: cgrpo_core::Error| bad(e.to_string()))?,
        }
        c.run_spec()?;
        Ok(c)
    }
}

impl std::str::FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        [Axis::Lr, Axis::AlphaIou, Axis::BetaKl, Axis::PhaseLength, Axis::Strategy]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown axis {s:?}; expected lr, alpha_iou, beta_kl, phase_length or strategy")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub value: String,
    pub seed: u64,
    /// `ok`, `reused` or `failed: <reason>`.
    pub status: String,
    pub final_mean_iou: Option<f64>,
    pub hard_iou: Option<f64>,
    pub format_violation_rate: Option<f64>,
    pub reward_variance: Option<f64>,
    pub steps_to_threshold: Option<usize>,
}

impl CellResult {
    pub fn succeeded(&self) -> bool {
        !self.status.starts_with("failed")
    }
}

pub struct AblateArgs<'a> {
    pub axis: Axis,
    pub values: Option<Vec<String>>,
    pub seeds: Option<Vec<u64>>,
    pub jobs: usize,
    /// CSV path relative to the output root.
    pub out: &'a Path,
}

/// Per-step series read back from a run's metrics file.
struct Series {
    mean_iou: Vec<f64>,
    reward_std: Vec<f64>,
}

fn read_series(path: &Path) -> CliResult<Series> {
    let text = std::fs::read_to_string(path)?;
    let mut s = Series { mean_iou: Vec::new(), reward_std: Vec::new() };
    for line in text.lines().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(cgrpo_core::Error::from)?;
        let get = |k: &str| v[k].as_f64().unwrap_or(f64::NAN);
        s.mean_iou.push(get("mean_iou"));
        s.reward_std.push(get("reward_std"));
    }
    Ok(s)
}

/// First step at which the trailing `window`-step mean of `xs` reaches
/// `threshold`; the step index is the last one in the window.
pub fn steps_to_threshold(xs: &[f64], window: usize, threshold: f64) -> Option<usize> {
    let window = window.max(1);
    if xs.len() < window {
        return None;
    }
    let mut sum: f64 = xs[..window].iter().sum();
    for end in window..=xs.len() {
        if end > window {
            sum += xs[end - 1] - xs[end - 1 - window];
        }
        if sum / window as f64 >= threshold {
            return Some(end - 1);
        }
    }
    None
}

/// Mean of `reward_std^2` over the last tenth of the steps.
pub fn late_reward_variance(reward_std: &[f64]) -> Option<f64> {
    if reward_std.is_empty() {
        return None;
    }
    let tail = (reward_std.len() / 10).max(1);
    let xs = &reward_std[reward_std.len() - tail..];
    Some(xs.iter().map(|s| s * s).sum::<f64>() / xs.len() as f64)
}

fn reusable_eval(layout: &RunLayout, hash: &str) -> Option<EvalReport> {
    let bytes = std::fs::read(layout.eval()).ok()?;
    let v: serde_json::Value = serde_json::from_slice(&bytes).ok()?;
    if v["config_hash"].as_str() != Some(hash) {
        return None;
    }
    serde_json::from_value(v).ok()
}

fn run_cell(cfg: &RunConfig, samples: &[SceneSample], dir: &Path) -> CliResult<(String, EvalReport, Series)> {
    let spec = cfg.run_spec()?;
    let layout = RunLayout::new(dir);
    let (status, eval) = match reusable_eval(&layout, &spec.config_hash) {
        Some(e) => ("reused".to_string(), e),
        None => {
            std::fs::create_dir_all(dir)?;
            write_atomic(&dir.join("config.toml"), format!("# config_hash={}\n{}", spec.config_hash, cfg.to_toml()).as_bytes())?;
            let resume = layout.metrics().exists();
            let out = train::<f64>(&spec, samples, dir, RunOptions { resume, ..RunOptions::default() })?;
            let eval = out.eval.ok_or_else(|| CliError::Config("run ended without evaluation".into()))?;
            ("ok".to_string(), eval)
        }
    };
    let series = read_series(&layout.metrics())?;
    Ok((status, eval, series))
}

fn cell_dir(root: &Path, axis: Axis, value: &str, seed: u64) -> PathBuf {
    let safe: String = value.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
    root.join(axis.name()).join(format!("{safe}-seed{seed}"))
}

/// Runs every cell (skipping finished ones), writes the CSV and returns the
/// per-cell results in grid order.
pub fn cmd_ablate(cfg: &RunConfig, root: &OutputRoot, args: &AblateArgs, w: &mut dyn Write) -> CliResult<Vec<CellResult>> {
    let values = args.values.clone().unwrap_or_else(|| args.axis.default_values(cfg));
    let seeds = args.seeds.clone().unwrap_or_else(|| cfg.ablation.seeds.clone());
    if values.is_empty() || seeds.is_empty() {
        return Err(CliError::Config("ablation needs at least one value and one seed".into()));
    }
    let csv_path = root.resolve(args.out)?;
    let runs_root = root.resolve(Path::new("ablations"))?;
    let mut cells = Vec::new();
    for v in &values {
        let c = args.axis.apply(cfg, v)?;
        for &seed in &seeds {
            let mut cs = c.clone();
            cs.train.seed = seed;
            cells.push((v.clone(), seed, cs));
        }
    }
    let samples = generate_dataset(&cfg.dataset)?;
    let threshold = cfg.ablation.iou_threshold;
    let window = cfg.ablation.window;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|(value, seed, c)| {
                let dir = cell_dir(&runs_root, args.axis, value, *seed);
                match run_cell(c, &samples, &dir) {
                    Ok((status, eval, series)) => CellResult {
                        value: value.clone(),
                        seed: *seed,
                        status,
                        final_mean_iou: Some(eval.overall.mean_iou),
                        hard_iou: eval.per_tier.get(&Tier::Hard).map(|s| s.mean_iou),
                        format_violation_rate: Some(eval.overall.format_violation_rate),
                        reward_variance: late_reward_variance(&series.reward_std),
                        steps_to_threshold: steps_to_threshold(&series.mean_iou, window, threshold),
                    },
                    Err(e) => CellResult {
                        value: value.clone(),
                        seed: *seed,
                        status: format!("failed: {e}").replace([',', '\n'], ";"),
                        final_mean_iou: None,
                        hard_iou: None,
                        format_violation_rate: None,
                        reward_variance: None,
                        steps_to_threshold: None,
                    },
                }
            })
            .collect()
    });
    let csv = render_csv(args.axis, &values, &results, &cfg.hash());
    root.ensure_parent(&csv_path)?;
    write_atomic(&csv_path, csv.as_bytes())?;
    let failed = results.iter().filter(|r| !r.succeeded()).count();
    writeln!(w, "{} cells ({} failed), wrote {}", results.len(), failed, csv_path.display())?;
    Ok(results)
}

fn opt<T: std::fmt::Display>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub const CSV_COLUMNS: &str =
    "axis,value,seed,status,final_mean_iou,hard_iou,format_violation_rate,reward_variance,steps_to_threshold";

/// Cell rows followed by one `seed=mean` row per value, averaging the cells
/// that succeeded.
pub fn render_csv(axis: Axis, values: &[String], results: &[CellResult], config_hash: &str) -> String {
    let mut out = format!("# config_hash={config_hash}\n{CSV_COLUMNS}\n");
    for r in results {
        out += &format!(
            "{},{},{},{},{},{},{},{},{}\n",
            axis.name(),
            r.value,
            r.seed,
            r.status,
            opt(r.final_mean_iou),
            opt(r.hard_iou),
            opt(r.format_violation_rate),
            opt(r.reward_variance),
            opt(r.steps_to_threshold)
        );
    }
    for v in values {
        let rows: Vec<&CellResult> = results.iter().filter(|r| &r.value == v).collect();
        let ok: Vec<&&CellResult> = rows.iter().filter(|r| r.succeeded()).collect();
        let m = |f: fn(&CellResult) -> Option<f64>| mean(ok.iter().filter_map(|r| f(r)));
        out += &format!(
            "{},{},mean,ok {}/{},{},{},{},{},{}\n",
            axis.name(),
            v,
            ok.len(),
            rows.len(),
            opt(m(|r| r.final_mean_iou)),
            opt(m(|r| r.hard_iou)),
            opt(m(|r| r.format_violation_rate)),
            opt(m(|r| r.reward_variance)),
            opt(m(|r| r.steps_to_threshold.map(|s| s as f64)))
        );
    }
    out
}
