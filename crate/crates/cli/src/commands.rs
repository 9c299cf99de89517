//! One function per subcommand. Output files land under the output root;
//! human-readable summaries go to the supplied writer.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cgrpo_core::curriculum::{schedule_table, write_schedule_csv, Strategy};
use cgrpo_core::difficulty::{read_report, write_report, DifficultyRecord, ReportHeader, Tier, REPORT_FORMAT, REPORT_VERSION};
use cgrpo_core::eval::{evaluate, EvalReport};
use cgrpo_core::io::write_atomic;
use cgrpo_core::synth::{generate_dataset, read_dataset, write_dataset, Band, DatasetHeader, Domain, SceneSample, Split};
use cgrpo_core::trainer::{score_and_tier, train, Preset, RunOptions};
use cgrpo_core::Policy64;
use serde::Serialize;

use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, CliResult};

pub const OUTPUT_ENV: &str = "CGRPO_OUT";
pub const DEFAULT_OUTPUT: &str = "cgrpo-out";

/// Directory every command writes into.
#[derive(Debug, Clone)]
pub struct OutputRoot {
    pub root: PathBuf,
}

impl OutputRoot {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn from_env() -> Self {
        Self::new(std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_OUTPUT.into()))
    }

    /// Joins a relative path onto the root; absolute paths and `..` are
    /// rejected.
    pub fn resolve(&self, rel: &Path) -> CliResult<PathBuf> {
        if rel.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
            return Err(CliError::Config(format!(
                "output path {} must be relative to the output root and stay inside it",
                rel.display()
            )));
        }
        Ok(self.root.join(rel))
    }

    pub fn ensure_parent(&self, path: &Path) -> CliResult<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(())
    }
}

pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p, overrides),
        None => RunConfig::from_overrides(overrides),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub config_hash: String,
    pub count: usize,
    pub per_domain: BTreeMap<Domain, usize>,
    pub per_band: BTreeMap<Domain, BTreeMap<Band, usize>>,
    pub truncated: usize,
    /// Samples with 0, 1, 2 and 3 distractors.
    pub distractors: [usize; 4],
}

pub fn summarize_dataset(samples: &[SceneSample], config_hash: &str) -> DatasetSummary {
    let mut s = DatasetSummary {
        config_hash: config_hash.into(),
        count: samples.len(),
        per_domain: BTreeMap::new(),
        per_band: BTreeMap::new(),
        truncated: 0,
        distractors: [0; 4],
    };
    for x in samples {
        *s.per_domain.entry(x.domain).or_default() += 1;
        *s.per_band.entry(x.domain).or_default().entry(x.knobs.band).or_default() += 1;
        s.truncated += usize::from(x.knobs.truncated);
        s.distractors[(x.knobs.distractors as usize).min(3)] += 1;
    }
    s
}

fn summary_path(dataset: &Path) -> PathBuf {
    let stem = dataset.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    dataset.with_file_name(format!("{stem}.summary.json"))
}

pub fn cmd_gen(cfg: &RunConfig, out: &OutputRoot, rel: &Path, w: &mut dyn Write) -> CliResult<PathBuf> {
    cfg.dataset.validate()?;
    let path = out.resolve(rel)?;
    let hash = cfg.hash();
    let samples = generate_dataset(&cfg.dataset)?;
    let mut buf = Vec::new();
    write_dataset(&mut buf, &samples, &cfg.dataset, &hash)?;
    let summary = summarize_dataset(&samples, &hash);
    out.ensure_parent(&path)?;
    write_atomic(&path, &buf)?;
    write_atomic(&summary_path(&path), &serde_json::to_vec_pretty(&summary).map_err(cgrpo_core::Error::from)?)?;
    writeln!(w, "wrote {} samples to {}", samples.len(), path.display())?;
    for (d, n) in &summary.per_domain {
        writeln!(w, "  domain {d:?}: {n} ({:?})", summary.per_band[d])?;
    }
    writeln!(w, "  truncated: {}, distractors 0/1/2/3: {:?}", summary.truncated, summary.distractors)?;
    Ok(path)
}

fn load_dataset(path: &Path) -> CliResult<(DatasetHeader, Vec<SceneSample>)> {
    let (h, samples) = read_dataset(path)?;
    if samples.iter().enumerate().any(|(i, s)| s.id != i as u64) {
        return Err(CliError::Incompatible(format!("{}: sample ids must run 0..n in order", path.display())));
    }
    Ok((h, samples))
}

fn check_policy_matches(p: &Policy64, header: &DatasetHeader) -> CliResult<()> {
    if p.vocab().bins() != header.bins || p.dim() != header.dim {
        return Err(CliError::Incompatible(format!(
            "checkpoint has B={} d={}, dataset has B={} d={}",
            p.vocab().bins(),
            p.dim(),
            header.bins,
            header.dim
        )));
    }
    Ok(())
}

pub struct ScoreArgs<'a> {
    pub dataset: &'a Path,
    pub checkpoint: &'a Path,
    pub out: &'a Path,
    pub group_size: Option<usize>,
    pub strict: bool,
}

pub fn cmd_score(cfg: &RunConfig, root: &OutputRoot, args: &ScoreArgs, w: &mut dyn Write) -> CliResult<PathBuf> {
    let mut cfg = cfg.clone();
    if let Some(g) = args.group_size {
        cfg.scoring.group_size = g;
    }
    let hash = cfg.hash();
    let (header, samples) = load_dataset(args.dataset)?;
    let (base, ckpt_hash) = Policy64::load(args.checkpoint)?;
    check_policy_matches(&base, &header)?;
    if args.strict && ckpt_hash.as_deref() != Some(hash.as_str()) {
        return Err(CliError::Hash(format!(
            "checkpoint {} was written under config {}, current config is {hash}",
            args.checkpoint.display(),
            ckpt_hash.as_deref().unwrap_or("<none>")
        )));
    }
    let path = root.resolve(args.out)?;
    let (records, (b1, b2)) = score_and_tier(&base, &samples, &cfg.scoring, &cfg.train.sampler()?, cfg.train.seed)?;
    let report_header = ReportHeader {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        config_hash: hash,
        group_size: cfg.scoring.group_size,
        boundaries: [b1, b2],
        count: records.len(),
    };
    let mut buf = Vec::new();
    write_report(&mut buf, &records, &report_header)?;
    root.ensure_parent(&path)?;
    write_atomic(&path, &buf)?;
    let counts = tier_counts(&records);
    writeln!(w, "scored {} samples with G={}", records.len(), cfg.scoring.group_size)?;
    writeln!(w, "tier boundaries: medium >= {b1:.6}, hard >= {b2:.6}")?;
    writeln!(w, "tier counts easy/medium/hard: {}/{}/{}", counts[0], counts[1], counts[2])?;
    writeln!(w, "wrote {}", path.display())?;
    Ok(path)
}

pub fn tier_counts(records: &[DifficultyRecord]) -> [usize; 3] {
    let mut c = [0; 3];
    for r in records {
        if let Some(t) = r.tier {
            c[t.index()] += 1;
        }
    }
    c
}

pub struct TrainArgs<'a> {
    pub dataset: Option<&'a Path>,
    pub report: Option<&'a Path>,
    pub base: Option<&'a Path>,
    /// Existing run directory to continue.
    pub resume: Option<&'a Path>,
    /// Run directory name under `runs/` for a fresh run.
    pub run_name: Option<&'a str>,
    pub dry_run: bool,
}

fn fresh_run_dir(root: &OutputRoot, name: Option<&str>, seed: u64) -> CliResult<PathBuf> {
    let runs = root.resolve(Path::new("runs"))?;
    let base = match name {
        Some(n) => n.to_string(),
        None => {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            format!("run-{secs}-seed{seed}")
        }
    };
    root.resolve(Path::new(&base))?;
    let mut dir = runs.join(&base);
    let mut n = 2;
    while dir.exists() {
        if name.is_some() {
            return Err(CliError::Config(format!("{} already exists; pass --resume to continue it", dir.display())));
        }
        dir = runs.join(format!("{base}-{n}"));
        n += 1;
    }
    Ok(dir)
}

fn print_eval(w: &mut dyn Write, e: &EvalReport) -> std::io::Result<()> {
    let o = &e.overall;
    writeln!(
        w,
        "held-out: n={} mean IoU {:.4}, IoU@{} {:.4}, format violations {:.4}",
        o.count, o.mean_iou, e.threshold, o.hit_rate, o.format_violation_rate
    )?;
    for (t, s) in &e.per_tier {
        writeln!(w, "  tier {t:?}: n={} mean IoU {:.4}, hit {:.4}", s.count, s.mean_iou, s.hit_rate)?;
    }
    for (d, s) in &e.per_domain {
        writeln!(w, "  domain {d:?}: n={} mean IoU {:.4}, hit {:.4}", s.count, s.mean_iou, s.hit_rate)?;
    }
    Ok(())
}

pub fn dry_run_schedule(cfg: &RunConfig, w: &mut dyn Write) -> CliResult<()> {
    let curriculum = cfg.run_spec()?.main_curriculum();
    let every = (curriculum.total_steps / 20).max(1);
    let rows = schedule_table(&curriculum, [1.0 / 3.0; 3], every);
    let mut buf = Vec::new();
    write_schedule_csv(&mut buf, &rows, &cfg.hash())?;
    w.write_all(&buf)?;
    Ok(())
}

/// Trains in a fresh or resumed run directory and returns it.
pub fn cmd_train(cfg: &RunConfig, root: &OutputRoot, args: &TrainArgs, w: &mut dyn Write) -> CliResult<PathBuf> {
    if args.dry_run {
        dry_run_schedule(cfg, w)?;
        return Ok(PathBuf::new());
    }
    let spec = cfg.run_spec()?;
    let samples = match args.dataset {
        Some(p) => {
            let (h, s) = load_dataset(p)?;
            if h.bins != cfg.dataset.bins || h.dim != cfg.dataset.dim {
                return Err(CliError::Incompatible(format!(
                    "dataset has B={} d={}, config has B={} d={}",
                    h.bins, h.dim, cfg.dataset.bins, cfg.dataset.dim
                )));
            }
            s
        }
        None => generate_dataset(&cfg.dataset)?,
    };
    let report = match args.report {
        Some(p) => {
            let (_, records) = read_report(p)?;
            if records.len() != samples.len() || records.iter().any(|r| r.id >= samples.len() as u64) {
                return Err(CliError::Incompatible(format!("{} does not cover the dataset", p.display())));
            }
            Some(records)
        }
        None => None,
    };
    let base = match args.base {
        Some(p) => {
            let (b, _) = Policy64::load(p)?;
            Some(b)
        }
        None => None,
    };
    let (dir, resume) = match args.resume {
        Some(d) => (d.to_path_buf(), true),
        None => (fresh_run_dir(root, args.run_name, cfg.train.seed)?, false),
    };
    std::fs::create_dir_all(&dir)?;
    let saved = dir.join("config.toml");
    if !resume || !saved.exists() {
        write_atomic(&saved, format!("# config_hash={}\n{}", spec.config_hash, cfg.to_toml()).as_bytes())?;
    }
    writeln!(w, "run directory {}", dir.display())?;
    writeln!(w, "config hash {}", spec.config_hash)?;
    let outcome = train::<f64>(&spec, &samples, &dir, RunOptions { resume, halt_after: None, base, report })?;
    if let Some((b1, b2)) = outcome.boundaries {
        let c = tier_counts(&outcome.records);
        writeln!(w, "tiers easy/medium/hard {}/{}/{} (boundaries {b1:.4}, {b2:.4})", c[0], c[1], c[2])?;
    }
    if let Some(e) = &outcome.eval {
        print_eval(w, e)?;
    }
    Ok(dir)
}

/// Reads the configuration saved in a run directory, checking the hash line.
pub fn saved_config(run_dir: &Path) -> CliResult<RunConfig> {
    let path = run_dir.join("config.toml");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = RunConfig::parse(&text, &Overrides::default())?;
    if let Some(h) = text.lines().next().and_then(|l| l.strip_prefix("# config_hash=")) {
        if h != cfg.hash() {
            return Err(CliError::Hash(format!("{} records hash {h}, contents hash to {}", path.display(), cfg.hash())));
        }
    }
    Ok(cfg)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    pub split: Split,
    pub report: Option<&'a Path>,
    pub threshold: f64,
    pub seed: u64,
    pub out: Option<&'a Path>,
}

pub fn cmd_eval(root: &OutputRoot, args: &EvalArgs, w: &mut dyn Write) -> CliResult<EvalReport> {
    let (header, samples) = load_dataset(args.dataset)?;
    let (theta, ckpt_hash) = Policy64::load(args.checkpoint)?;
    check_policy_matches(&theta, &header)?;
    let chosen: Vec<&SceneSample> = samples.iter().filter(|s| args.split.contains(s.id)).collect();
    if chosen.is_empty() {
        return Err(CliError::Config(format!("split {:?} of {} is empty", args.split, args.dataset.display())));
    }
    let tiers: Option<HashMap<u64, Tier>> = match args.report {
        Some(p) => Some(read_report(p)?.1.into_iter().filter_map(|r| r.tier.map(|t| (r.id, t))).collect()),
        None => None,
    };
    let report = evaluate(&theta, &chosen, tiers.as_ref(), args.threshold, args.seed)?;
    print_eval(w, &report)?;
    if let Some(rel) = args.out {
        let path = root.resolve(rel)?;
        let mut v = serde_json::to_value(&report).map_err(cgrpo_core::Error::from)?;
        v["config_hash"] = serde_json::Value::String(ckpt_hash.unwrap_or_default());
        v["dataset_config_hash"] = serde_json::Value::String(header.config_hash);
        root.ensure_parent(&path)?;
        write_atomic(&path, &serde_json::to_vec_pretty(&v).map_err(cgrpo_core::Error::from)?)?;
        writeln!(w, "wrote {}", path.display())?;
    }
    Ok(report)
}

pub fn cmd_schedule(cfg: &RunConfig, root: &OutputRoot, every: usize, out: Option<&Path>, w: &mut dyn Write) -> CliResult<()> {
    let spec = cfg.run_spec()?;
    let curriculum = spec.main_curriculum();
    // tertile tiers split the pool evenly
    let natural = [1.0 / 3.0; 3];
    let rows = schedule_table(&curriculum, natural, every.max(1));
    let mut buf = Vec::new();
    write_schedule_csv(&mut buf, &rows, &spec.config_hash)?;
    match out {
        Some(rel) => {
            let path = root.resolve(rel)?;
            root.ensure_parent(&path)?;
            write_atomic(&path, &buf)?;
            writeln!(w, "wrote {} rows to {}", rows.len(), path.display())?;
        }
        None => w.write_all(&buf)?,
    }
    Ok(())
}

pub fn parse_preset(s: &str) -> CliResult<Preset> {
    s.parse().map_err(|e: cgrpo_core::Error| CliError::Config(e.to_string()))
}

pub fn parse_strategy(s: &str) -> CliResult<Strategy> {
    s.parse().map_err(|e: cgrpo_core::Error| CliError::Config(e.to_string()))
}

pub fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "heldout" => Ok(Split::Heldout),
        "all" => Ok(Split::All),
        _ => Err(CliError::Config(format!("unknown split {s:?}; expected train, heldout or all"))),
    }
}
