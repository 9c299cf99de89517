//! Optimization loop: rollouts under the current policy, one Adam ascent step
//! per batch, checkpoints and per-step metrics.
//!
//! [`train`] runs the whole pipeline inside a run directory: a warm-up phase
//! on easy samples produces the base policy, the base policy scores and tiers
//! the main dataset, and the main phase follows the curriculum over it.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::{domain_weight, next_batch, tier_distribution, CurriculumConfig, Strategy, TierPools};
use crate::difficulty::{partition_tiers, score_samples, DifficultyRecord, ReportHeader, ScoringConfig, Tier};
use crate::eval::{evaluate, EvalReport};
use crate::grpo::{batch_objective, objective_gradient, rollout_group, GroupRollout, RewardWeights};
use crate::io::write_atomic;
use crate::optim::{lr_at, Adam, AdamConfig, AdamState};
use crate::policy::{kl_exact, Context, PolicyParams, SamplerConfig};
use crate::rng::{self, Rng, RngState};
use crate::synth::{generate_dataset, DatasetSpec, SceneSample, Split};
use crate::{Error, Result, Scalar};

pub const METRICS_FORMAT: &str = "cgrpo-metrics";
pub const METRICS_VERSION: u32 = 1;

const ROLLOUT_SALT: u64 = 0x726f_6c6c_6f75_7473;
const BATCH_SALT: u64 = 0x6261_7463_6865_7321;
const SCORE_SALT: u64 = 0x7363_6f72_696e_6721;
const EVAL_SALT: u64 = 0x6576_616c_7561_7465;
const BASE_DATA_SALT: u64 = 0x6261_7365_6461_7461;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyInit {
    Zeros,
    /// See [`PolicyParams::format_prior`]; `strength` is the sentinel logit
    /// margin, whatever the value of the constant feature.
    FormatPrior { strength: f64 },
}

impl PolicyInit {
    pub fn build<T: Scalar>(&self, spec: &DatasetSpec) -> Result<PolicyParams<T>> {
        let vocab = spec.vocab()?;
        Ok(match *self {
            PolicyInit::Zeros => PolicyParams::zeros(vocab, spec.dim),
            PolicyInit::FormatPrior { strength } => {
                PolicyParams::format_prior(vocab, spec.dim, 0, strength / spec.bias_feature)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    /// Peak learning rate.
    pub lr: f64,
    /// Rollout groups per step.
    pub batch_groups: usize,
    /// Steps in the main phase.
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub group_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub temperature: f64,
    pub top_p: f64,
    /// Steps between reference refreshes; `None` keeps the policy the phase
    /// started from.
    pub ref_refresh: Option<usize>,
    pub init: PolicyInit,
    /// Steps of the easy warm-up phase; zero skips it.
    pub base_steps: usize,
    /// Size of the easy warm-up dataset.
    pub base_samples: u64,
    pub eval_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let (lr, batch_groups, total_steps) = match preset {
            Preset::Desk => (2e-2, 16, 2000),
            Preset::Paper => (5e-7, 32, 5000),
        };
        Self {
            preset,
            lr,
            batch_groups,
            total_steps,
            warmup_fraction: 0.1,
            group_size: 8,
            seed: 0,
            adam: AdamConfig::default(),
            temperature: 1.0,
            top_p: 1.0,
            ref_refresh: None,
            init: PolicyInit::FormatPrior { strength: 4.0 },
            base_steps: 500,
            base_samples: 1000,
            eval_threshold: crate::eval::DEFAULT_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction must lie in (0, 1), got {}", self.warmup_fraction));
        }
        if self.batch_groups == 0 {
            return bad("batch_groups must be at least 1".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.group_size < 2 {
            return bad(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if self.ref_refresh == Some(0) {
            return bad("ref_refresh must be positive when set".into());
        }
        if self.base_steps > 0 && self.base_samples < 5 {
            return bad("warm-up phase needs at least 5 samples".into());
        }
        if let PolicyInit::FormatPrior { strength } = self.init {
            if !strength.is_finite() {
                return bad("format prior strength must be finite".into());
            }
        }
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            return bad(format!("eval_threshold must lie in [0, 1], got {}", self.eval_threshold));
        }
        self.adam.validate()?;
        self.sampler().map(|_| ())
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        SamplerConfig::new(self.temperature, self.top_p)
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        lr_at(step, self.lr, total, self.warmup_fraction)
    }
}

/// One record per optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub lr: f64,
    pub mean_reward: f64,
    pub mean_iou: f64,
    pub format_rate: f64,
    /// Exact KL to the reference, averaged over the batch contexts.
    pub kl_ref: f64,
    pub grad_norm: f64,
    pub objective: f64,
    /// Mean reward standard deviation over non-degenerate groups.
    pub reward_std: f64,
    pub degenerate_frac: f64,
    pub p_easy: f64,
    pub p_med: f64,
    pub p_hard: f64,
    pub w_b: f64,
    /// Kept out of the metrics file so that file stays reproducible; written
    /// to the timing file instead.
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub grad_norm: f64,
    pub objective: f64,
}

/// Gradient of the batch objective at `theta`, which is also the policy the
/// groups were sampled from, followed by one Adam ascent step.
pub fn train_step<T: Scalar>(
    theta: &mut PolicyParams<T>,
    groups: &[GroupRollout<T>],
    reference: &PolicyParams<T>,
    weights: &RewardWeights,
    adam: &mut Adam<T>,
    lr: f64,
    step: usize,
) -> Result<StepOutcome> {
    let objective = batch_objective(theta, groups, reference, weights).as_f64();
    let grad = objective_gradient(theta, groups, reference, weights);
    if grad.as_slice().iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { step });
    }
    let grad_norm = grad.as_slice().iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    adam.ascend(theta, &grad, lr);
    Ok(StepOutcome { grad_norm, objective })
}

/// Rollout stream for one batch slot.
fn rollout_rng(seed: u64, phase: u64, step: usize, slot: usize) -> Rng {
    rng::derived(seed ^ ROLLOUT_SALT, (phase << 56) | ((step as u64) << 20) | slot as u64)
}

/// Samples one group per id under `old`. Each slot has its own stream, so the
/// result does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn rollout_batch<T: Scalar>(
    old: &PolicyParams<T>,
    samples: &[SceneSample],
    ids: &[u64],
    cfg: &TrainConfig,
    weights: &RewardWeights,
    phase: u64,
    step: usize,
) -> Result<Vec<GroupRollout<T>>> {
    let sampler = cfg.sampler()?;
    ids.par_iter()
        .enumerate()
        .map(|(slot, &id)| {
            let s = &samples[id as usize];
            let x = Context::<T>::from_f64(&s.x)?;
            let mut r = rollout_rng(cfg.seed, phase, step, slot);
            rollout_group(old, id, x, s.gt.cast(), cfg.group_size, &sampler, weights, &mut r)
        })
        .collect()
}

/// Everything that evolves during a phase and is saved in checkpoints.
#[derive(Debug, Clone)]
pub struct PhaseState<T> {
    pub step: usize,
    pub theta: PolicyParams<T>,
    pub reference: PolicyParams<T>,
    pub adam: Adam<T>,
    pub batch_rng: Rng,
    /// Tier assignment from the latest re-scoring, if any.
    pub rescored: Option<Vec<DifficultyRecord>>,
}

impl<T: Scalar> PhaseState<T> {
    pub fn new(theta: PolicyParams<T>, cfg: &TrainConfig, phase: u64) -> Self {
        let n = theta.len();
        Self {
            step: 0,
            reference: theta.snapshot(),
            theta,
            adam: Adam::new(cfg.adam, n),
            batch_rng: rng::derived(cfg.seed ^ BATCH_SALT, phase),
            rescored: None,
        }
    }
}

/// Data and schedule of one training phase.
pub struct Phase<'a> {
    /// Distinguishes the random streams of different phases.
    pub key: u64,
    pub curriculum: CurriculumConfig,
    /// Indexed by sample id.
    pub samples: &'a [SceneSample],
    /// Tier and domain pools of the ids the phase may draw.
    pub pools: TierPools,
    /// Re-scoring at stage boundaries when the curriculum asks for it.
    pub rescore: Option<&'a ScoringConfig>,
}

/// Pools over the training split.
pub fn train_pools(records: &[DifficultyRecord]) -> Result<TierPools> {
    TierPools::from_records(records.iter().filter(|r| Split::Train.contains(r.id)))
}

fn summarize<T: Scalar>(
    groups: &[GroupRollout<T>],
    theta: &PolicyParams<T>,
    reference: &PolicyParams<T>,
) -> (f64, f64, f64, f64, f64, f64) {
    let n = groups.len() as f64;
    let mean = |f: &dyn Fn(&GroupRollout<T>) -> f64| groups.iter().map(f).sum::<f64>() / n;
    let kl = groups.par_iter().map(|g| kl_exact(theta, reference, &g.context).as_f64()).sum::<f64>() / n;
    let live: Vec<f64> = groups.iter().filter(|g| !g.degenerate).map(|g| g.reward_std().as_f64()).collect();
    let reward_std = if live.is_empty() { 0.0 } else { live.iter().sum::<f64>() / live.len() as f64 };
    let degenerate = groups.iter().filter(|g| g.degenerate).count() as f64 / n;
    (
        mean(&|g| g.mean_reward().as_f64()),
        mean(&|g| g.mean_iou().as_f64()),
        mean(&|g| g.format_rate().as_f64()),
        kl,
        reward_std,
        degenerate,
    )
}

/// Runs `state` forward to the end of the phase, or to `halt_after` steps.
/// `on_step` sees every record after its update has been applied.
pub fn run_phase<T: Scalar>(
    state: &mut PhaseState<T>,
    phase: &mut Phase<'_>,
    cfg: &TrainConfig,
    weights: &RewardWeights,
    halt_after: Option<usize>,
    mut on_step: impl FnMut(&TrainMetrics, &PhaseState<T>) -> Result<()>,
) -> Result<()> {
    let total = phase.curriculum.total_steps;
    let interval = phase.curriculum.interval();
    let end = halt_after.map_or(total, |h| h.min(total));
    if let Some(records) = &state.rescored {
        phase.pools = train_pools(records)?;
    }
    while state.step < end {
        let step = state.step;
        let started = Instant::now();
        if let Some(sc) = phase.rescore {
            if phase.curriculum.rescore_each_stage && step > 0 && step.is_multiple_of(interval) {
                let records = rescore(&state.theta, phase.samples, sc, cfg, phase.key, step)?;
                phase.pools = train_pools(&records)?;
                state.rescored = Some(records);
            }
        }
        if let Some(k) = cfg.ref_refresh {
            if step > 0 && step.is_multiple_of(k) {
                state.reference = state.theta.snapshot();
            }
        }
        let natural = phase.pools.natural_proportions();
        let probs = tier_distribution(step, &phase.curriculum, natural);
        let ids = next_batch(step, &phase.curriculum, &phase.pools, cfg.batch_groups, &mut state.batch_rng)?;
        let groups = rollout_batch(&state.theta, phase.samples, &ids, cfg, weights, phase.key, step)?;
        let (mean_reward, mean_iou, format_rate, kl_ref, reward_std, degenerate_frac) =
            summarize(&groups, &state.theta, &state.reference);
        let lr = cfg.lr_at(step, total);
        let out = train_step(&mut state.theta, &groups, &state.reference, weights, &mut state.adam, lr, step)?;
        state.step += 1;
        let metrics = TrainMetrics {
            step,
            lr,
            mean_reward,
            mean_iou,
            format_rate,
            kl_ref,
            grad_norm: out.grad_norm,
            objective: out.objective,
            reward_std,
            degenerate_frac,
            p_easy: probs[0],
            p_med: probs[1],
            p_hard: probs[2],
            w_b: domain_weight(step, &phase.curriculum),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&metrics, state)?;
    }
    Ok(())
}

fn rescore<T: Scalar>(
    theta: &PolicyParams<T>,
    samples: &[SceneSample],
    sc: &ScoringConfig,
    cfg: &TrainConfig,
    phase: u64,
    step: usize,
) -> Result<Vec<DifficultyRecord>> {
    let seed = cfg.seed ^ SCORE_SALT ^ (phase << 56) ^ step as u64;
    let mut records = score_samples(theta, samples, sc.group_size, &cfg.sampler()?, &sc.weights, seed)?;
    partition_tiers(&mut records, sc.quantiles())?;
    Ok(records)
}

/// Scores every sample with `base` and assigns tiers. Records come back in
/// ascending score order with the tier boundary scores.
pub fn score_and_tier<T: Scalar>(
    base: &PolicyParams<T>,
    samples: &[SceneSample],
    sc: &ScoringConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<(Vec<DifficultyRecord>, (f64, f64))> {
    sc.validate()?;
    let mut records = score_samples(base, samples, sc.group_size, sampler, &sc.weights, seed ^ SCORE_SALT)?;
    let bounds = partition_tiers(&mut records, sc.quantiles())?;
    Ok((records, bounds))
}

/// Whole-pipeline inputs.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub train: TrainConfig,
    pub curriculum: CurriculumConfig,
    pub reward: RewardWeights,
    pub scoring: ScoringConfig,
    pub dataset: DatasetSpec,
    pub config_hash: String,
}

impl RunSpec {
    /// Curriculum settings for the main phase, with its length taken from
    /// the train config.
    pub fn main_curriculum(&self) -> CurriculumConfig {
        CurriculumConfig { total_steps: self.train.total_steps, ..self.curriculum.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.main_curriculum().validate()?;
        self.reward.validate()?;
        self.scoring.validate()?;
        self.dataset.validate()
    }

    pub fn base_dataset(&self) -> DatasetSpec {
        self.dataset.easy_variant(self.train.base_samples, self.dataset.seed ^ BASE_DATA_SALT)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop after this many main-phase steps, as if interrupted.
    pub halt_after: Option<usize>,
    /// Skip the warm-up phase and start from this policy.
    pub base: Option<PolicyParams<f64>>,
    /// Skip scoring and use these tiered records.
    pub report: Option<Vec<DifficultyRecord>>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome<T> {
    pub theta: PolicyParams<T>,
    /// Held-out evaluation; absent when the run halted early.
    pub eval: Option<EvalReport>,
    pub records: Vec<DifficultyRecord>,
    pub boundaries: Option<(f64, f64)>,
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn base_policy(&self) -> PathBuf {
        self.root.join("base_policy.txt")
    }
    pub fn base_metrics(&self) -> PathBuf {
        self.root.join("base_metrics.jsonl")
    }
    pub fn difficulty(&self) -> PathBuf {
        self.root.join("difficulty.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.csv")
    }
    pub fn schedule(&self) -> PathBuf {
        self.root.join("schedule.csv")
    }
    pub fn final_policy(&self) -> PathBuf {
        self.root.join("final_policy.txt")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.json")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.checkpoints().join(format!("step-{step:07}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub phase: String,
    pub total_steps: usize,
}

/// Progress saved with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointState {
    pub config_hash: String,
    pub step: usize,
    pub rescored: Option<Vec<DifficultyRecord>>,
}

fn json_line<S: Serialize>(v: &S) -> Result<String> {
    Ok(serde_json::to_string(v)? + "\n")
}

/// Steps at which the main phase saves a checkpoint: every tenth of the run
/// and the last step.
pub fn is_checkpoint_step(step: usize, total: usize) -> bool {
    let every = (total / 10).max(1);
    step.is_multiple_of(every) || step == total
}

pub fn save_checkpoint<T: Scalar>(layout: &RunLayout, state: &PhaseState<T>, config_hash: &str) -> Result<()> {
    let dir = layout.checkpoint(state.step);
    let tmp = layout.checkpoints().join(format!(".tmp-step-{:07}", state.step));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    state.theta.save(&tmp.join("policy.txt"), Some(config_hash))?;
    state.reference.save(&tmp.join("reference.txt"), Some(config_hash))?;
    fs::write(tmp.join("optimizer.json"), serde_json::to_vec(&state.adam.state())?)?;
    fs::write(tmp.join("rng.json"), serde_json::to_vec(&RngState::capture(&state.batch_rng))?)?;
    let progress =
        CheckpointState { config_hash: config_hash.to_string(), step: state.step, rescored: state.rescored.clone() };
    fs::write(tmp.join("state.json"), serde_json::to_vec(&progress)?)?;
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::rename(&tmp, &dir)?;
    Ok(())
}

/// Latest complete checkpoint directory, if any.
pub fn latest_checkpoint(layout: &RunLayout) -> Result<Option<PathBuf>> {
    let dir = layout.checkpoints();
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(step) = name.strip_prefix("step-").and_then(|s| s.parse::<usize>().ok()) {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path, cfg: &TrainConfig, config_hash: &str) -> Result<PhaseState<T>> {
    let progress: CheckpointState = serde_json::from_slice(&fs::read(dir.join("state.json"))?)?;
    if progress.config_hash != config_hash {
        return Err(Error::HashMismatch { expected: config_hash.to_string(), found: progress.config_hash });
    }
    let (theta, _) = PolicyParams::<T>::load(&dir.join("policy.txt"))?;
    let (reference, _) = PolicyParams::<T>::load(&dir.join("reference.txt"))?;
    if !theta.same_shape(&reference) {
        return Err(Error::Incompatible("checkpoint policy and reference differ in shape".into()));
    }
    let adam_state: AdamState = serde_json::from_slice(&fs::read(dir.join("optimizer.json"))?)?;
    let adam = Adam::from_state(cfg.adam, adam_state, theta.len())?;
    let rng_state: RngState = serde_json::from_slice(&fs::read(dir.join("rng.json"))?)?;
    Ok(PhaseState {
        step: progress.step,
        theta,
        reference,
        adam,
        batch_rng: rng_state.restore()?,
        rescored: progress.rescored,
    })
}

fn check_header_hash(path: &Path, config_hash: &str) -> Result<bool> {
    if !path.exists() {
        return Ok(false);
    }
    let mut first = String::new();
    BufReader::new(fs::File::open(path)?).read_line(&mut first)?;
    let v: serde_json::Value = serde_json::from_str(&first)
        .map_err(|e| Error::Format { path: path.to_path_buf(), msg: format!("header: {e}") })?;
    match v.get("config_hash").and_then(|h| h.as_str()) {
        Some(h) if h == config_hash => Ok(true),
        Some(h) => Err(Error::HashMismatch { expected: config_hash.to_string(), found: h.to_string() }),
        None => Err(Error::Format { path: path.to_path_buf(), msg: "header has no config_hash".into() }),
    }
}

/// Warm-up phase on easy samples.
pub fn train_base<T: Scalar>(
    spec: &RunSpec,
    mut on_step: impl FnMut(&TrainMetrics) -> Result<()>,
) -> Result<PolicyParams<T>> {
    let init = spec.train.init.build::<T>(&spec.dataset)?;
    if spec.train.base_steps == 0 {
        return Ok(init);
    }
    let data_spec = spec.base_dataset();
    let samples = generate_dataset(&data_spec)?;
    let mut pools = TierPools::default();
    for s in samples.iter().filter(|s| Split::Train.contains(s.id)) {
        pools.insert(s.id, Tier::Easy, s.domain);
    }
    let curriculum = CurriculumConfig {
        total_steps: spec.train.base_steps,
        stage_interval: spec.train.base_steps,
        phase_length: None,
        strategy: Strategy::FullDirect,
        rescore_each_stage: false,
        ..CurriculumConfig::default()
    };
    let mut phase = Phase { key: 0, curriculum, samples: &samples, pools, rescore: None };
    let mut state = PhaseState::new(init, &spec.train, 0);
    run_phase(&mut state, &mut phase, &spec.train, &spec.reward, None, |m, _| on_step(m))?;
    Ok(state.theta)
}

fn metrics_header(spec: &RunSpec, phase: &str, total: usize) -> MetricsHeader {
    MetricsHeader {
        format: METRICS_FORMAT.into(),
        version: METRICS_VERSION,
        config_hash: spec.config_hash.clone(),
        phase: phase.into(),
        total_steps: total,
    }
}

/// Keeps the header and the records of steps below `step`.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let kept: String = text.lines().take(step + 1).map(|l| format!("{l}\n")).collect();
    if kept.lines().count() != step + 1 {
        return Err(Error::Format { path: path.to_path_buf(), msg: format!("fewer than {step} records to resume from") });
    }
    write_atomic(path, kept.as_bytes())
}

/// Runs warm-up, scoring and the main phase inside `root`; see the module
/// docs. With `opts.resume`, finished artifacts whose config hash matches are
/// reused and the main phase continues from its latest checkpoint.
pub fn train<T: Scalar>(
    spec: &RunSpec,
    main_samples: &[SceneSample],
    root: &Path,
    opts: RunOptions,
) -> Result<RunOutcome<T>> {
    spec.validate()?;
    if main_samples.iter().enumerate().any(|(i, s)| s.id != i as u64) {
        return Err(Error::Config("dataset ids must be 0..n in order".into()));
    }
    let layout = RunLayout::new(root);
    fs::create_dir_all(root)?;
    if !opts.resume && layout.metrics().exists() {
        return Err(Error::Config(format!("{} already holds a run; resume it or pick another directory", root.display())));
    }
    let hash = spec.config_hash.as_str();
    let sampler = spec.train.sampler()?;

    // warm-up
    let base: PolicyParams<T> = if let Some(b) = &opts.base {
        PolicyParams::from_weights(b.vocab(), b.dim(), b.as_slice().iter().map(|w| T::of(*w)).collect())?
    } else if opts.resume && layout.base_policy().exists() {
        let (p, h) = PolicyParams::<T>::load(&layout.base_policy())?;
        if h.as_deref() != Some(hash) {
            return Err(Error::HashMismatch { expected: hash.into(), found: h.unwrap_or_default() });
        }
        p
    } else {
        let mut lines = json_line(&metrics_header(spec, "base", spec.train.base_steps))?;
        let p = train_base::<T>(spec, |m| {
            lines += &json_line(m)?;
            Ok(())
        })?;
        write_atomic(&layout.base_metrics(), lines.as_bytes())?;
        p.save(&layout.base_policy(), Some(hash))?;
        p
    };
    if base.vocab() != spec.dataset.vocab()? || base.dim() != spec.dataset.dim {
        return Err(Error::Incompatible("base policy does not match the dataset vocabulary or dimension".into()));
    }

    // scoring
    let mut boundaries = None;
    let records = if let Some(r) = opts.report.clone() {
        r
    } else if opts.resume && check_header_hash(&layout.difficulty(), hash)? {
        crate::difficulty::read_report(&layout.difficulty())?.1
    } else {
        let (records, bounds) = score_and_tier(&base, main_samples, &spec.scoring, &sampler, spec.train.seed)?;
        let header = ReportHeader {
            format: crate::difficulty::REPORT_FORMAT.into(),
            version: crate::difficulty::REPORT_VERSION,
            config_hash: hash.into(),
            group_size: spec.scoring.group_size,
            boundaries: [bounds.0, bounds.1],
            count: records.len(),
        };
        let mut buf = Vec::new();
        crate::difficulty::write_report(&mut buf, &records, &header)?;
        write_atomic(&layout.difficulty(), &buf)?;
        boundaries = Some(bounds);
        records
    };
    if records.len() != main_samples.len() {
        return Err(Error::Incompatible(format!(
            "difficulty report covers {} samples, dataset has {}",
            records.len(),
            main_samples.len()
        )));
    }

    // main phase
    let curriculum = spec.main_curriculum();
    let total = curriculum.total_steps;
    let pools = if curriculum.strategy.needs_tiers() || records.iter().all(|r| r.tier.is_some()) {
        train_pools(&records)?
    } else {
        let mut p = TierPools::default();
        for s in main_samples.iter().filter(|s| Split::Train.contains(s.id)) {
            p.insert(s.id, Tier::Medium, s.domain);
        }
        p
    };
    let rows = crate::curriculum::schedule_table(&curriculum, pools.natural_proportions(), 1);
    let mut buf = Vec::new();
    crate::curriculum::write_schedule_csv(&mut buf, &rows, hash)?;
    write_atomic(&layout.schedule(), &buf)?;

    let mut state = match (opts.resume, latest_checkpoint(&layout)?) {
        (true, Some(dir)) => {
            let st = load_checkpoint::<T>(&dir, &spec.train, hash)?;
            check_header_hash(&layout.metrics(), hash)?;
            truncate_metrics(&layout.metrics(), st.step)?;
            let timing = fs::read_to_string(layout.timing()).unwrap_or_default();
            let kept: String = timing.lines().take(st.step + 1).map(|l| format!("{l}\n")).collect();
            write_atomic(&layout.timing(), kept.as_bytes())?;
            st
        }
        _ => {
            let st = PhaseState::new(base.clone(), &spec.train, 1);
            write_atomic(&layout.metrics(), json_line(&metrics_header(spec, "main", total))?.as_bytes())?;
            write_atomic(&layout.timing(), b"step,wall_ms\n")?;
            if fs::metadata(layout.checkpoints()).is_ok() {
                fs::remove_dir_all(layout.checkpoints())?;
            }
            save_checkpoint(&layout, &st, hash)?;
            st
        }
    };

    let mut metrics_file = fs::OpenOptions::new().append(true).open(layout.metrics())?;
    let mut timing_file = fs::OpenOptions::new().append(true).open(layout.timing())?;
    let mut phase = Phase {
        key: 1,
        curriculum,
        samples: main_samples,
        pools,
        rescore: Some(&spec.scoring),
    };
    run_phase(&mut state, &mut phase, &spec.train, &spec.reward, opts.halt_after, |m, st| {
        metrics_file.write_all(json_line(m)?.as_bytes())?;
        writeln!(timing_file, "{},{:.3}", m.step, m.wall_ms)?;
        if is_checkpoint_step(st.step, total) {
            metrics_file.flush()?;
            timing_file.flush()?;
            save_checkpoint(&layout, st, hash)?;
        }
        Ok(())
    })?;
    metrics_file.flush()?;

    if state.step < total {
        return Ok(RunOutcome { theta: state.theta, eval: None, records, boundaries });
    }
    state.theta.save(&layout.final_policy(), Some(hash))?;
    let heldout: Vec<&SceneSample> = main_samples.iter().filter(|s| Split::Heldout.contains(s.id)).collect();
    let tiers: HashMap<u64, Tier> = records.iter().filter_map(|r| r.tier.map(|t| (r.id, t))).collect();
    let report = evaluate(&state.theta, &heldout, Some(&tiers), spec.train.eval_threshold, spec.train.seed ^ EVAL_SALT)?;
    let mut eval_json = serde_json::to_value(&report)?;
    eval_json["config_hash"] = serde_json::Value::String(hash.into());
    write_atomic(&layout.eval(), &serde_json::to_vec_pretty(&eval_json)?)?;
    Ok(RunOutcome { theta: state.theta, eval: Some(report), records, boundaries })
}

/// Held-out evaluation seed used by [`train`].
pub fn eval_seed(cfg: &TrainConfig) -> u64 {
    cfg.seed ^ EVAL_SALT
}
