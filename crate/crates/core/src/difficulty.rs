//! Rollout-based difficulty scoring and tier partitioning.
//!
//! A base policy draws `G` candidates per sample. The spread of their IoUs,
//! their mean, and the fraction of well-formed outputs combine linearly into
//! a score; sorting by score splits the data into Easy/Medium/Hard tertiles.
//! The format-valid rate stands in for semantic plausibility.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxcodec::{decode_sequence, Vocab};
use crate::geometry::{iou, BBox};
use crate::policy::{Context, PolicyParams, SamplerConfig};
use crate::rng::{self, Rng};
use crate::synth::{Domain, SceneSample};
use crate::{Error, Result, Scalar};

pub const REPORT_FORMAT: &str = "cgrpo-difficulty";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifficultyWeights {
    pub lambda_mean: f64,
    pub lambda_var: f64,
    pub lambda_sem: f64,
}

impl Default for DifficultyWeights {
    fn default() -> Self {
        Self { lambda_mean: 1.0, lambda_var: 0.5, lambda_sem: 0.5 }
    }
}

impl DifficultyWeights {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_mean, self.lambda_var, self.lambda_sem];
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || l.iter().all(|v| *v == 0.0) {
            return Err(Error::Config(format!("difficulty weights must be >= 0 and not all zero, got {l:?}")));
        }
        Ok(())
    }
}

/// How a base policy is rolled out to score and tier a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub group_size: usize,
    pub tier_quantiles: [f64; 2],
    pub weights: DifficultyWeights,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { group_size: 8, tier_quantiles: [1.0 / 3.0, 2.0 / 3.0], weights: DifficultyWeights::default() }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.group_size < 2 {
            return Err(Error::Config(format!("scoring group size must be at least 2, got {}", self.group_size)));
        }
        let [q1, q2] = self.tier_quantiles;
        if !(0.0 < q1 && q1 < q2 && q2 < 1.0) {
            return Err(Error::Config(format!("tier quantiles must satisfy 0 < q1 < q2 < 1, got {q1}, {q2}")));
        }
        Ok(())
    }

    pub fn quantiles(&self) -> (f64, f64) {
        (self.tier_quantiles[0], self.tier_quantiles[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutStats {
    pub mean_iou: f64,
    /// Population standard deviation of the rollout IoUs.
    pub std_iou: f64,
    pub format_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyRecord {
    pub id: u64,
    pub domain: Domain,
    pub mean_iou: f64,
    pub std_iou: f64,
    pub format_rate: f64,
    pub score: f64,
    pub tier: Option<Tier>,
}

/// Samples `group_size` sequences from `base` and summarizes their IoU with
/// `gt`; malformed sequences count as IoU 0.
pub fn rollout_stats<T: Scalar>(
    base: &PolicyParams<T>,
    x: &Context<T>,
    gt: &BBox<T>,
    group_size: usize,
    sampler: &SamplerConfig,
    rng: &mut Rng,
) -> Result<RolloutStats> {
    if group_size < 2 {
        return Err(Error::Config(format!("scoring needs at least 2 rollouts, got {group_size}")));
    }
    let vocab: Vocab = base.vocab();
    let mut ious = Vec::with_capacity(group_size);
    let mut valid = 0usize;
    for _ in 0..group_size {
        let s = base.sample(x, sampler, rng);
        match decode_sequence::<T>(&s, &vocab) {
            Some(b) => {
                valid += 1;
                ious.push(iou(&b, gt).as_f64());
            }
            None => ious.push(0.0),
        }
    }
    let n = group_size as f64;
    // shifted by the first value so identical rollouts give exactly zero spread
    let k = ious[0];
    let shift = ious.iter().map(|v| v - k).sum::<f64>() / n;
    let var = ious.iter().map(|v| (v - k - shift).powi(2)).sum::<f64>() / n;
    Ok(RolloutStats { mean_iou: k + shift, std_iou: var.sqrt(), format_rate: valid as f64 / n })
}

/// `lambda_mean (1 - mean) + lambda_var std + lambda_sem (1 - format_rate)`;
/// higher is harder.
pub fn difficulty_score(stats: &RolloutStats, w: &DifficultyWeights) -> f64 {
    w.lambda_mean * (1.0 - stats.mean_iou) + w.lambda_var * stats.std_iou + w.lambda_sem * (1.0 - stats.format_rate)
}

/// Scores every sample with its own rollout stream `derived(seed, id)`, so
/// the result does not depend on scheduling or thread count.
pub fn score_samples<T: Scalar>(
    base: &PolicyParams<T>,
    samples: &[SceneSample],
    group_size: usize,
    sampler: &SamplerConfig,
    weights: &DifficultyWeights,
    seed: u64,
) -> Result<Vec<DifficultyRecord>> {
    weights.validate()?;
    samples
        .par_iter()
        .map(|s| {
            let x = Context::<T>::from_f64(&s.x)?;
            let gt: BBox<T> = s.gt.cast();
            let mut r = rng::derived(seed, s.id);
            let stats = rollout_stats(base, &x, &gt, group_size, sampler, &mut r)?;
            Ok(DifficultyRecord {
                id: s.id,
                domain: s.domain,
                mean_iou: stats.mean_iou,
                std_iou: stats.std_iou,
                format_rate: stats.format_rate,
                score: difficulty_score(&stats, weights),
                tier: None,
            })
        })
        .collect()
}

/// Sorts by `(score, id)` and assigns tiers: positions below
/// `floor(n * q1)` are Easy, below `floor(n * q2)` Medium, the rest Hard.
/// Returns the scores at the two boundaries (first Medium, first Hard).
pub fn partition_tiers(records: &mut [DifficultyRecord], quantiles: (f64, f64)) -> Result<(f64, f64)> {
    let n = records.len();
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 records to partition, got {n}")));
    }
    let (q1, q2) = quantiles;
    if !(0.0 < q1 && q1 < q2 && q2 < 1.0) {
        return Err(Error::Config(format!("tier quantiles must satisfy 0 < q1 < q2 < 1, got {quantiles:?}")));
    }
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::NonFinite(format!("record {} has no valid score", r.id)));
    }
    records.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.id.cmp(&b.id)));
    let cut1 = ((n as f64 * q1).floor() as usize).clamp(1, n - 2);
    let cut2 = ((n as f64 * q2).floor() as usize).clamp(cut1 + 1, n - 1);
    for (i, r) in records.iter_mut().enumerate() {
        r.tier = Some(if i < cut1 {
            Tier::Easy
        } else if i < cut2 {
            Tier::Medium
        } else {
            Tier::Hard
        });
    }
    Ok((records[cut1].score, records[cut2].score))
}

/// Closed-form probability that a uniform draw over `V` tokens per position
/// is well formed: `(1/V)^2 * (B(B-1)/2 / V^2)^2`.
pub fn uniform_format_rate(v: &Vocab) -> f64 {
    let (b, size) = (v.bins() as f64, v.size() as f64);
    let ordered = b * (b - 1.0) / 2.0 / (size * size);
    ordered * ordered / (size * size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub group_size: usize,
    pub boundaries: [f64; 2],
    pub count: usize,
}

/// Writes the header then one record per line in ascending score order.
pub fn write_report<W: Write>(mut w: W, records: &[DifficultyRecord], header: &ReportHeader) -> Result<()> {
    serde_json::to_writer(&mut w, header)?;
    writeln!(w)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<(ReportHeader, Vec<DifficultyRecord>)> {
    let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg };
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| bad("empty report".into()))??;
    let header: ReportHeader = serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != REPORT_FORMAT || header.version != REPORT_VERSION {
        return Err(bad(format!("unsupported report {} v{}", header.format, header.version)));
    }
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 2)))?);
        }
    }
    Ok((header, records))
}
