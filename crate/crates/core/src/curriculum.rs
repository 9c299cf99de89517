//! Stage scheduling: the easy-sample decay `m(t)`, tier sampling
//! probabilities, the domain-B share ramp, and batch selection.
//!
//! `m(t)` decays continuously; the stage interval `K` only governs when the
//! domain mixture changes.

use serde::{Deserialize, Serialize};

use rand::Rng as _;

use crate::difficulty::{DifficultyRecord, Tier};
use crate::rng::Rng;
use crate::synth::Domain;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Easy-to-hard schedule driven by `m(t)`.
    Curriculum,
    /// Equal probability for every tier.
    Uniform,
    EasyOnly,
    HardOnly,
    /// Whole training set at its natural tier and domain proportions.
    FullDirect,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::Curriculum, Strategy::Uniform, Strategy::EasyOnly, Strategy::HardOnly, Strategy::FullDirect];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Curriculum => "curriculum",
            Strategy::Uniform => "uniform",
            Strategy::EasyOnly => "easy_only",
            Strategy::HardOnly => "hard_only",
            Strategy::FullDirect => "full_direct",
        }
    }

    /// Whether batch selection needs scored tiers.
    pub fn needs_tiers(&self) -> bool {
        !matches!(self, Strategy::FullDirect)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// Stage interval presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseLength {
    /// 500 steps.
    Short,
    /// 1000 steps.
    Medium,
    /// 2000 steps.
    Long,
}

impl PhaseLength {
    pub fn steps(&self) -> usize {
        match self {
            PhaseLength::Short => 500,
            PhaseLength::Medium => 1000,
            PhaseLength::Long => 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Easy-sample weight at step 0.
    pub m0: f64,
    /// Fraction of training over which `m(t)` decays to zero.
    pub w: f64,
    pub total_steps: usize,
    /// Steps per stage (`K`); overridden by `phase_length` when set.
    pub stage_interval: usize,
    pub phase_length: Option<PhaseLength>,
    pub share_b_start: f64,
    pub share_b_end: f64,
    pub strategy: Strategy,
    /// Re-score difficulty with the current policy at every stage boundary.
    pub rescore_each_stage: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            m0: 0.4,
            w: 0.5,
            total_steps: 2000,
            stage_interval: 500,
            phase_length: None,
            share_b_start: 0.6,
            share_b_end: 0.8,
            strategy: Strategy::Curriculum,
            rescore_each_stage: false,
        }
    }
}

impl CurriculumConfig {
    pub fn interval(&self) -> usize {
        self.phase_length.map(|p| p.steps()).unwrap_or(self.stage_interval)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.m0 > 0.0 && self.m0 <= 1.0) {
            return bad(format!("m0 must lie in (0, 1], got {}", self.m0));
        }
        if !(self.w > 0.0 && self.w < 1.0) {
            return bad(format!("w must lie in (0, 1), got {}", self.w));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        let k = self.interval();
        if k == 0 || k > self.total_steps {
            return bad(format!("stage interval {k} must lie in [1, total_steps = {}]", self.total_steps));
        }
        for v in [self.share_b_start, self.share_b_end] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("domain shares must lie in [0, 1], got {v}"));
            }
        }
        if self.share_b_end < self.share_b_start {
            return bad("share_b_end must not be below share_b_start".into());
        }
        Ok(())
    }

    pub fn stage(&self, t: usize) -> usize {
        t / self.interval()
    }
}

/// `m0 (1 - t / (wT))` up to `wT`, zero afterwards.
pub fn easy_weight(t: usize, cfg: &CurriculumConfig) -> f64 {
    let horizon = cfg.w * cfg.total_steps as f64;
    let t = t as f64;
    if t <= horizon {
        (cfg.m0 * (1.0 - t / horizon)).max(0.0)
    } else {
        0.0
    }
}

/// `(p_easy, p_medium, p_hard)`. `natural` holds the dataset's tier
/// proportions, used by [`Strategy::FullDirect`].
pub fn tier_distribution(t: usize, cfg: &CurriculumConfig, natural: [f64; 3]) -> [f64; 3] {
    match cfg.strategy {
        Strategy::Curriculum => {
            let m = easy_weight(t, cfg);
            let rest = 1.0 - m;
            let progress = (t as f64 / cfg.total_steps as f64).min(1.0);
            let hard = rest * progress;
            [m, rest - hard, hard]
        }
        Strategy::Uniform => [1.0 / 3.0; 3],
        Strategy::EasyOnly => [1.0, 0.0, 0.0],
        Strategy::HardOnly => [0.0, 0.0, 1.0],
        Strategy::FullDirect => natural,
    }
}

/// Share of domain-B samples: stepwise from `share_b_start` at stage 0 to
/// `share_b_end` at the final stage `floor(T / K)`, changing only at
/// multiples of `K`.
pub fn domain_weight(t: usize, cfg: &CurriculumConfig) -> f64 {
    let k = cfg.interval();
    let last = (cfg.total_steps / k).max(1);
    let frac = (cfg.stage(t) as f64 / last as f64).min(1.0);
    (cfg.share_b_start + (cfg.share_b_end - cfg.share_b_start) * frac).clamp(cfg.share_b_start, cfg.share_b_end)
}

/// Sample ids grouped by tier and domain.
#[derive(Debug, Clone, Default)]
pub struct TierPools {
    by_tier: [Vec<u64>; 3],
    by_tier_domain: [[Vec<u64>; 2]; 3],
    all: Vec<u64>,
    all_by_domain: [Vec<u64>; 2],
}

fn domain_slot(d: Domain) -> usize {
    match d {
        Domain::A => 0,
        Domain::B => 1,
    }
}

impl TierPools {
    /// Builds pools from tiered records; untiered records are rejected.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a DifficultyRecord>) -> Result<Self> {
        let mut pools = Self::default();
        let mut sorted: Vec<&DifficultyRecord> = records.into_iter().collect();
        sorted.sort_by_key(|r| r.id);
        for r in sorted {
            let tier = r.tier.ok_or_else(|| Error::Config(format!("record {} has no tier", r.id)))?;
            pools.insert(r.id, tier, r.domain);
        }
        Ok(pools)
    }

    pub fn insert(&mut self, id: u64, tier: Tier, domain: Domain) {
        let (t, d) = (tier.index(), domain_slot(domain));
        self.by_tier[t].push(id);
        self.by_tier_domain[t][d].push(id);
        self.all.push(id);
        self.all_by_domain[d].push(id);
    }

    pub fn tier(&self, t: Tier) -> &[u64] {
        &self.by_tier[t.index()]
    }

    pub fn len(&self) -> usize {
        self.all.len()
    }

    pub fn is_empty(&self) -> bool {
        self.all.is_empty()
    }

    pub fn natural_proportions(&self) -> [f64; 3] {
        let n = self.all.len().max(1) as f64;
        [0, 1, 2].map(|t| self.by_tier[t].len() as f64 / n)
    }

    /// Nonempty tier closest to `want`; equal distances prefer the easier tier.
    fn nearest_nonempty(&self, want: usize) -> Option<usize> {
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by_key(|&t| (t.abs_diff(want), t));
        order.into_iter().find(|&t| !self.by_tier[t].is_empty())
    }
}

fn pick(pool: &[u64], rng: &mut Rng) -> u64 {
    pool[rng.random_range(0..pool.len())]
}

fn draw_index(probs: &[f64; 3], rng: &mut Rng) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws `batch` sample ids for step `t`. Each slot samples a tier from
/// [`tier_distribution`], a domain from [`domain_weight`], then an id
/// uniformly from that tier-and-domain pool. An empty pool falls back to the
/// whole tier, then to the nearest nonempty tier.
pub fn next_batch(t: usize, cfg: &CurriculumConfig, pools: &TierPools, batch: usize, rng: &mut Rng) -> Result<Vec<u64>> {
    if pools.is_empty() {
        return Err(Error::Config("no samples to draw from".into()));
    }
    if cfg.strategy == Strategy::FullDirect {
        return Ok((0..batch).map(|_| pick(&pools.all, rng)).collect());
    }
    let probs = tier_distribution(t, cfg, pools.natural_proportions());
    let share_b = domain_weight(t, cfg);
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let tier = draw_index(&probs, rng);
        let domain = usize::from(rng.random::<f64>() < share_b);
        let pool = &pools.by_tier_domain[tier][domain];
        let id = if !pool.is_empty() {
            pick(pool, rng)
        } else if !pools.by_tier[tier].is_empty() {
            pick(&pools.by_tier[tier], rng)
        } else {
            let near = pools.nearest_nonempty(tier).expect("pools nonempty");
            pick(&pools.by_tier[near], rng)
        };
        out.push(id);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleRow {
    pub t: usize,
    pub m: f64,
    pub p_easy: f64,
    pub p_med: f64,
    pub p_hard: f64,
    pub w_b: f64,
}

/// Schedule sampled every `every` steps, always including `t = T`.
pub fn schedule_table(cfg: &CurriculumConfig, natural: [f64; 3], every: usize) -> Vec<ScheduleRow> {
    let every = every.max(1);
    let mut ts: Vec<usize> = (0..=cfg.total_steps).step_by(every).collect();
    if ts.last() != Some(&cfg.total_steps) {
        ts.push(cfg.total_steps);
    }
    ts.into_iter()
        .map(|t| {
            let p = tier_distribution(t, cfg, natural);
            ScheduleRow { t, m: easy_weight(t, cfg), p_easy: p[0], p_med: p[1], p_hard: p[2], w_b: domain_weight(t, cfg) }
        })
        .collect()
}

pub fn write_schedule_csv<W: std::io::Write>(mut w: W, rows: &[ScheduleRow], config_hash: &str) -> Result<()> {
    writeln!(w, "# config_hash={config_hash}")?;
    writeln!(w, "t,m,p_easy,p_med,p_hard,w_b")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.t, r.m, r.p_easy, r.p_med, r.p_hard, r.w_b)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::{prop_assert, proptest, Strategy as _};
    use proptest::strategy::BoxedStrategy;

    fn cfg(total: usize) -> CurriculumConfig {
        CurriculumConfig { total_steps: total, ..Default::default() }
    }

    #[test]
    fn easy_weight_examples() {
        let c = cfg(1000);
        assert_eq!(easy_weight(0, &c), 0.4);
        assert!((easy_weight(250, &c) - 0.2).abs() < 1e-15);
        assert_eq!(easy_weight(500, &c), 0.0);
        assert_eq!(easy_weight(600, &c), 0.0);
    }

    #[test]
    fn tier_distribution_endpoints() {
        let c = cfg(1000);
        let p0 = tier_distribution(0, &c, [0.0; 3]);
        assert_eq!(p0, [0.4, 0.6, 0.0]);
        assert_eq!(tier_distribution(1000, &c, [0.0; 3]), [0.0, 0.0, 1.0]);
        let fixed = |s| tier_distribution(300, &CurriculumConfig { strategy: s, ..c.clone() }, [0.5, 0.3, 0.2]);
        assert_eq!(fixed(Strategy::Uniform), [1.0 / 3.0; 3]);
        assert_eq!(fixed(Strategy::EasyOnly), [1.0, 0.0, 0.0]);
        assert_eq!(fixed(Strategy::HardOnly), [0.0, 0.0, 1.0]);
        assert_eq!(fixed(Strategy::FullDirect), [0.5, 0.3, 0.2]);
    }

    #[test]
    fn domain_weight_examples() {
        let c = CurriculumConfig { total_steps: 5000, stage_interval: 500, ..Default::default() };
        assert_eq!(domain_weight(0, &c), 0.6);
        assert_eq!(domain_weight(499, &c), 0.6);
        assert!((domain_weight(2600, &c) - 0.70).abs() < 1e-12);
        assert!((domain_weight(5000, &c) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn domain_weight_reaches_end_when_interval_does_not_divide() {
        let c = CurriculumConfig { total_steps: 2000, stage_interval: 1500, ..Default::default() };
        assert_eq!(domain_weight(1499, &c), 0.6);
        assert!((domain_weight(2000, &c) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1000).validate().is_ok());
        assert!(CurriculumConfig { w: 1.0, ..cfg(1000) }.validate().is_err());
        assert!(CurriculumConfig { m0: 0.0, ..cfg(1000) }.validate().is_err());
        assert!(CurriculumConfig { stage_interval: 2000, ..cfg(1000) }.validate().is_err());
        assert!(CurriculumConfig { phase_length: Some(PhaseLength::Long), ..cfg(1000) }.validate().is_err());
        assert_eq!(CurriculumConfig { phase_length: Some(PhaseLength::Medium), ..cfg(5000) }.interval(), 1000);
        assert!("curriculum".parse::<Strategy>().is_ok());
        assert!("random".parse::<Strategy>().is_err());
    }

    fn pools() -> TierPools {
        let mut p = TierPools::default();
        for id in 0..90u64 {
            let tier = Tier::ALL[(id % 3) as usize];
            let domain = if id % 2 == 0 { Domain::A } else { Domain::B };
            p.insert(id, tier, domain);
        }
        p
    }

    #[test]
    fn easy_only_batches_are_easy() {
        let p = pools();
        let c = CurriculumConfig { strategy: Strategy::EasyOnly, ..cfg(1000) };
        let mut g = rng::seeded(1);
        for t in [0, 400, 999] {
            for id in next_batch(t, &c, &p, 64, &mut g).unwrap() {
                assert_eq!(id % 3, 0);
            }
        }
        let c = CurriculumConfig { strategy: Strategy::HardOnly, ..cfg(1000) };
        assert!(next_batch(10, &c, &p, 64, &mut g).unwrap().iter().all(|id| id % 3 == 2));
    }

    #[test]
    fn batches_are_deterministic() {
        let p = pools();
        let c = cfg(1000);
        let a = next_batch(100, &c, &p, 32, &mut rng::seeded(5)).unwrap();
        let b = next_batch(100, &c, &p, 32, &mut rng::seeded(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_pools_fall_back() {
        let mut p = TierPools::default();
        p.insert(7, Tier::Medium, Domain::A);
        let c = CurriculumConfig { strategy: Strategy::HardOnly, ..cfg(1000) };
        let mut g = rng::seeded(2);
        // hard tier empty -> nearest nonempty is medium; domain B empty -> whole tier
        assert!(next_batch(0, &c, &p, 16, &mut g).unwrap().iter().all(|&id| id == 7));
        assert!(next_batch(0, &c, &TierPools::default(), 1, &mut g).is_err());
    }

    #[test]
    fn fallback_prefers_easier_on_ties() {
        let mut p = TierPools::default();
        p.insert(1, Tier::Easy, Domain::A);
        p.insert(3, Tier::Hard, Domain::A);
        assert_eq!(p.nearest_nonempty(1), Some(0));
    }

    #[test]
    fn schedule_table_includes_endpoint() {
        let rows = schedule_table(&cfg(1000), [0.0; 3], 300);
        assert_eq!(rows.iter().map(|r| r.t).collect::<Vec<_>>(), vec![0, 300, 600, 900, 1000]);
        let mut out = Vec::new();
        write_schedule_csv(&mut out, &rows, "h").unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("# config_hash=h\nt,m,p_easy,p_med,p_hard,w_b\n0,0.4,0.4,0.6,0,0.6\n"));
    }

    fn arb_cfg() -> BoxedStrategy<CurriculumConfig> {
        (0.01..=1.0f64, 0.01..0.99f64, 1usize..6000, 1usize..6000).prop_map(|(m0, w, total, k)| CurriculumConfig {
            m0,
            w,
            total_steps: total,
            stage_interval: k.min(total),
            ..Default::default()
        })
        .boxed()
    }

    proptest! {
        #[test]
        fn curriculum_distribution_is_on_simplex_and_monotone(c in arb_cfg(), a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let (t1, t2) = {
                let x = (a * c.total_steps as f64) as usize;
                let y = (b * c.total_steps as f64) as usize;
                (x.min(y), x.max(y))
            };
            let p = tier_distribution(t1, &c, [0.0; 3]);
            let q = tier_distribution(t2, &c, [0.0; 3]);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!(q[0] <= p[0]);
            prop_assert!(q[2] >= p[2]);
            prop_assert!(easy_weight(t2, &c) <= easy_weight(t1, &c));
            let (w1, w2) = (domain_weight(t1, &c), domain_weight(t2, &c));
            prop_assert!(w1 <= w2 && (0.6..=0.8).contains(&w1) && (0.6..=0.8).contains(&w2));
        }
    }
}
