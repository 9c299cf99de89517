//! Group-relative policy optimization: rewards, within-group advantage
//! standardization, the importance-weighted surrogate with an exact KL
//! penalty, and its closed-form gradient.

use serde::{Deserialize, Serialize};

use crate::boxcodec::{decode_sequence, TokenSequence, Vocab, SEQ_LEN};
use crate::geometry::{iou, BBox};
use crate::policy::{log_softmax, Context, PolicyParams, SamplerConfig};
use crate::rng::Rng;
use crate::{Error, Result, Scalar};

/// Groups whose reward standard deviation falls below this get zero advantages.
pub const DEGENERATE_STD: f64 = 1e-6;

/// Importance ratios are clamped to `[RATIO_MIN, RATIO_MAX]` before use.
pub const RATIO_MIN: f64 = 1e-6;
pub const RATIO_MAX: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    /// Weight of the IoU reward.
    pub alpha_iou: f64,
    /// Reward for a well-formed sequence.
    pub beta_format: f64,
    /// KL penalty coefficient in the objective.
    pub beta_kl: f64,
    /// PPO-style ratio clipping; off unless set (ablations only).
    pub clip_epsilon: Option<f64>,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { alpha_iou: 1.0, beta_format: 0.2, beta_kl: 0.3, clip_epsilon: None }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(finite_nonneg(self.alpha_iou) && finite_nonneg(self.beta_format) && finite_nonneg(self.beta_kl)) {
            return Err(Error::Config("reward weights must be finite and >= 0".into()));
        }
        if self.alpha_iou + self.beta_format <= 0.0 {
            return Err(Error::Config("alpha_iou + beta_format must be positive".into()));
        }
        if let Some(eps) = self.clip_epsilon {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(Error::Config(format!("clip_epsilon must lie in (0, 1), got {eps}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardBreakdown<T> {
    pub iou: T,
    pub format: T,
    pub total: T,
}

/// `alpha * iou(decode(s), gt) + beta_format` for well-formed `s`, else 0.
pub fn candidate_reward<T: Scalar>(
    s: &TokenSequence,
    gt: &BBox<T>,
    w: &RewardWeights,
    v: &Vocab,
) -> RewardBreakdown<T> {
    match decode_sequence::<T>(s, v) {
        Some(b) => {
            let iou = iou(&b, gt);
            let format = T::of(w.beta_format);
            RewardBreakdown { iou, format, total: T::of(w.alpha_iou) * iou + format }
        }
        None => RewardBreakdown::default(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateOutput<T> {
    pub sequence: TokenSequence,
    pub decoded: Option<BBox<T>>,
    /// Log-probability under the sampling snapshot.
    pub logp_old: T,
    pub reward: RewardBreakdown<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout<T> {
    pub sample_id: u64,
    pub context: Context<T>,
    pub gt: BBox<T>,
    pub candidates: Vec<CandidateOutput<T>>,
    pub advantages: Vec<T>,
    pub degenerate: bool,
}

impl<T: Scalar> GroupRollout<T> {
    pub fn rewards(&self) -> Vec<T> {
        self.candidates.iter().map(|c| c.reward.total).collect()
    }

    pub fn mean_reward(&self) -> T {
        mean(&self.rewards())
    }

    pub fn mean_iou(&self) -> T {
        mean(&self.candidates.iter().map(|c| c.reward.iou).collect::<Vec<_>>())
    }

    pub fn format_rate(&self) -> T {
        let ok = self.candidates.iter().filter(|c| c.decoded.is_some()).count();
        T::of(ok as f64 / self.candidates.len() as f64)
    }

    /// Population standard deviation of the rewards.
    pub fn reward_std(&self) -> T {
        population_std(&self.rewards())
    }
}

fn mean<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::of(v.len() as f64)
}

fn population_std<T: Scalar>(v: &[T]) -> T {
    let m = mean(v);
    (v.iter().map(|&r| (r - m) * (r - m)).sum::<T>() / T::of(v.len() as f64)).sqrt()
}

/// `(r_i - mean) / std` with the population standard deviation. Returns the
/// advantages and whether the group was degenerate (all advantages zero).
pub fn standardize_advantages<T: Scalar>(rewards: &[T]) -> Result<(Vec<T>, bool)> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!("group needs at least 2 rewards, got {}", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward".into()));
    }
    let m = mean(rewards);
    let dev: Vec<T> = rewards.iter().map(|&r| r - m).collect();
    let std = (dev.iter().map(|&d| d * d).sum::<T>() / T::of(rewards.len() as f64)).sqrt();
    if std < T::of(DEGENERATE_STD) {
        return Ok((vec![T::zero(); rewards.len()], true));
    }
    Ok((dev.into_iter().map(|d| d / std).collect(), false))
}

/// Samples `group_size` candidates from `old`, scores them against `gt` and
/// standardizes their rewards.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group<T: Scalar>(
    old: &PolicyParams<T>,
    sample_id: u64,
    context: Context<T>,
    gt: BBox<T>,
    group_size: usize,
    sampler: &SamplerConfig,
    weights: &RewardWeights,
    rng: &mut Rng,
) -> Result<GroupRollout<T>> {
    let vocab = old.vocab();
    let candidates: Vec<CandidateOutput<T>> = (0..group_size)
        .map(|_| {
            let sequence = old.sample(&context, sampler, rng);
            CandidateOutput {
                sequence,
                decoded: decode_sequence(&sequence, &vocab),
                logp_old: old.log_prob(&context, &sequence),
                reward: candidate_reward(&sequence, &gt, weights, &vocab),
            }
        })
        .collect();
    let rewards: Vec<T> = candidates.iter().map(|c| c.reward.total).collect();
    let (advantages, degenerate) = standardize_advantages(&rewards)?;
    Ok(GroupRollout { sample_id, context, gt, candidates, advantages, degenerate })
}

fn clamped_ratio<T: Scalar>(logp: T, logp_old: T) -> (T, bool) {
    let r = (logp - logp_old).exp();
    let (lo, hi) = (T::of(RATIO_MIN), T::of(RATIO_MAX));
    if r < lo {
        (lo, true)
    } else if r > hi {
        (hi, true)
    } else {
        (r, false)
    }
}

/// Per-candidate surrogate term and its derivative with respect to the ratio.
fn surrogate_term<T: Scalar>(ratio: T, clamped: bool, adv: T, clip: Option<f64>) -> (T, T) {
    let slope = if clamped { T::zero() } else { adv };
    match clip {
        None => (ratio * adv, slope),
        Some(eps) => {
            let (lo, hi) = (T::one() - T::of(eps), T::one() + T::of(eps));
            let clipped = ratio.max(lo).min(hi);
            let unclipped_term = ratio * adv;
            let clipped_term = clipped * adv;
            if unclipped_term <= clipped_term {
                (unclipped_term, slope)
            } else {
                (clipped_term, T::zero())
            }
        }
    }
}

/// `(1/G) sum_i ratio_i A_i - beta_kl * KL(theta || ref)` for one group; to
/// be maximized.
pub fn surrogate_objective<T: Scalar>(
    theta: &PolicyParams<T>,
    group: &GroupRollout<T>,
    reference: &PolicyParams<T>,
    w: &RewardWeights,
) -> T {
    let x = &group.context;
    let g = T::of(group.candidates.len() as f64);
    let gain: T = group
        .candidates
        .iter()
        .zip(&group.advantages)
        .map(|(c, &a)| {
            let (ratio, clamped) = clamped_ratio(theta.log_prob(x, &c.sequence), c.logp_old);
            surrogate_term(ratio, clamped, a, w.clip_epsilon).0
        })
        .sum::<T>()
        / g;
    gain - T::of(w.beta_kl) * crate::policy::kl_exact(theta, reference, x)
}

/// Mean of [`surrogate_objective`] over a batch of groups.
pub fn batch_objective<T: Scalar>(
    theta: &PolicyParams<T>,
    groups: &[GroupRollout<T>],
    reference: &PolicyParams<T>,
    w: &RewardWeights,
) -> T {
    groups.iter().map(|g| surrogate_objective(theta, g, reference, w)).sum::<T>() / T::of(groups.len() as f64)
}

/// Analytic gradient of [`batch_objective`] with respect to every weight.
///
/// Per position, `d log softmax(a)[s] / da = e_s - p` and
/// `d KL(softmax(a) || q) / da = p * (log p - log q - KL)`; both are then
/// multiplied by the context through `a = W x`.
pub fn objective_gradient<T: Scalar>(
    theta: &PolicyParams<T>,
    groups: &[GroupRollout<T>],
    reference: &PolicyParams<T>,
    w: &RewardWeights,
) -> PolicyParams<T> {
    assert!(!groups.is_empty(), "gradient of an empty batch");
    assert!(theta.same_shape(reference), "policies differ in shape");
    let vocab = theta.vocab();
    let nv = vocab.size();
    let mut grad = PolicyParams::zeros(vocab, theta.dim());
    let batch_scale = T::one() / T::of(groups.len() as f64);
    let beta = T::of(w.beta_kl);

    for group in groups {
        let x = &group.context;
        let logp: Vec<Vec<T>> = (0..SEQ_LEN).map(|t| log_softmax(&theta.position_logits(x, t))).collect();
        let probs: Vec<Vec<T>> = logp.iter().map(|lp| lp.iter().map(|l| l.exp()).collect()).collect();

        // coefficient of x in the gradient of each (t, v) row
        let mut coef = vec![vec![T::zero(); nv]; SEQ_LEN];
        let inv_g = T::one() / T::of(group.candidates.len() as f64);
        for (c, &adv) in group.candidates.iter().zip(&group.advantages) {
            let lp: T = c.sequence.tokens().iter().enumerate().map(|(t, &tok)| logp[t][tok]).sum();
            let (ratio, clamped) = clamped_ratio(lp, c.logp_old);
            let slope = surrogate_term(ratio, clamped, adv, w.clip_epsilon).1;
            let weight = slope * ratio * inv_g;
            if weight == T::zero() {
                continue;
            }
            for (t, &tok) in c.sequence.tokens().iter().enumerate() {
                for v in 0..nv {
                    coef[t][v] -= weight * probs[t][v];
                }
                coef[t][tok] += weight;
            }
        }
        if beta > T::zero() {
            for t in 0..SEQ_LEN {
                let logq = log_softmax(&reference.position_logits(x, t));
                let kl: T = (0..nv).map(|v| probs[t][v] * (logp[t][v] - logq[v])).sum();
                for v in 0..nv {
                    coef[t][v] -= beta * probs[t][v] * (logp[t][v] - logq[v] - kl);
                }
            }
        }
        for (t, row) in coef.iter().enumerate() {
            for (v, &cv) in row.iter().enumerate() {
                if cv == T::zero() {
                    continue;
                }
                let scale = cv * batch_scale;
                for (gw, &xj) in grad.row_mut(t, v).iter_mut().zip(x.as_slice()) {
                    *gw += scale * xj;
                }
            }
        }
    }
    grad
}
