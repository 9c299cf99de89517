//! Greedy-decoding evaluation with per-tier and per-domain breakdowns.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxcodec::decode_sequence;
use crate::difficulty::Tier;
use crate::geometry::iou;
use crate::policy::{Context, PolicyParams};
use crate::rng;
use crate::synth::{Domain, SceneSample};
use crate::{Error, Result, Scalar};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Outcome of greedy decoding on one sample; malformed outputs score IoU 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: u64,
    pub iou: f64,
    pub well_formed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub mean_iou: f64,
    /// Fraction of samples with IoU at or above the threshold.
    pub hit_rate: f64,
    pub format_violation_rate: f64,
}

impl EvalSummary {
    fn from_evals<'a>(evals: impl IntoIterator<Item = &'a SampleEval>, threshold: f64) -> Self {
        let (mut n, mut sum, mut hits, mut bad) = (0usize, 0.0, 0usize, 0usize);
        for e in evals {
            n += 1;
            sum += e.iou;
            hits += usize::from(e.iou >= threshold);
            bad += usize::from(!e.well_formed);
        }
        let d = n.max(1) as f64;
        Self { count: n, mean_iou: sum / d, hit_rate: hits as f64 / d, format_violation_rate: bad as f64 / d }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub overall: EvalSummary,
    pub per_tier: BTreeMap<Tier, EvalSummary>,
    pub per_domain: BTreeMap<Domain, EvalSummary>,
}

/// Greedy decoding of one sample; argmax ties are broken with
/// `derived(seed, id)`.
pub fn evaluate_sample<T: Scalar>(theta: &PolicyParams<T>, sample: &SceneSample, seed: u64) -> Result<SampleEval> {
    let x = Context::<T>::from_f64(&sample.x)?;
    let seq = theta.greedy(&x, &mut rng::derived(seed, sample.id));
    let gt = sample.gt.cast::<T>();
    Ok(match decode_sequence::<T>(&seq, &theta.vocab()) {
        Some(b) => SampleEval { id: sample.id, iou: iou(&b, &gt).as_f64(), well_formed: true },
        None => SampleEval { id: sample.id, iou: 0.0, well_formed: false },
    })
}

/// Evaluates every sample; tier breakdowns cover the samples present in
/// `tiers`.
pub fn evaluate<T: Scalar>(
    theta: &PolicyParams<T>,
    samples: &[&SceneSample],
    tiers: Option<&HashMap<u64, Tier>>,
    threshold: f64,
    seed: u64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("IoU threshold must lie in [0, 1], got {threshold}")));
    }
    let evals = samples.par_iter().map(|s| evaluate_sample(theta, s, seed)).collect::<Result<Vec<_>>>()?;
    let mut per_tier = BTreeMap::new();
    if let Some(tiers) = tiers {
        for tier in Tier::ALL {
            let sel: Vec<&SampleEval> = evals.iter().filter(|e| tiers.get(&e.id) == Some(&tier)).collect();
            if !sel.is_empty() {
                per_tier.insert(tier, EvalSummary::from_evals(sel, threshold));
            }
        }
    }
    let mut per_domain = BTreeMap::new();
    for domain in [Domain::A, Domain::B] {
        let sel: Vec<&SampleEval> =
            evals.iter().zip(samples).filter(|(_, s)| s.domain == domain).map(|(e, _)| e).collect();
        if !sel.is_empty() {
            per_domain.insert(domain, EvalSummary::from_evals(sel, threshold));
        }
    }
    Ok(EvalReport { threshold, overall: EvalSummary::from_evals(&evals, threshold), per_tier, per_domain })
}
