//! Procedural grounding samples with controllable difficulty.
//!
//! Each sample is a ground-truth box plus a context vector that carries a
//! quantized (and possibly corrupted) description of that box. Four knobs
//! make the context-to-box mapping harder: descriptor noise `sigma`,
//! distractor objects that bleed into the descriptor, smaller boxes, and
//! truncation at the frame border (the descriptor then describes the full,
//! unclipped object).
//!
//! Context layout (`dim >= 16`, extra entries are zero):
//!
//! | index  | feature                                                  |
//! |--------|----------------------------------------------------------|
//! | 0      | constant 1                                               |
//! | 1..5   | descriptor corners, `scale * (c - 0.5)`                  |
//! | 5      | domain indicator (0 = A, 1 = B)                          |
//! | 6..15  | up to 3 distractors as `scale*(cx-0.5), scale*(cy-0.5), scale*sqrt(area)` |
//! | 15     | distractor count / 3                                     |

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::boxcodec::{encode_box, Vocab, SEQ_LEN};
use crate::geometry::BBox;
use crate::policy::{PolicyParams, CONTEXT_BOUND};
use crate::rng::{self, Rng};
use crate::{Error, Result, Scalar};

pub const LAYOUT_DIM: usize = 16;
const DESC: usize = 1;
const DOMAIN: usize = 5;
const DISTRACTORS: usize = 6;
const DISTRACTOR_COUNT: usize = 15;
pub const MAX_DISTRACTORS: u32 = 3;
const NOISE_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub const DATASET_FORMAT: &str = "cgrpo-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    /// Diverse everyday scenes, mid-range difficulty.
    A,
    /// Long-tail scenes skewed toward hard knobs.
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Easy,
    Medium,
    Hard,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Easy, Band::Medium, Band::Hard];
}

/// Generator settings for one difficulty band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnobBand {
    pub sigma: f64,
    pub distractors_min: u32,
    pub distractors_max: u32,
    pub min_side: f64,
    pub truncation_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSet {
    pub easy: KnobBand,
    pub medium: KnobBand,
    pub hard: KnobBand,
}

impl BandSet {
    pub fn get(&self, b: Band) -> &KnobBand {
        match b {
            Band::Easy => &self.easy,
            Band::Medium => &self.medium,
            Band::Hard => &self.hard,
        }
    }
}

impl Default for BandSet {
    fn default() -> Self {
        Self {
            easy: KnobBand { sigma: 0.0, distractors_min: 0, distractors_max: 0, min_side: 0.25, truncation_prob: 0.0 },
            medium: KnobBand { sigma: 0.03, distractors_min: 1, distractors_max: 2, min_side: 0.15, truncation_prob: 0.1 },
            hard: KnobBand { sigma: 0.08, distractors_min: 2, distractors_max: 3, min_side: 0.08, truncation_prob: 0.3 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub count_a: u64,
    pub count_b: u64,
    pub seed: u64,
    pub bins: usize,
    pub dim: usize,
    /// Largest box side drawn by the generator.
    pub max_side: f64,
    /// Multiplier applied to centered coordinate features.
    pub feature_scale: f64,
    /// Value of the constant feature at index 0.
    pub bias_feature: f64,
    /// Fraction of a distractor's offset that bleeds into the descriptor.
    pub distractor_leak: f64,
    pub bands: BandSet,
    /// Band probabilities (easy, medium, hard) for domain A.
    pub mix_a: [f64; 3],
    /// Band probabilities (easy, medium, hard) for domain B.
    pub mix_b: [f64; 3],
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count_a: 600,
            count_b: 400,
            seed: 0,
            bins: 32,
            dim: LAYOUT_DIM,
            max_side: 0.6,
            feature_scale: 20.0,
            bias_feature: 10.0,
            distractor_leak: 0.15,
            bands: BandSet::default(),
            mix_a: [0.4, 0.4, 0.2],
            mix_b: [0.1, 0.3, 0.6],
        }
    }
}

impl DatasetSpec {
    /// Noise-free easy samples only, all in domain A.
    pub fn easy_only(count: u64, seed: u64) -> Self {
        Self { count_a: count, count_b: 0, seed, mix_a: [1.0, 0.0, 0.0], ..Self::default() }
    }

    /// Easy-only, domain-A counterpart sharing this spec's layout and bands.
    pub fn easy_variant(&self, count: u64, seed: u64) -> Self {
        Self { count_a: count, count_b: 0, seed, mix_a: [1.0, 0.0, 0.0], ..self.clone() }
    }

    pub fn count(&self) -> u64 {
        self.count_a + self.count_b
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.bins)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.count() == 0 {
            return bad("dataset spec has zero samples".into());
        }
        self.vocab()?;
        if self.dim < LAYOUT_DIM {
            return bad(format!("dim must be at least {LAYOUT_DIM}, got {}", self.dim));
        }
        if !(self.max_side > 0.0 && self.max_side <= 1.0) {
            return bad(format!("max_side must lie in (0, 1], got {}", self.max_side));
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return bad("feature_scale must be positive".into());
        }
        if !(self.bias_feature > 0.0 && self.bias_feature <= CONTEXT_BOUND) {
            return bad(format!("bias_feature must lie in (0, {CONTEXT_BOUND}], got {}", self.bias_feature));
        }
        if !(0.0..=1.0).contains(&self.distractor_leak) {
            return bad("distractor_leak must lie in [0, 1]".into());
        }
        for (name, mix) in [("mix_a", &self.mix_a), ("mix_b", &self.mix_b)] {
            let sum: f64 = mix.iter().sum();
            if mix.iter().any(|p| p.is_nan() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return bad(format!("{name} must be a probability vector, got {mix:?}"));
            }
        }
        for band in Band::ALL {
            let k = self.bands.get(band);
            if !(k.sigma >= 0.0 && k.sigma.is_finite()) {
                return bad(format!("{band:?}: sigma must be finite and >= 0"));
            }
            if k.distractors_min > k.distractors_max || k.distractors_max > MAX_DISTRACTORS {
                return bad(format!("{band:?}: distractor range must satisfy min <= max <= {MAX_DISTRACTORS}"));
            }
            if !(k.min_side > 0.0 && k.min_side <= self.max_side) {
                return bad(format!("{band:?}: min_side must lie in (0, max_side]"));
            }
            if !(0.0..=1.0).contains(&k.truncation_prob) {
                return bad(format!("{band:?}: truncation_prob must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn domain_of(&self, id: u64) -> Domain {
        if id < self.count_a {
            Domain::A
        } else {
            Domain::B
        }
    }
}

/// Knob values realized for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Knobs {
    pub band: Band,
    pub sigma: f64,
    pub distractors: u32,
    pub min_side: f64,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSample {
    pub id: u64,
    pub domain: Domain,
    pub knobs: Knobs,
    pub gt: BBox<f64>,
    pub x: Vec<f64>,
}

/// Held-out membership: every fifth id.
pub fn is_heldout(id: u64) -> bool {
    id % 5 == 4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
    All,
}

impl Split {
    pub fn contains(&self, id: u64) -> bool {
        match self {
            Split::Train => !is_heldout(id),
            Split::Heldout => is_heldout(id),
            Split::All => true,
        }
    }
}

fn pick_band(mix: &[f64; 3], rng: &mut Rng) -> Band {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (band, p) in Band::ALL.into_iter().zip(mix) {
        acc += p;
        if u < acc {
            return band;
        }
    }
    Band::ALL.into_iter().zip(mix).rev().find(|(_, p)| **p > 0.0).map(|(b, _)| b).unwrap_or(Band::Easy)
}

/// Draws the knobs for `id` from its domain's band mixture.
pub fn draw_knobs(spec: &DatasetSpec, id: u64, rng: &mut Rng) -> Knobs {
    let mix = match spec.domain_of(id) {
        Domain::A => &spec.mix_a,
        Domain::B => &spec.mix_b,
    };
    let band = pick_band(mix, rng);
    let k = spec.bands.get(band);
    Knobs {
        band,
        sigma: k.sigma,
        distractors: rng.random_range(k.distractors_min..=k.distractors_max),
        min_side: k.min_side,
        truncated: rng.random_bool(k.truncation_prob),
    }
}

fn side(min: f64, max: f64, rng: &mut Rng) -> f64 {
    if max > min {
        rng.random_range(min..max)
    } else {
        min
    }
}

/// Full object extent, possibly crossing one frame border when truncated.
fn draw_object(knobs: &Knobs, max_side: f64, rng: &mut Rng) -> [f64; 4] {
    let w = side(knobs.min_side, max_side, rng);
    let h = side(knobs.min_side, max_side, rng);
    let mut x1 = rng.random_range(0.0..=(1.0 - w));
    let mut y1 = rng.random_range(0.0..=(1.0 - h));
    if knobs.truncated {
        let overshoot: f64 = rng.random_range(0.2..0.5);
        match rng.random_range(0..4) {
            0 => x1 = -overshoot * w,
            1 => x1 = 1.0 - (1.0 - overshoot) * w,
            2 => y1 = -overshoot * h,
            _ => y1 = 1.0 - (1.0 - overshoot) * h,
        }
    }
    [x1, y1, x1 + w, y1 + h]
}

fn clip_to_frame(b: [f64; 4]) -> Result<BBox<f64>> {
    BBox::new(b[0].max(0.0), b[1].max(0.0), b[2].min(1.0), b[3].min(1.0))
}

/// Generates sample `id` with explicit knobs. The geometry stream depends only
/// on `(spec.seed, id)` and the noise stream is separate, so two calls that
/// differ only in `sigma` describe the same scene.
pub fn generate_with_knobs(spec: &DatasetSpec, id: u64, knobs: Knobs) -> Result<SceneSample> {
    let vocab = spec.vocab()?;
    let mut geo = rng::derived(spec.seed, 2 * id + 1);
    let mut noise = rng::derived(spec.seed ^ NOISE_STREAM_SALT, id);
    let domain = spec.domain_of(id);

    let object = draw_object(&knobs, spec.max_side, &mut geo);
    let gt = clip_to_frame(object)?;
    let bins = spec.bins as f64;
    let clean: [f64; 4] = if knobs.truncated {
        object.map(|c| ((c * bins).floor() + 0.5) / bins)
    } else {
        let toks = encode_box(&gt, &vocab)?;
        let t = toks.tokens();
        [t[1], t[2], t[3], t[4]].map(|k| vocab.bin_center(k))
    };

    let distractors: Vec<[f64; 4]> = (0..knobs.distractors)
        .map(|_| draw_object(&Knobs { truncated: false, ..knobs }, spec.max_side, &mut geo))
        .collect();

    let mut desc = clean;
    for d in &distractors {
        for (c, (dc, cc)) in desc.iter_mut().zip(d.iter().zip(&clean)) {
            *c += spec.distractor_leak * (dc - cc);
        }
    }
    for c in desc.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut noise);
        *c += knobs.sigma * z;
    }

    let s = spec.feature_scale;
    let mut x = vec![0.0; spec.dim];
    x[0] = spec.bias_feature;
    for (k, c) in desc.iter().enumerate() {
        x[DESC + k] = s * (c - 0.5);
    }
    x[DOMAIN] = if domain == Domain::B { 1.0 } else { 0.0 };
    for (k, d) in distractors.iter().enumerate() {
        let base = DISTRACTORS + 3 * k;
        x[base] = s * ((d[0] + d[2]) / 2.0 - 0.5);
        x[base + 1] = s * ((d[1] + d[3]) / 2.0 - 0.5);
        x[base + 2] = s * ((d[2] - d[0]) * (d[3] - d[1])).sqrt();
    }
    x[DISTRACTOR_COUNT] = knobs.distractors as f64 / MAX_DISTRACTORS as f64;
    for v in x.iter_mut() {
        *v = v.clamp(-CONTEXT_BOUND, CONTEXT_BOUND);
    }
    Ok(SceneSample { id, domain, knobs, gt, x })
}

pub fn generate_sample(spec: &DatasetSpec, id: u64) -> Result<SceneSample> {
    if id >= spec.count() {
        return Err(Error::Config(format!("sample id {id} outside dataset of {}", spec.count())));
    }
    let mut rng = rng::derived(spec.seed, 2 * id);
    let knobs = draw_knobs(spec, id, &mut rng);
    generate_with_knobs(spec, id, knobs)
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SceneSample>> {
    spec.validate()?;
    (0..spec.count()).map(|id| generate_sample(spec, id)).collect()
}

/// Weights that decode noise-free descriptors exactly: at each coordinate
/// position, the logit of bin `k` is `-kappa (c - c_k)^2` up to terms shared
/// by all bins, so the argmax is the bin whose center matches the descriptor.
pub fn oracle_policy<T: Scalar>(spec: &DatasetSpec, kappa: f64) -> Result<PolicyParams<T>> {
    let vocab = spec.vocab()?;
    let mut p = PolicyParams::<T>::zeros(vocab, spec.dim);
    let s = spec.feature_scale;
    let b = spec.bias_feature;
    let sentinel = kappa / b;
    p.row_mut(0, vocab.open())[0] = T::of(sentinel);
    p.row_mut(SEQ_LEN - 1, vocab.close())[0] = T::of(sentinel);
    for t in 1..SEQ_LEN - 1 {
        for k in 0..vocab.bins() {
            let ck: f64 = vocab.bin_center(k);
            // c = x/s + 0.5
            let row = p.row_mut(t, k);
            row[DESC + t - 1] = T::of(2.0 * kappa * ck / s);
            row[0] = T::of((kappa * ck - kappa * ck * ck) / b);
        }
        p.row_mut(t, vocab.open())[0] = T::of(-sentinel);
        p.row_mut(t, vocab.close())[0] = T::of(-sentinel);
    }
    Ok(p)
}

/// Header line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub bins: usize,
    pub dim: usize,
    pub count: u64,
}

pub fn write_dataset<W: Write>(mut w: W, samples: &[SceneSample], spec: &DatasetSpec, config_hash: &str) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        config_hash: config_hash.into(),
        bins: spec.bins,
        dim: spec.dim,
        count: samples.len() as u64,
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SceneSample>)> {
    let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg };
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| bad("empty dataset file".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(bad(format!("unsupported dataset {} v{}", header.format, header.version)));
    }
    let mut samples = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SceneSample = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
        if s.x.len() != header.dim {
            return Err(bad(format!("line {}: x has {} entries, header says {}", n + 2, s.x.len(), header.dim)));
        }
        samples.push(s);
    }
    if samples.len() as u64 != header.count {
        return Err(bad(format!("header count {} but {} records", header.count, samples.len())));
    }
    Ok((header, samples))
}
