//! Linear-softmax policy over fixed-length token sequences.
//!
//! Position `t` draws its token from `softmax(W_t x)`; positions are
//! conditionally independent given the context `x`, so sequence
//! log-probabilities and the KL divergence between two policies factor into
//! per-position categorical terms.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::boxcodec::{TokenSequence, Vocab, SEQ_LEN};
use crate::rng::Rng;
use crate::{Error, Result, Scalar};

/// Largest allowed magnitude of a context entry.
pub const CONTEXT_BOUND: f64 = 10.0;

pub const CHECKPOINT_MAGIC: &str = "grpo-policy v1";

/// Feature vector describing one scene/query pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Context<T>(Vec<T>);

impl<T: Scalar> Context<T> {
    pub fn new(x: Vec<T>) -> Result<Self> {
        let bound = T::of(CONTEXT_BOUND);
        if let Some(bad) = x.iter().find(|v| !v.is_finite() || v.abs() > bound) {
            return Err(Error::NonFinite(format!(
                "context entry {bad} is not finite or exceeds {CONTEXT_BOUND}"
            )));
        }
        Ok(Self(x))
    }

    pub fn from_f64(x: &[f64]) -> Result<Self> {
        Self::new(x.iter().map(|&v| T::of(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 1.0 }
    }
}

impl SamplerConfig {
    pub fn new(temperature: f64, top_p: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be finite and > 0, got {temperature}")));
        }
        if !(top_p > 0.0 && top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must lie in (0, 1], got {top_p}")));
        }
        Ok(Self { temperature, top_p })
    }
}

/// Weights `W_t` (shape `V x d`) for each of the [`SEQ_LEN`] positions, stored
/// row-major as `[t][v][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    vocab: Vocab,
    dim: usize,
    weights: Vec<T>,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn zeros(vocab: Vocab, dim: usize) -> Self {
        Self { vocab, dim, weights: vec![T::zero(); SEQ_LEN * vocab.size() * dim] }
    }

    pub fn from_weights(vocab: Vocab, dim: usize, weights: Vec<T>) -> Result<Self> {
        let want = SEQ_LEN * vocab.size() * dim;
        if weights.len() != want {
            return Err(Error::Incompatible(format!("expected {want} weights, got {}", weights.len())));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("policy weight".into()));
        }
        Ok(Self { vocab, dim, weights })
    }

    /// I.i.d. Gaussian weights with standard deviation `scale`.
    pub fn random(vocab: Vocab, dim: usize, scale: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        let weights = (0..SEQ_LEN * vocab.size() * dim).map(|_| T::of(normal.sample(rng))).collect();
        Self { vocab, dim, weights }
    }

    /// Weights that emit OPEN first and CLOSE last and keep the sentinels out
    /// of the coordinate positions, with uniform bins in between. Feature
    /// `bias` must be a constant 1 in every context.
    pub fn format_prior(vocab: Vocab, dim: usize, bias: usize, strength: f64) -> Self {
        assert!(bias < dim, "bias feature out of range");
        let mut p = Self::zeros(vocab, dim);
        let s = T::of(strength);
        p.row_mut(0, vocab.open())[bias] = s;
        p.row_mut(SEQ_LEN - 1, vocab.close())[bias] = s;
        for t in 1..SEQ_LEN - 1 {
            p.row_mut(t, vocab.open())[bias] = -s;
            p.row_mut(t, vocab.close())[bias] = -s;
        }
        p
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.weights
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn index(&self, t: usize, v: usize, j: usize) -> usize {
        (t * self.vocab.size() + v) * self.dim + j
    }

    pub fn row(&self, t: usize, v: usize) -> &[T] {
        let start = self.index(t, v, 0);
        &self.weights[start..start + self.dim]
    }

    pub fn row_mut(&mut self, t: usize, v: usize) -> &mut [T] {
        let start = self.index(t, v, 0);
        &mut self.weights[start..start + self.dim]
    }

    /// Deep copy used as a frozen old/reference policy.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.dim == other.dim
    }

    fn check_context(&self, x: &Context<T>) {
        assert_eq!(x.dim(), self.dim, "context dimension does not match policy");
    }

    /// `W_t x`
    pub fn position_logits(&self, x: &Context<T>, t: usize) -> Vec<T> {
        assert!(t < SEQ_LEN, "position {t} out of range");
        self.check_context(x);
        (0..self.vocab.size())
            .map(|v| self.row(t, v).iter().zip(x.as_slice()).map(|(&w, &xi)| w * xi).sum())
            .collect()
    }

    /// Per-position probabilities, `SEQ_LEN` vectors of length `V`.
    pub fn position_probs(&self, x: &Context<T>) -> Vec<Vec<T>> {
        (0..SEQ_LEN).map(|t| softmax(&self.position_logits(x, t))).collect()
    }

    pub fn log_prob(&self, x: &Context<T>, s: &TokenSequence) -> T {
        s.tokens()
            .iter()
            .enumerate()
            .map(|(t, &tok)| log_softmax(&self.position_logits(x, t))[tok])
            .sum()
    }

    /// Draws each position from the temperature-scaled, top-p truncated softmax.
    pub fn sample(&self, x: &Context<T>, cfg: &SamplerConfig, rng: &mut Rng) -> TokenSequence {
        let mut out = [0usize; SEQ_LEN];
        for (t, slot) in out.iter_mut().enumerate() {
            let logits: Vec<f64> = self
                .position_logits(x, t)
                .into_iter()
                .map(|l| l.as_f64() / cfg.temperature)
                .collect();
            *slot = draw_nucleus(&softmax(&logits), cfg.top_p, rng);
        }
        TokenSequence(out)
    }

    /// Argmax decoding; exact ties are broken uniformly at random, which is
    /// the zero-temperature limit of [`PolicyParams::sample`].
    pub fn greedy(&self, x: &Context<T>, rng: &mut Rng) -> TokenSequence {
        let mut out = [0usize; SEQ_LEN];
        for (t, slot) in out.iter_mut().enumerate() {
            let logits = self.position_logits(x, t);
            let best = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let ties: Vec<usize> = (0..logits.len()).filter(|&v| logits[v] == best).collect();
            *slot = if ties.len() == 1 { ties[0] } else { ties[rng.random_range(0..ties.len())] };
        }
        TokenSequence(out)
    }

    /// Writes the text checkpoint: the header line, an optional
    /// `# config_hash=` line, then one line of `d` weights per `(t, v)` row.
    pub fn write_checkpoint<W: Write>(&self, mut w: W, config_hash: Option<&str>) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC} L={SEQ_LEN} V={} d={}", self.vocab.size(), self.dim)?;
        if let Some(h) = config_hash {
            writeln!(w, "# config_hash={h}")?;
        }
        let mut line = String::new();
        for row in self.weights.chunks(self.dim.max(1)) {
            line.clear();
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    line.push(' ');
                }
                write!(line, "{}", v.as_f64()).expect("write to string");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf, config_hash)?;
        crate::io::write_atomic(path, &buf)
    }

    /// Returns the policy and the embedded config hash, if any.
    pub fn read_checkpoint<R: Read>(r: R, origin: &Path) -> Result<(Self, Option<String>)> {
        let bad = |msg: String| Error::Format { path: origin.to_path_buf(), msg };
        let mut lines = BufReader::new(r).lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
        let rest = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| bad(format!("bad header {header:?}")))?;
        let mut fields = std::collections::HashMap::new();
        for kv in rest.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad header field {kv:?}")))?;
            let v: usize = v.parse().map_err(|_| bad(format!("bad header value {kv:?}")))?;
            fields.insert(k.to_string(), v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("header lacks {k}")));
        let (len, size, dim) = (get("L")?, get("V")?, get("d")?);
        if len != SEQ_LEN {
            return Err(bad(format!("sequence length {len} unsupported")));
        }
        let vocab = Vocab::new(size.checked_sub(2).ok_or_else(|| bad("V < 2".into()))?)
            .map_err(|e| bad(e.to_string()))?;
        let mut hash = None;
        let mut weights = Vec::with_capacity(SEQ_LEN * size * dim);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if let Some(h) = line.strip_prefix("# config_hash=") {
                hash = Some(h.trim().to_string());
                continue;
            }
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| bad(format!("line {}: bad number {tok:?}", n + 2)))?;
                weights.push(T::of(v));
            }
        }
        let params = Self::from_weights(vocab, dim, weights).map_err(|e| bad(e.to_string()))?;
        Ok((params, hash))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        Self::read_checkpoint(std::fs::File::open(path)?, path)
    }
}

/// `sum_t KL(softmax(W_t x) || softmax(W_t^ref x))` in nats.
pub fn kl_exact<T: Scalar>(theta: &PolicyParams<T>, reference: &PolicyParams<T>, x: &Context<T>) -> T {
    assert!(theta.same_shape(reference), "policies differ in shape");
    (0..SEQ_LEN)
        .map(|t| {
            categorical_kl(
                &log_softmax(&theta.position_logits(x, t)),
                &log_softmax(&reference.position_logits(x, t)),
            )
        })
        .sum()
}

/// Sampled estimate `mean[log pi(s) - log pi_ref(s)]` with `s ~ pi`; a
/// check on [`kl_exact`], not used by training.
pub fn kl_monte_carlo<T: Scalar>(
    theta: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    x: &Context<T>,
    samples: usize,
    rng: &mut Rng,
) -> f64 {
    let cfg = SamplerConfig::default();
    let total: f64 = (0..samples)
        .map(|_| {
            let s = theta.sample(x, &cfg, rng);
            (theta.log_prob(x, &s) - reference.log_prob(x, &s)).as_f64()
        })
        .sum();
    total / samples as f64
}

/// KL between two categoricals given as log-probabilities. Clamped at zero
/// against roundoff.
pub fn categorical_kl<T: Scalar>(logp: &[T], logq: &[T]) -> T {
    let kl: T = logp.iter().zip(logq).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum();
    kl.max(T::zero())
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Smallest prefix of tokens, by descending probability, whose mass reaches
/// `top_p`; returns the sampled index.
fn draw_nucleus(probs: &[f64], top_p: f64, rng: &mut Rng) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    let kept = if top_p >= 1.0 {
        probs.len()
    } else {
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut mass = 0.0;
        let mut n = 0;
        for &i in &order {
            mass += probs[i];
            n += 1;
            if mass >= top_p {
                break;
            }
        }
        n
    };
    let kept = &order[..kept];
    let total: f64 = kept.iter().map(|&i| probs[i]).sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for &i in kept {
        acc += probs[i];
        if u < acc {
            return i;
        }
    }
    *kept.last().expect("nonempty vocabulary")
}
