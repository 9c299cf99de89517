//! Token vocabulary and the mapping between 6-token sequences and boxes.
//!
//! A well-formed sequence is `[OPEN, x1, y1, x2, y2, CLOSE]` where the four
//! middle tokens are coordinate bins with `x1 < x2` and `y1 < y2`. Bins are
//! decoded to their centers `(k + 0.5) / B`.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::{Error, Result, Scalar};

/// Tokens emitted per sequence.
pub const SEQ_LEN: usize = 6;

/// Coordinate bins per axis plus the two sentinels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    bins: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    bins: usize,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;
    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocab::new(r.bins)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { bins: v.bins }
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self { bins: 32 }
    }
}

impl Vocab {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidVocab(format!("need at least 2 bins, got {bins}")));
        }
        Ok(Self { bins })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn open(&self) -> usize {
        self.bins
    }

    pub fn close(&self) -> usize {
        self.bins + 1
    }

    /// Vocabulary size `V = B + 2`.
    pub fn size(&self) -> usize {
        self.bins + 2
    }

    pub fn is_bin(&self, tok: usize) -> bool {
        tok < self.bins
    }

    /// `min(floor(c * B), B - 1)`
    pub fn quantize<T: Scalar>(&self, c: T) -> usize {
        let k = (c * T::of(self.bins as f64)).floor().max(T::zero());
        k.to_usize().unwrap_or(0).min(self.bins - 1)
    }

    pub fn bin_center<T: Scalar>(&self, k: usize) -> T {
        (T::of(k as f64) + T::of(0.5)) / T::of(self.bins as f64)
    }
}

/// Exactly [`SEQ_LEN`] token ids. Well-formedness is checked separately by
/// [`validate_format`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub [usize; SEQ_LEN]);

impl TokenSequence {
    pub fn tokens(&self) -> &[usize; SEQ_LEN] {
        &self.0
    }
}

impl From<[usize; SEQ_LEN]> for TokenSequence {
    fn from(t: [usize; SEQ_LEN]) -> Self {
        Self(t)
    }
}

fn ordered_bins(lo: usize, hi: usize, bins: usize) -> Option<(usize, usize)> {
    if lo < hi {
        Some((lo, hi))
    } else if hi + 1 < bins {
        Some((lo, hi + 1))
    } else {
        None
    }
}

pub fn encode_box<T: Scalar>(b: &BBox<T>, v: &Vocab) -> Result<TokenSequence> {
    let n = v.bins();
    let thin = || Error::Unquantizable { bins: n };
    let (x1, x2) = ordered_bins(v.quantize(b.x1()), v.quantize(b.x2()), n).ok_or_else(thin)?;
    let (y1, y2) = ordered_bins(v.quantize(b.y1()), v.quantize(b.y2()), n).ok_or_else(thin)?;
    Ok(TokenSequence([v.open(), x1, y1, x2, y2, v.close()]))
}

pub fn validate_format(s: &TokenSequence, v: &Vocab) -> bool {
    let t = s.tokens();
    t[0] == v.open()
        && t[5] == v.close()
        && t[1..5].iter().all(|&k| v.is_bin(k))
        && t[1] < t[3]
        && t[2] < t[4]
}

/// `None` is the format-failure branch: the sequence earns no IoU reward.
pub fn decode_sequence<T: Scalar>(s: &TokenSequence, v: &Vocab) -> Option<BBox<T>> {
    if !validate_format(s, v) {
        return None;
    }
    let t = s.tokens();
    let c = |k| v.bin_center::<T>(k);
    // centers of ordered bins are ordered and inside (0, 1)
    Some(BBox::new(c(t[1]), c(t[2]), c(t[3]), c(t[4])).expect("well-formed sequence decodes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::rng;
    use rand::Rng as _;

    const B32: Vocab = Vocab { bins: 32 };

    #[test]
    fn vocab_layout() {
        assert!(Vocab::new(1).is_err());
        let v = Vocab::new(4).unwrap();
        assert_eq!((v.open(), v.close(), v.size()), (4, 5, 6));
    }

    #[test]
    fn encode_full_frame() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(encode_box(&b, &B32).unwrap().0, [32, 0, 0, 31, 31, 33]);
    }

    #[test]
    fn encode_mid_box() {
        let b = BBox::new(0.5, 0.5, 0.6, 0.6).unwrap();
        // floor(16.0) = 16, floor(19.2) = 19
        assert_eq!(B32.quantize(0.5), 16);
        assert_eq!(B32.quantize(0.6), 19);
        assert_eq!(encode_box(&b, &B32).unwrap().0, [32, 16, 16, 19, 19, 33]);
    }

    #[test]
    fn encode_bumps_collapsed_bins() {
        let b = BBox::new(0.50, 0.50, 0.51, 0.52).unwrap();
        assert_eq!(encode_box(&b, &B32).unwrap().0, [32, 16, 16, 17, 17, 33]);
        let thin = BBox::new(0.99, 0.1, 1.0, 0.5).unwrap();
        assert!(matches!(encode_box(&thin, &B32), Err(Error::Unquantizable { .. })));
    }

    #[test]
    fn format_examples() {
        let v = B32;
        assert!(validate_format(&TokenSequence([32, 2, 3, 10, 12, 33]), &v));
        assert!(!validate_format(&TokenSequence([32, 10, 3, 2, 12, 33]), &v));
        assert!(!validate_format(&TokenSequence([2, 2, 3, 10, 12, 33]), &v));
        assert!(!validate_format(&TokenSequence([32, 2, 3, 10, 33, 33]), &v));
    }

    #[test]
    fn decode_examples() {
        let b: BBox<f64> = decode_sequence(&TokenSequence([32, 0, 0, 31, 31, 33]), &B32).unwrap();
        assert_eq!(b.corners(), [0.015625, 0.015625, 0.984375, 0.984375]);
        assert!(decode_sequence::<f64>(&TokenSequence([32, 16, 16, 16, 20, 33]), &B32).is_none());
    }

    fn random_box(rng: &mut rng::Rng, min_side: f64) -> BBox<f64> {
        loop {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            let (c, d): (f64, f64) = (rng.random(), rng.random());
            let (x1, x2) = (a.min(b), a.max(b));
            let (y1, y2) = (c.min(d), c.max(d));
            if x2 - x1 >= min_side && y2 - y1 >= min_side {
                return BBox::new(x1, y1, x2, y2).unwrap();
            }
        }
    }

    #[test]
    fn round_trip_is_well_formed_above_two_bins() {
        let mut rng = rng::seeded(11);
        for _ in 0..1000 {
            let b = random_box(&mut rng, 2.0 / 32.0);
            let s = encode_box(&b, &B32).unwrap();
            assert!(validate_format(&s, &B32));
            assert!(decode_sequence::<f64>(&s, &B32).is_some());
        }
    }

    /// Each decoded edge lies within half a bin of the true edge, so with
    /// u = 1/B: inter >= (w-u)(h-u) and union <= wh + 2u(w+h).
    fn round_trip_floor(b: &BBox<f64>, bins: usize) -> f64 {
        let u = 1.0 / bins as f64;
        let (w, h) = (b.width(), b.height());
        (w - u) * (h - u) / (w * h + 2.0 * u * (w + h))
    }

    #[test]
    fn round_trip_overlap_bound() {
        let mut rng = rng::seeded(12);
        let mut total = 0.0;
        for _ in 0..1000 {
            let b = random_box(&mut rng, 4.0 / 32.0);
            let d: BBox<f64> = decode_sequence(&encode_box(&b, &B32).unwrap(), &B32).unwrap();
            let v = iou(&b, &d);
            assert!(v >= round_trip_floor(&b, 32) - 1e-12, "{b:?} -> {v}");
            total += v;
        }
        assert!(total / 1000.0 >= 1.0 - 4.0 / 32.0);
    }
}
