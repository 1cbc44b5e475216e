//! Fixed-layout cost histograms and the symmetrized Kullback-Leibler distance.

use serde::{Deserialize, Serialize};

use crate::cost_model::WET_COST;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Linear,
    Log10,
}

impl Transform {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Transform::Linear => v,
            Transform::Log10 => v.log10(),
        }
    }
}

/// How values are mapped to bins.
///
/// Values go through `transform`, are clamped to `[lo, hi]` and land in
/// half-open bins `[edge_i, edge_{i+1})`, the last bin closed. With `wet_bin`
/// an extra final bin collects costs at the wet sentinel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct BinningSpec {
    bin_count: usize,
    transform: Transform,
    lo: f64,
    hi: f64,
    wet_bin: bool,
}

#[derive(Deserialize)]
struct RawSpec {
    bin_count: usize,
    transform: Transform,
    lo: f64,
    hi: f64,
    wet_bin: bool,
}

impl TryFrom<RawSpec> for BinningSpec {
    type Error = Error;

    fn try_from(r: RawSpec) -> Result<Self> {
        BinningSpec::new(r.bin_count, r.transform, r.lo, r.hi, r.wet_bin)
    }
}

impl BinningSpec {
    pub fn new(bin_count: usize, transform: Transform, lo: f64, hi: f64, wet_bin: bool) -> Result<Self> {
        if bin_count < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {bin_count}")));
        }
        if bin_count > u16::MAX as usize {
            return Err(Error::Config(format!("too many bins: {bin_count}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("bin range [{lo}, {hi}] is empty")));
        }
        Ok(Self {
            bin_count,
            transform,
            lo,
            hi,
            wet_bin,
        })
    }

    /// 256 log10 bins over `[1e-2, 1e6]` plus a wet bin; used for reporting.
    pub fn report() -> Self {
        Self::log_bins(256)
    }

    /// 64 log10 bins over the same range; used inside the crop search.
    pub fn search() -> Self {
        Self::log_bins(64)
    }

    /// `bins` log10 bins over `[1e-2, 1e6]` with a wet bin.
    pub fn log_bins(bins: usize) -> Self {
        Self::new(bins, Transform::Log10, -2.0, 6.0, true).expect("valid default spec")
    }

    #[inline]
    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    #[inline]
    pub fn transform(&self) -> Transform {
        self.transform
    }

    #[inline]
    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    #[inline]
    pub fn has_wet_bin(&self) -> bool {
        self.wet_bin
    }

    /// Length of the count vector, wet bin included.
    #[inline]
    pub fn total_bins(&self) -> usize {
        self.bin_count + self.wet_bin as usize
    }

    #[inline]
    pub fn bin_of(&self, value: f64) -> usize {
        if self.wet_bin && value >= WET_COST {
            return self.bin_count;
        }
        let t = self.transform.apply(value);
        // NaN and -inf (log of zero) both fall to the low edge.
        let t = if t >= self.lo { t.min(self.hi) } else { self.lo };
        let pos = (t - self.lo) / (self.hi - self.lo) * self.bin_count as f64;
        (pos as usize).min(self.bin_count - 1)
    }
}

impl Default for BinningSpec {
    fn default() -> Self {
        Self::report()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHistogram")]
pub struct Histogram {
    spec: BinningSpec,
    counts: Vec<u64>,
    #[serde(skip_serializing)]
    total: u64,
}

#[derive(Deserialize)]
struct RawHistogram {
    spec: BinningSpec,
    counts: Vec<u64>,
}

impl TryFrom<RawHistogram> for Histogram {
    type Error = Error;

    fn try_from(r: RawHistogram) -> Result<Self> {
        Histogram::from_counts(r.spec, r.counts)
    }
}

impl Histogram {
    pub fn from_counts(spec: BinningSpec, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != spec.total_bins() {
            return Err(Error::Config(format!(
                "{} counts for a spec with {} bins",
                counts.len(),
                spec.total_bins()
            )));
        }
        let total = counts.iter().sum();
        Ok(Self { spec, counts, total })
    }

    #[inline]
    pub fn spec(&self) -> &BinningSpec {
        &self.spec
    }

    #[inline]
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    #[inline]
    pub fn total(&self) -> u64 {
        self.total
    }

    /// Elementwise sum of two histograms with the same spec.
    pub fn merge(&self, other: &Histogram) -> Result<Histogram> {
        if self.spec != other.spec {
            return Err(Error::SpecMismatch);
        }
        let counts = self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect();
        Histogram::from_counts(self.spec, counts)
    }
}

pub fn build_histogram(values: &[f64], spec: &BinningSpec) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::Domain("cannot build a histogram of no values".into()));
    }
    let mut counts = vec![0u64; spec.total_bins()];
    for &v in values {
        counts[spec.bin_of(v)] += 1;
    }
    Histogram::from_counts(*spec, counts)
}

/// Smoothing mass added to every normalized bin: `1 / (10 max(n_p, n_q))`.
#[inline]
pub(crate) fn smoothing_epsilon(total_p: u64, total_q: u64) -> f64 {
    1.0 / (10.0 * total_p.max(total_q) as f64)
}

/// Smoothed probability of a bin: `(count / total + eps) / (1 + bins * eps)`.
#[inline]
pub(crate) fn smoothed(count: u64, total: u64, eps: f64, norm: f64) -> f64 {
    (count as f64 / total as f64 + eps) / norm
}

#[inline]
pub(crate) fn sym_term(p: f64, ln_p: f64, q: f64, ln_q: f64) -> f64 {
    (p - q) * (ln_p - ln_q)
}

/// Symmetrized KL distance in nats,
/// `Σ P ln(P/Q) + Σ Q ln(Q/P) = Σ (P - Q)(ln P - ln Q)`, over smoothed
/// normalized counts. Bins are summed in ascending order, and each term is
/// exactly antisymmetric under swapping the arguments, so the result is
/// bit-for-bit symmetric.
pub fn kl_sym(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.spec != q.spec {
        return Err(Error::SpecMismatch);
    }
    if p.total == 0 || q.total == 0 {
        return Err(Error::Domain("histogram with zero total".into()));
    }
    let eps = smoothing_epsilon(p.total, q.total);
    let norm = 1.0 + p.counts.len() as f64 * eps;
    let mut acc = 0.0;
    for (&cp, &cq) in p.counts.iter().zip(&q.counts) {
        let a = smoothed(cp, p.total, eps, norm);
        let b = smoothed(cq, q.total, eps, norm);
        acc += sym_term(a, a.ln(), b, b.ln());
    }
    Ok(acc.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec2() -> BinningSpec {
        BinningSpec::new(2, Transform::Log10, 0.0, 2.0, false).unwrap()
    }

    #[test]
    fn half_open_bins_and_clamping() {
        let h = build_histogram(&[1.0, 10.0, 100.0], &spec2()).unwrap();
        assert_eq!(h.counts(), &[1, 2]);
        assert_eq!(h.total(), 3);
        // Out-of-range values clamp to the end bins, zero included.
        let h = build_histogram(&[0.0, 1e-9, 1e9], &spec2()).unwrap();
        assert_eq!(h.counts(), &[2, 1]);
    }

    #[test]
    fn wet_values_use_the_wet_bin() {
        let spec = BinningSpec::new(4, Transform::Linear, 0.0, 4.0, true).unwrap();
        let h = build_histogram(&[0.5, WET_COST, 3.9, WET_COST], &spec).unwrap();
        assert_eq!(h.counts(), &[1, 0, 0, 1, 2]);
        let dry = BinningSpec::new(4, Transform::Linear, 0.0, 4.0, false).unwrap();
        let h = build_histogram(&[WET_COST], &dry).unwrap();
        assert_eq!(h.counts(), &[0, 0, 0, 1]);
    }

    #[test]
    fn equal_values_fill_a_single_bin() {
        let h = build_histogram(&[3.3; 50], &BinningSpec::report()).unwrap();
        assert_eq!(h.counts().iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.counts().iter().max(), Some(&50));
    }

    #[test]
    fn invalid_inputs() {
        assert!(build_histogram(&[], &spec2()).is_err());
        assert!(BinningSpec::new(1, Transform::Linear, 0.0, 1.0, false).is_err());
        assert!(BinningSpec::new(4, Transform::Linear, 1.0, 1.0, false).is_err());
        let a = build_histogram(&[1.0], &spec2()).unwrap();
        let b = build_histogram(&[1.0], &BinningSpec::search()).unwrap();
        assert!(matches!(kl_sym(&a, &b), Err(Error::SpecMismatch)));
    }

    #[test]
    fn kl_of_identical_histograms_is_zero() {
        let h = build_histogram(&[0.1, 0.5, 2.0, 2.0, 90.0], &BinningSpec::search()).unwrap();
        assert_eq!(kl_sym(&h, &h).unwrap(), 0.0);
    }

    /// Four-term oracle: (0.5,0.5) against (0.25,0.75).
    #[test]
    fn kl_matches_hand_summation() {
        let oracle = {
            let (p, q) = ([0.5f64, 0.5], [0.25f64, 0.75]);
            let mut s = 0.0;
            for i in 0..2 {
                s += p[i] * (p[i] / q[i]).ln();
                s += q[i] * (q[i] / p[i]).ln();
            }
            s
        };
        assert!((oracle - 0.2747).abs() < 1e-3);
        let spec = BinningSpec::new(2, Transform::Linear, 0.0, 2.0, false).unwrap();
        let p = Histogram::from_counts(spec, vec![500_000, 500_000]).unwrap();
        let q = Histogram::from_counts(spec, vec![250_000, 750_000]).unwrap();
        let d = kl_sym(&p, &q).unwrap();
        assert!((d - oracle).abs() < 1e-5, "{d} vs {oracle}");
    }

    #[test]
    fn empty_bins_stay_finite() {
        let spec = BinningSpec::new(3, Transform::Linear, 0.0, 3.0, false).unwrap();
        let p = Histogram::from_counts(spec, vec![10, 0, 0]).unwrap();
        let q = Histogram::from_counts(spec, vec![0, 0, 10]).unwrap();
        let d = kl_sym(&p, &q).unwrap();
        assert!(d.is_finite() && d > 1.0);
    }

    #[test]
    fn json_round_trip() {
        let h = build_histogram(&[0.2, 7.0, WET_COST], &BinningSpec::search()).unwrap();
        let s = serde_json::to_string(&h).unwrap();
        assert!(s.contains("\"counts\""));
        let back: Histogram = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
        let bad = s.replace("\"bin_count\":64", "\"bin_count\":1");
        assert!(serde_json::from_str::<Histogram>(&bad).is_err());
    }

    fn counts_strategy() -> impl Strategy<Value = (Vec<u64>, Vec<u64>)> {
        (2usize..20).prop_flat_map(|n| {
            (
                prop::collection::vec(0u64..1000, n),
                prop::collection::vec(0u64..1000, n),
            )
        })
    }

    proptest! {
        #[test]
        fn kl_is_symmetric_and_nonnegative((a, b) in counts_strategy()) {
            prop_assume!(a.iter().sum::<u64>() > 0 && b.iter().sum::<u64>() > 0);
            let spec = BinningSpec::new(a.len(), Transform::Linear, 0.0, 1.0, false).unwrap();
            let p = Histogram::from_counts(spec, a).unwrap();
            let q = Histogram::from_counts(spec, b).unwrap();
            let d1 = kl_sym(&p, &q).unwrap();
            let d2 = kl_sym(&q, &p).unwrap();
            prop_assert!(d1 >= 0.0);
            prop_assert_eq!(d1.to_bits(), d2.to_bits());
        }

        /// Scaling P leaves the distance unchanged as long as the smoothing
        /// mass (tied to the larger total) is unchanged, i.e. Q stays larger.
        #[test]
        fn kl_ignores_count_scaling((a, b) in counts_strategy(), m in 2u64..50) {
            let total_a: u64 = a.iter().sum();
            prop_assume!(total_a > 0 && b.iter().sum::<u64>() > 0);
            let spec = BinningSpec::new(a.len(), Transform::Linear, 0.0, 1.0, false).unwrap();
            let q = Histogram::from_counts(spec, b.iter().map(|c| c * m * total_a).collect()).unwrap();
            let p = Histogram::from_counts(spec, a.clone()).unwrap();
            let pm = Histogram::from_counts(spec, a.iter().map(|c| c * m).collect()).unwrap();
            let d = kl_sym(&p, &q).unwrap();
            let dm = kl_sym(&pm, &q).unwrap();
            prop_assert!((d - dm).abs() <= 1e-12 * d.max(1.0), "{} vs {}", d, dm);
        }

        #[test]
        fn histograms_are_additive(
            a in prop::collection::vec(0.0f64..1e5, 1..100),
            b in prop::collection::vec(0.0f64..1e5, 1..100),
        ) {
            let spec = BinningSpec::search();
            let mut all = a.clone();
            all.extend_from_slice(&b);
            let ha = build_histogram(&a, &spec).unwrap();
            let hb = build_histogram(&b, &spec).unwrap();
            let hab = build_histogram(&all, &spec).unwrap();
            prop_assert_eq!(ha.merge(&hb).unwrap(), hab);
        }
    }
}
