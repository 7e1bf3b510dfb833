//! Population moments and simple descriptive statistics.

use thiserror::Error;

/// Below this second central moment a sample is treated as constant and the
/// shape statistics are reported as 0.
pub const DEGENERATE_VARIANCE: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MomentsError {
    #[error("statistic of an empty sequence")]
    Empty,
}

pub fn mean(values: &[f64]) -> Result<f64, MomentsError> {
    if values.is_empty() {
        return Err(MomentsError::Empty);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Central moments m2, m3, m4 about the sample mean.
///
/// The mean, the deviations and their powers are carried in double-double.
/// For tightly clustered data on a large offset the rounding of an f64 mean
/// shifts m3 by about `3 m2 dmu`, which swamps a near-zero third moment.
fn central_moments(values: &[f64]) -> Result<(f64, f64, f64), MomentsError> {
    if values.is_empty() {
        return Err(MomentsError::Empty);
    }
    let n = values.len() as f64;
    let mu = values.iter().fold(Dd::ZERO, |acc, &x| acc.add_f64(x)).div_f64(n);
    let (mut m2, mut m3, mut m4) = (Dd::ZERO, Dd::ZERO, Dd::ZERO);
    for &x in values {
        let d = mu.neg().add_f64(x);
        let d2 = d.mul(d);
        m2 = m2.add(d2);
        m3 = m3.add(d2.mul(d));
        m4 = m4.add(d2.mul(d2));
    }
    Ok((m2.div_f64(n).to_f64(), m3.div_f64(n).to_f64(), m4.div_f64(n).to_f64()))
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let hi = a + b;
    let v = hi - a;
    Dd { hi, lo: (a - (hi - v)) + (b - v) }
}

/// Dekker's split; no FMA is available without std.
fn split(a: f64) -> (f64, f64) {
    let t = 134_217_729.0 * a; // 2^27 + 1
    let hi = t - (t - a);
    (hi, a - hi)
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    Dd { hi: p, lo: ((ah * bh - p) + ah * bl + al * bh) + al * bl }
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.hi, o.hi);
        let t = two_sum(self.lo, o.lo);
        let u = two_sum(s.hi, s.lo + t.hi);
        two_sum(u.hi, u.lo + t.lo)
    }

    fn add_f64(self, b: f64) -> Dd {
        let s = two_sum(self.hi, b);
        two_sum(s.hi, s.lo + self.lo)
    }

    fn mul(self, o: Dd) -> Dd {
        let p = two_prod(self.hi, o.hi);
        two_sum(p.hi, p.lo + (self.hi * o.lo + self.lo * o.hi))
    }

    fn div_f64(self, d: f64) -> Dd {
        let q = self.hi / d;
        let p = two_prod(q, d);
        let r = (self.hi - p.hi - p.lo + self.lo) / d;
        two_sum(q, r)
    }

    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// Population skewness `m3 / m2^1.5`; 0 for (near-)constant input.
pub fn skewness(values: &[f64]) -> Result<f64, MomentsError> {
    let (m2, m3, _) = central_moments(values)?;
    if m2 < DEGENERATE_VARIANCE {
        return Ok(0.0);
    }
    Ok(m3 / (m2 * libm::sqrt(m2)))
}

/// Population excess kurtosis `m4 / m2^2 - 3`; 0 for (near-)constant input.
pub fn excess_kurtosis(values: &[f64]) -> Result<f64, MomentsError> {
    let (m2, _, m4) = central_moments(values)?;
    if m2 < DEGENERATE_VARIANCE {
        return Ok(0.0);
    }
    Ok(m4 / (m2 * m2) - 3.0)
}

/// The nine time-domain statistics computed for every signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub rms: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub peak_to_peak: f64,
    pub crest_factor: f64,
}

impl TimeStats {
    pub const NAMES: [&'static str; 9] = [
        "min", "max", "mean", "std", "rms", "skewness", "kurtosis", "peak_to_peak", "crest_factor",
    ];

    pub fn compute(values: &[f64]) -> Result<Self, MomentsError> {
        let mean = mean(values)?;
        let (m2, m3, m4) = central_moments(values)?;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum_sq = 0.0;
        let mut peak = 0.0f64;
        for &x in values {
            min = min.min(x);
            max = max.max(x);
            sum_sq += x * x;
            peak = peak.max(x.abs());
        }
        let rms = libm::sqrt(sum_sq / values.len() as f64);
        let (skewness, kurtosis) = if m2 < DEGENERATE_VARIANCE {
            (0.0, 0.0)
        } else {
            (m3 / (m2 * libm::sqrt(m2)), m4 / (m2 * m2) - 3.0)
        };
        Ok(Self {
            min,
            max,
            mean,
            std: libm::sqrt(m2),
            rms,
            skewness,
            kurtosis,
            peak_to_peak: max - min,
            crest_factor: if rms < 1e-12 { 0.0 } else { peak / rms },
        })
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.min,
            self.max,
            self.mean,
            self.std,
            self.rms,
            self.skewness,
            self.kurtosis,
            self.peak_to_peak,
            self.crest_factor,
        ]
    }
}

/// Median of a slice; sorts a private copy. `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = alloc::vec::Vec::from(values);
    Some(median_in_place(&mut v))
}

pub(crate) fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}
