//! Independent reference implementations shared by the test targets. They
//! favour obviousness over speed and never call into the library.

#![allow(dead_code)]

use std::f64::consts::PI;

/// Neumaier-compensated sum.
pub fn ksum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

/// Double-double value `hi + lo`, about 106 bits of mantissa.
#[derive(Clone, Copy)]
struct Dd(f64, f64);

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd(s, (a - (s - bb)) + (b - bb))
}

impl Dd {
    fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.0, o.0);
        let t = two_sum(self.1, o.1);
        let u = two_sum(s.0, s.1 + t.0);
        two_sum(u.0, u.1 + t.1)
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.0 * o.0;
        let e = self.0.mul_add(o.0, -p);
        two_sum(p, e + self.0 * o.1 + self.1 * o.0)
    }

    fn div_f64(self, d: f64) -> Dd {
        let q = self.0 / d;
        let r = self.add(Dd(q, 0.0).mul(Dd(-d, 0.0)));
        two_sum(q, r.0 / d)
    }

    fn neg(self) -> Dd {
        Dd(-self.0, -self.1)
    }
}

/// Population skewness and excess kurtosis straight from the definitions,
/// evaluated in double-double so that odd moments of nearly symmetric data
/// are still accurate to well below 1e-12. `None` when the spread is zero.
pub fn shape(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len() as f64;
    let zero = Dd(0.0, 0.0);
    let mu = values.iter().fold(zero, |acc, &x| acc.add(Dd(x, 0.0))).div_f64(n);
    let (mut s2, mut s3, mut s4) = (zero, zero, zero);
    for &x in values {
        let d = Dd(x, 0.0).add(mu.neg());
        let d2 = d.mul(d);
        s2 = s2.add(d2);
        s3 = s3.add(d2.mul(d));
        s4 = s4.add(d2.mul(d2));
    }
    let (m2, m3, m4) = (s2.div_f64(n), s3.div_f64(n), s4.div_f64(n));
    if m2.0 < 1e-24 {
        return None;
    }
    // Ratios in double-double too, rounded once at the end.
    let m2_sq = m2.mul(m2);
    let root = m2.0.sqrt();
    let root = two_sum(root, (m2.add(Dd(root, 0.0).mul(Dd(root, 0.0)).neg()).0) / (2.0 * root));
    let skew = dd_div(m3, m2.mul(root));
    let kurt = dd_div(m4, m2_sq).add(Dd(-3.0, 0.0));
    Some((skew.0 + skew.1, kurt.0 + kurt.1))
}

fn dd_div(a: Dd, b: Dd) -> Dd {
    let q = a.0 / b.0;
    let r = a.add(b.mul(Dd(q, 0.0)).neg());
    two_sum(q, (r.0 + r.1) / b.0)
}

/// One-sided periodogram of a single window by direct O(n^2) DFT:
/// mean removed, periodic Hann taper, `c_k |X_k|^2 / (fs * sum w^2)`.
pub fn dft_periodogram(window: &[f64], rate_hz: f64) -> Vec<f64> {
    let n = window.len();
    let mean = ksum(window.iter().copied()) / n as f64;
    let w: Vec<f64> = (0..n).map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos())).collect();
    let x: Vec<f64> = window.iter().zip(&w).map(|(v, w)| (v - mean) * w).collect();
    let norm = rate_hz * ksum(w.iter().map(|w| w * w));
    // Twiddles indexed by (k*i mod n) keep the phase exact.
    let cos: Vec<f64> = (0..n).map(|j| (2.0 * PI * j as f64 / n as f64).cos()).collect();
    let sin: Vec<f64> = (0..n).map(|j| (2.0 * PI * j as f64 / n as f64).sin()).collect();
    (0..=n / 2)
        .map(|k| {
            let re = ksum((0..n).map(|i| x[i] * cos[(k * i) % n]));
            let im = ksum((0..n).map(|i| -x[i] * sin[(k * i) % n]));
            let c = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
            c * (re * re + im * im) / norm
        })
        .collect()
}

/// Energy in 16 log-spaced bands from 1 Hz to Nyquist, DC excluded, the
/// Nyquist bin in the top band.
pub fn band_energies(power: &[f64], rate_hz: f64, window_len: usize) -> [f64; 16] {
    let nyq = rate_hz / 2.0;
    let edges: Vec<f64> = (0..=16).map(|b| if b == 16 { nyq } else { nyq.powf(b as f64 / 16.0) }).collect();
    let df = rate_hz / window_len as f64;
    let mut out = [0.0; 16];
    for (k, p) in power.iter().enumerate().skip(1) {
        let f = k as f64 * df;
        if f < 1.0 {
            continue;
        }
        let b = (0..16).rev().find(|&b| f >= edges[b]).unwrap();
        out[b] += p * df;
    }
    out
}

pub fn extrema(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    (lo, hi)
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        return 0.0;
    }
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}
