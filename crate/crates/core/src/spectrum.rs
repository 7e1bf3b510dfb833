//! Welch-averaged periodogram and the spectral features derived from it.
//!
//! Windows are 2048 samples with 50% overlap. Each window has its mean
//! removed and is multiplied by a periodic Hann taper before the FFT; a final
//! partial window is discarded. The one-sided density is
//! `P[k] = c_k |X[k]|^2 / (fs * sum w^2)` with `c_k = 2` except at DC and
//! Nyquist.
//!
//! Band energies integrate `P` over 16 log-spaced bands between 1 Hz and the
//! Nyquist frequency. The DC bin never contributes. When the signal carries
//! no measurable AC energy the band vector falls back to uniform (entropy of
//! exactly 4 bits) and the remaining features to 0.

use alloc::vec::Vec;
use core::f64::consts::PI;

use thiserror::Error;

use crate::fft::{Complex, Fft};

pub const WINDOW_LEN: usize = 2048;
pub const HOP: usize = WINDOW_LEN / 2;
pub const N_BANDS: usize = 16;
pub const LOWEST_BAND_HZ: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SpectrumError {
    #[error("spectrum needs at least {WINDOW_LEN} samples, got {0}")]
    TooShort(usize),
    #[error("sample rate must be positive")]
    BadRate,
}

/// Periodic Hann taper of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * libm::cos(2.0 * PI * i as f64 / n as f64))
        .collect()
}

/// `N_BANDS + 1` log-spaced edges from 1 Hz to `rate_hz / 2`.
pub fn band_edges(rate_hz: f64) -> [f64; N_BANDS + 1] {
    let top = rate_hz / 2.0;
    let ratio = top / LOWEST_BAND_HZ;
    let mut edges = [0.0; N_BANDS + 1];
    for (b, e) in edges.iter_mut().enumerate() {
        *e = LOWEST_BAND_HZ * libm::pow(ratio, b as f64 / N_BANDS as f64);
    }
    edges[N_BANDS] = top;
    edges
}

/// Band index for a frequency, or `None` outside `[1 Hz, Nyquist]`. The
/// Nyquist frequency itself belongs to the last band.
pub fn band_of(freq_hz: f64, edges: &[f64; N_BANDS + 1]) -> Option<usize> {
    if freq_hz < edges[0] || freq_hz > edges[N_BANDS] {
        return None;
    }
    Some((0..N_BANDS).rev().find(|&b| freq_hz >= edges[b]).unwrap_or(0))
}

/// Averaged one-sided power spectral density, bins `0..=WINDOW_LEN/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Periodogram {
    pub rate_hz: f64,
    pub n_windows: usize,
    pub power: Vec<f64>,
    /// Same scaling as `power`, computed on the tapered signal before mean
    /// removal; used as the reference level for the no-AC-energy guard.
    pub raw_level: f64,
}

impl Periodogram {
    pub fn welch(values: &[f64], rate_hz: f64) -> Result<Self, SpectrumError> {
        if !(rate_hz > 0.0) {
            return Err(SpectrumError::BadRate);
        }
        if values.len() < WINDOW_LEN {
            return Err(SpectrumError::TooShort(values.len()));
        }
        let fft = Fft::new(WINDOW_LEN);
        let taper = hann(WINDOW_LEN);
        let taper_energy: f64 = taper.iter().map(|w| w * w).sum();
        let scale = 1.0 / (rate_hz * taper_energy);
        let n_bins = WINDOW_LEN / 2 + 1;
        let mut power = alloc::vec![0.0; n_bins];
        let mut raw_level = 0.0;
        let mut buf = alloc::vec![Complex::ZERO; WINDOW_LEN];
        let mut n_windows = 0;
        let mut start = 0;
        while start + WINDOW_LEN <= values.len() {
            let window = &values[start..start + WINDOW_LEN];
            let mean = window.iter().sum::<f64>() / WINDOW_LEN as f64;
            for ((slot, &x), &w) in buf.iter_mut().zip(window).zip(&taper) {
                raw_level += (x * w) * (x * w);
                *slot = Complex::new((x - mean) * w, 0.0);
            }
            fft.forward(&mut buf);
            for (k, p) in power.iter_mut().enumerate() {
                let one_sided = if k == 0 || k == WINDOW_LEN / 2 { 1.0 } else { 2.0 };
                *p += one_sided * buf[k].norm_sqr() * scale;
            }
            n_windows += 1;
            start += HOP;
        }
        for p in &mut power {
            *p /= n_windows as f64;
        }
        // Parseval: sum |X|^2 = N * sum x^2.
        raw_level *= 2.0 * WINDOW_LEN as f64 * scale / n_windows as f64;
        Ok(Self { rate_hz, n_windows, power, raw_level })
    }

    pub fn bin_hz(&self) -> f64 {
        self.rate_hz / WINDOW_LEN as f64
    }

    pub fn frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.rate_hz / WINDOW_LEN as f64
    }

    /// Un-normalised energy per band: `sum P[k] * df` over the band's bins.
    pub fn band_energies(&self) -> [f64; N_BANDS] {
        let edges = band_edges(self.rate_hz);
        let df = self.bin_hz();
        let mut bands = [0.0; N_BANDS];
        for (k, &p) in self.power.iter().enumerate().skip(1) {
            if let Some(b) = band_of(self.frequency(k), &edges) {
                bands[b] += p * df;
            }
        }
        bands
    }

    fn ac_total(&self) -> f64 {
        self.power.iter().skip(1).sum()
    }

    fn has_ac_energy(&self) -> bool {
        self.ac_total() > 1e-24 * (1.0 + self.raw_level)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumFeatures {
    /// Normalised to sum 1.
    pub band_energies: [f64; N_BANDS],
    pub dominant_freq_hz: f64,
    pub dominant_magnitude: f64,
    pub spectral_centroid_hz: f64,
    /// Shannon entropy of `band_energies`, bits.
    pub spectral_entropy: f64,
}

impl SpectrumFeatures {
    pub fn from_periodogram(pg: &Periodogram) -> Self {
        let raw_bands = pg.band_energies();
        let band_total: f64 = raw_bands.iter().sum();
        if !pg.has_ac_energy() || !(band_total > 0.0) {
            return Self {
                band_energies: [1.0 / N_BANDS as f64; N_BANDS],
                dominant_freq_hz: 0.0,
                dominant_magnitude: 0.0,
                spectral_centroid_hz: 0.0,
                spectral_entropy: libm::log2(N_BANDS as f64),
            };
        }
        let mut band_energies = raw_bands;
        for e in &mut band_energies {
            *e /= band_total;
        }
        let mut dominant = 1;
        for k in 2..pg.power.len() {
            if pg.power[k] > pg.power[dominant] {
                dominant = k;
            }
        }
        let ac_total = pg.ac_total();
        let centroid = pg
            .power
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, &p)| pg.frequency(k) * p)
            .sum::<f64>()
            / ac_total;
        Self {
            band_energies,
            dominant_freq_hz: pg.frequency(dominant),
            dominant_magnitude: pg.power[dominant],
            spectral_centroid_hz: centroid,
            spectral_entropy: entropy_bits(&band_energies),
        }
    }

    /// Flattened in catalog order: 16 bands, dominant frequency, dominant
    /// magnitude, centroid, entropy.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(N_BANDS + 4);
        v.extend_from_slice(&self.band_energies);
        v.extend_from_slice(&[
            self.dominant_freq_hz,
            self.dominant_magnitude,
            self.spectral_centroid_hz,
            self.spectral_entropy,
        ]);
        v
    }
}

pub fn entropy_bits(distribution: &[f64]) -> f64 {
    let h: f64 = distribution
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * libm::log2(p))
        .sum();
    // Avoid printing -0.0 for a single-band distribution.
    h.max(0.0)
}

pub fn spectrum_features(values: &[f64], rate_hz: f64) -> Result<SpectrumFeatures, SpectrumError> {
    Ok(SpectrumFeatures::from_periodogram(&Periodogram::welch(values, rate_hz)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64Star;

    fn sine(freq: f64, rate: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * libm::sin(2.0 * PI * freq * i as f64 / rate)).collect()
    }

    #[test]
    fn sine_at_64_hz() {
        let f = spectrum_features(&sine(64.0, 2048.0, 4096, 1.0), 2048.0).unwrap();
        assert_eq!(f.dominant_freq_hz, 64.0);
        let edges = band_edges(2048.0);
        let band = band_of(64.0, &edges).unwrap();
        assert!(f.band_energies[band] > 0.99, "{:?}", f.band_energies);
    }

    #[test]
    fn window_count_discards_partial() {
        let pg = Periodogram::welch(&alloc::vec![0.5; 4096 + 1000], 2048.0).unwrap();
        // starts 0, 1024, 2048, 3072 (3072 + 2048 = 5120 > 5096 is excluded)
        assert_eq!(pg.n_windows, 3);
    }

    #[test]
    fn dc_signal_hits_guard() {
        let f = spectrum_features(&alloc::vec![3.7; 4096], 2048.0).unwrap();
        assert_eq!(f.band_energies, [1.0 / 16.0; 16]);
        assert_eq!(f.spectral_entropy, 4.0);
        assert_eq!(f.dominant_magnitude, 0.0);
        assert_eq!(f.dominant_freq_hz, 0.0);
        assert_eq!(f.spectral_centroid_hz, 0.0);
    }

    #[test]
    fn zero_signal_hits_guard() {
        let f = spectrum_features(&alloc::vec![0.0; 2048], 2048.0).unwrap();
        assert_eq!(f.spectral_entropy, 4.0);
    }

    #[test]
    fn white_noise_entropy_matches_band_widths() {
        // A flat density puts energy into each band in proportion to the
        // number of bins it covers, so the expected entropy is that of the
        // bin-count distribution, well below 4 bits for log-spaced bands.
        let edges = band_edges(2048.0);
        let mut weight = [0.0; N_BANDS];
        for k in 1..=WINDOW_LEN / 2 {
            let b = band_of(k as f64, &edges).unwrap();
            weight[b] += if k == WINDOW_LEN / 2 { 1.0 } else { 2.0 };
        }
        let total: f64 = weight.iter().sum();
        let expected = entropy_bits(&weight.map(|w| w / total));

        let mut rng = XorShift64Star::new(99);
        let x: Vec<f64> = (0..2048 * 64).map(|_| rng.gaussian()).collect();
        let f = spectrum_features(&x, 2048.0).unwrap();
        assert!((f.spectral_entropy - expected).abs() < 0.05, "{} vs {expected}", f.spectral_entropy);
        assert!(expected < 3.5);
    }

    #[test]
    fn amplitude_scaling() {
        let x = sine(200.0, 2048.0, 8192, 1.0);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = spectrum_features(&x, 2048.0).unwrap();
        let b = spectrum_features(&y, 2048.0).unwrap();
        for (p, q) in a.band_energies.iter().zip(&b.band_energies) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!((b.dominant_magnitude / a.dominant_magnitude - 4.0).abs() < 1e-9);
    }

    #[test]
    fn too_short() {
        assert_eq!(
            spectrum_features(&[0.0; 100], 2048.0),
            Err(SpectrumError::TooShort(100))
        );
    }

    #[test]
    fn edges_span_nyquist() {
        let e = band_edges(2048.0);
        assert_eq!(e[0], 1.0);
        assert_eq!(e[16], 1024.0);
        assert!(e.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(band_of(1024.0, &e), Some(15));
        assert_eq!(band_of(0.5, &e), None);
    }
}
