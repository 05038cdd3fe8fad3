//! Spectral and autocorrelation primitives shared by the landmark and
//! biomarker extractors, plus the DSP configuration they both read.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

/// Thresholds and window sizes for feature extraction.
///
/// `voicing_threshold` is the single periodicity cutoff used both for
/// biomarker voicing and for periodicity landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DspConfig {
    pub voicing_threshold: f64,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    pub stft_win_s: f64,
    pub stft_hop_s: f64,
    pub coarse_smooth_s: f64,
    pub fine_smooth_s: f64,
    pub coarse_rise_db: f64,
    pub fine_rise_db: f64,
    pub confirm_window_s: f64,
    /// Events in different bands closer than this are one landmark.
    pub group_window_s: f64,
    /// Band 1 must exceed the mean of bands 2-6 by this much for a
    /// broadband event to still count as glottal.
    pub glottal_dominance_db: f64,
    /// A band event is ignored when the band sits this far below the
    /// loudest band in the same frame.
    pub band_relevance_db: f64,
    /// Ignore events whose upper level is this far below the utterance peak.
    pub landmark_floor_db: f64,
    /// Band 1 counts as "high" within this distance of its own peak.
    pub band1_high_db: f64,
    pub periodicity_win_s: f64,
    /// Frames a periodicity state must persist before a p landmark fires.
    pub periodicity_min_frames: usize,
    pub pause_min_s: f64,
    pub pause_frame_s: f64,
    pub pause_floor_percentile: f64,
    pub pause_above_floor_db: f64,
    /// A pause frame must also sit this far below the loudest frame,
    /// unless it is digital silence.
    pub pause_below_peak_db: f64,
    pub silence_db: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            voicing_threshold: 0.4,
            f0_min_hz: 50.0,
            f0_max_hz: 500.0,
            stft_win_s: 0.025,
            stft_hop_s: 0.010,
            coarse_smooth_s: 0.050,
            fine_smooth_s: 0.020,
            coarse_rise_db: 6.0,
            fine_rise_db: 9.0,
            confirm_window_s: 0.050,
            group_window_s: 0.040,
            glottal_dominance_db: 10.0,
            band_relevance_db: 30.0,
            landmark_floor_db: 80.0,
            band1_high_db: 20.0,
            periodicity_win_s: 0.040,
            periodicity_min_frames: 3,
            pause_min_s: 0.300,
            pause_frame_s: 0.010,
            pause_floor_percentile: 5.0,
            pause_above_floor_db: 10.0,
            pause_below_peak_db: 20.0,
            silence_db: -100.0,
        }
    }
}

/// Smallest power treated as nonzero before taking logs.
pub const POWER_FLOOR: f64 = 1e-12;

pub fn power_db(p: f64) -> f64 {
    10.0 * p.max(POWER_FLOOR).log10()
}

/// Symmetric Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Windowed one-sided power spectrum with a reusable FFT plan.
pub struct PowerSpectrum {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    n_fft: usize,
    norm: f64,
    scratch: Vec<Complex<f64>>,
}

impl PowerSpectrum {
    pub fn new(win_len: usize) -> Self {
        let n_fft = win_len.next_power_of_two();
        let window = hann(win_len);
        let wsum: f64 = window.iter().sum();
        Self {
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            window,
            n_fft,
            // full-scale sine lands near 0 dB
            norm: 4.0 / (wsum * wsum),
            scratch: vec![Complex::default(); n_fft],
        }
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn compute(&mut self, frame: &[f64]) -> Vec<f64> {
        for (i, c) in self.scratch.iter_mut().enumerate() {
            let x = match (frame.get(i), self.window.get(i)) {
                (Some(s), Some(w)) => s * w,
                _ => 0.0,
            };
            *c = Complex::new(x, 0.0);
        }
        self.fft.process(&mut self.scratch);
        self.scratch[..self.n_bins()]
            .iter()
            .map(|c| c.norm_sqr() * self.norm)
            .collect()
    }
}

/// Raw autocorrelation `sum_n x[n] x[n+lag]` for lags `0..=max_lag`.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return vec![0.0; max_lag + 1];
    }
    let size = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::default()))
        .take(size)
        .collect();
    fwd.process(&mut buf);
    for c in &mut buf {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    inv.process(&mut buf);
    (0..=max_lag)
        .map(|k| if k < n { buf[k].re / size as f64 } else { 0.0 })
        .collect()
}

/// Normalized autocorrelation
/// `r(k) = sum x[n]x[n+k] / sqrt(sum_{n<N-k} x[n]^2 * sum_{n>=k} x[n]^2)`
/// for lags `0..=max_lag`. Zero where either energy vanishes.
pub fn normalized_autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let raw = autocorrelation(x, max_lag);
    let mut prefix = vec![0.0; n + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v * v;
    }
    let total = prefix[n];
    raw.iter()
        .enumerate()
        .map(|(k, &num)| {
            if k >= n {
                return 0.0;
            }
            let head = prefix[n - k];
            let tail = total - prefix[k];
            let den = (head * tail).sqrt();
            if den <= 1e-20 * (1.0 + total) || den == 0.0 {
                0.0
            } else {
                num / den
            }
        })
        .collect()
}

/// Result of the shared periodicity search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Periodicity {
    /// Maximum normalized autocorrelation over the pitch lag range.
    pub peak_ratio: f64,
    /// Autocorrelation at the selected pitch lag.
    pub r_at_lag: f64,
    /// Fractional lag in samples, present when voiced.
    pub lag: Option<f64>,
}

/// Searches lags covering `f0_min_hz..=f0_max_hz` for the pitch period.
///
/// The earliest local maximum reaching 90% of the global peak is taken, so
/// multiples of the period do not win on ties. Voiced when the peak exceeds
/// the voicing threshold.
pub fn periodicity(x: &[f64], sample_rate: u32, cfg: &DspConfig) -> Periodicity {
    let sr = f64::from(sample_rate);
    let lo = (sr / cfg.f0_max_hz).ceil().max(2.0) as usize;
    let hi = (sr / cfg.f0_min_hz).floor() as usize;
    let unvoiced = Periodicity { peak_ratio: 0.0, r_at_lag: 0.0, lag: None };
    if x.len() < hi + 2 || lo >= hi {
        return unvoiced;
    }
    let r = normalized_autocorrelation(x, hi + 1);
    let peak = r[lo..=hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() || peak <= 0.0 {
        return unvoiced;
    }
    if peak <= cfg.voicing_threshold {
        return Periodicity { peak_ratio: peak, r_at_lag: peak, lag: None };
    }
    let mut best = None;
    for k in lo..=hi {
        if r[k] >= 0.9 * peak && r[k] >= r[k - 1] && r[k] >= r[k + 1] {
            best = Some(k);
            break;
        }
    }
    let k = best.unwrap_or_else(|| {
        (lo..=hi)
            .max_by(|&a, &b| r[a].total_cmp(&r[b]))
            .expect("nonempty lag range")
    });
    let (a, b, c) = (r[k - 1], r[k], r[k + 1]);
    let den = a - 2.0 * b + c;
    let shift = if den.abs() > 1e-15 { (0.5 * (a - c) / den).clamp(-0.5, 0.5) } else { 0.0 };
    Periodicity { peak_ratio: peak, r_at_lag: b, lag: Some(k as f64 + shift) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_autocorrelation_matches_direct_sum() {
        let x: Vec<f64> = (0..300).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let fast = autocorrelation(&x, 120);
        for (k, v) in fast.iter().enumerate() {
            let direct: f64 = (0..x.len() - k).map(|n| x[n] * x[n + k]).sum();
            assert!((v - direct).abs() < 1e-9, "lag {k}: {v} vs {direct}");
        }
    }

    #[test]
    fn normalized_autocorrelation_of_silence_is_zero() {
        let r = normalized_autocorrelation(&[0.0; 512], 100);
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn power_spectrum_full_scale_sine_near_zero_db() {
        let mut ps = PowerSpectrum::new(400);
        let f = 1000.0;
        let x: Vec<f64> =
            (0..400).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 16000.0).sin()).collect();
        let p = ps.compute(&x);
        let peak = p.iter().copied().fold(0.0, f64::max);
        assert!(power_db(peak).abs() < 1.5, "{}", power_db(peak));
    }
}
