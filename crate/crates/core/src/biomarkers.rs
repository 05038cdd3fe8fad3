//! Vocal biomarkers over non-overlapping 500 ms windows, plus
//! utterance-level pause, phonation and filler statistics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, CANONICAL_RATE};
use crate::dsp::{self, DspConfig, PowerSpectrum};

pub const WINDOW_S: f64 = 0.5;
pub const N_MFCC: usize = 13;
pub const N_MEL: usize = 26;
/// Per-window numeric fields (voicing is implied by the presence of F0).
pub const N_WINDOW_FIELDS: usize = 33;
pub const N_STATS: usize = 4;
pub const FILLERS: [&str; 4] = ["um", "uh", "er", "hmm"];

/// Upper clamp for the HNR autocorrelation ratio; caps HNR near 60 dB.
pub const HNR_R_MAX: f64 = 1.0 - 1e-6;
pub const HNR_R_MIN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum BiomarkerError {
    #[error("audio too short: {got_s:.3} s, need {need_s} s")]
    TooShort { got_s: f64, need_s: f64 },
    #[error("expected {CANONICAL_RATE} Hz audio, got {0} Hz")]
    WrongRate(u32),
    #[error("only {0} pitch periods found, need 3")]
    InsufficientCycles(usize),
    #[error("window is unvoiced")]
    Unvoiced,
    #[error("feature cache: {0}")]
    BadCache(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerWindow {
    pub intensity_db: f64,
    pub mfcc: [f64; N_MFCC],
    pub delta_mfcc: [f64; N_MFCC],
    pub f0_hz: Option<f64>,
    pub zcr: f64,
    pub hnr_db: f64,
    pub jitter: f64,
    pub shimmer: f64,
    pub energy: f64,
}

impl BiomarkerWindow {
    pub fn voiced(&self) -> bool {
        self.f0_hz.is_some()
    }

    /// Numeric vector in CSV column order; unvoiced F0 becomes 0.
    pub fn to_vector(&self) -> [f64; N_WINDOW_FIELDS] {
        let mut v = [0.0; N_WINDOW_FIELDS];
        v[0] = self.intensity_db;
        v[1..14].copy_from_slice(&self.mfcc);
        v[14..27].copy_from_slice(&self.delta_mfcc);
        v[27] = self.f0_hz.unwrap_or(0.0);
        v[28] = self.zcr;
        v[29] = self.hnr_db;
        v[30] = self.jitter;
        v[31] = self.shimmer;
        v[32] = self.energy;
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceStats {
    pub pause_count: usize,
    pub total_pause_s: f64,
    pub phonation_rate: f64,
    pub filler_count: usize,
}

impl UtteranceStats {
    pub fn mean_pause_s(&self) -> f64 {
        if self.pause_count == 0 {
            0.0
        } else {
            self.total_pause_s / self.pause_count as f64
        }
    }

    pub fn to_vector(&self) -> [f64; N_STATS] {
        [
            self.pause_count as f64,
            self.total_pause_s,
            self.phonation_rate,
            self.filler_count as f64,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerSeries {
    pub windows: Vec<BiomarkerWindow>,
    pub window_s: f64,
    pub stats: UtteranceStats,
}

/// Normalized-autocorrelation F0 over the configured pitch range.
pub fn compute_f0(window: &[f64], sample_rate: u32, cfg: &DspConfig) -> Option<f64> {
    let p = dsp::periodicity(window, sample_rate, cfg);
    p.lag.map(|lag| (f64::from(sample_rate) / lag).clamp(cfg.f0_min_hz, cfg.f0_max_hz))
}

pub fn hnr_from_ratio(r: f64) -> f64 {
    let r = r.clamp(HNR_R_MIN, HNR_R_MAX);
    10.0 * (r / (1.0 - r)).log10()
}

/// HNR from the autocorrelation at the pitch lag. Errors on unvoiced input.
pub fn compute_hnr(window: &[f64], sample_rate: u32, cfg: &DspConfig) -> Result<f64, BiomarkerError> {
    let p = dsp::periodicity(window, sample_rate, cfg);
    if p.lag.is_none() {
        return Err(BiomarkerError::Unvoiced);
    }
    Ok(hnr_from_ratio(p.r_at_lag))
}

fn argmax(x: &[f64], lo: usize, hi: usize) -> usize {
    (lo..hi).max_by(|&a, &b| x[a].total_cmp(&x[b]).then(b.cmp(&a))).expect("nonempty range")
}

fn refine_peak(x: &[f64], i: usize) -> (f64, f64) {
    if i == 0 || i + 1 >= x.len() {
        return (i as f64, x[i]);
    }
    let (a, b, c) = (x[i - 1], x[i], x[i + 1]);
    let den = a - 2.0 * b + c;
    if den.abs() < 1e-15 {
        return (i as f64, b);
    }
    let d = (0.5 * (a - c) / den).clamp(-0.5, 0.5);
    (i as f64 + d, b - 0.25 * (a - c) * d)
}

/// Locates one peak per pitch cycle; returns `(time, amplitude)` pairs.
pub fn track_cycle_peaks(window: &[f64], period: f64) -> Vec<(f64, f64)> {
    let n = window.len();
    let p = period.max(2.0);
    let span = p.ceil() as usize + 1;
    if n < span + 2 {
        return Vec::new();
    }
    let gate = 0.3 * window.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if gate <= 0.0 {
        return Vec::new();
    }
    let mut first = argmax(window, 1, span);
    if first == 1 || first == span - 1 {
        let lo = 1 + (p / 2.0) as usize;
        if lo + span <= n {
            first = argmax(window, lo, lo + span);
        }
    }
    let mut peaks = Vec::new();
    let mut cur = first;
    loop {
        if window[cur] < gate {
            break;
        }
        peaks.push(refine_peak(window, cur));
        let lo = (cur as f64 + 0.75 * p).round() as usize;
        let hi = ((cur as f64 + 1.25 * p).round() as usize + 1).min(n);
        if lo >= hi || lo >= n {
            break;
        }
        cur = argmax(window, lo, hi);
        // a maximum on the right edge is an incomplete cycle
        if cur == n - 1 {
            break;
        }
    }
    peaks
}

/// Cycle-to-cycle period and amplitude variability.
///
/// `jitter = mean|T_i - T_{i-1}| / mean(T)`, `shimmer` likewise on peak
/// amplitudes.
pub fn compute_jitter_shimmer(
    window: &[f64],
    sample_rate: u32,
    f0: f64,
) -> Result<(f64, f64), BiomarkerError> {
    let peaks = track_cycle_peaks(window, f64::from(sample_rate) / f0);
    let periods: Vec<f64> = peaks.windows(2).map(|w| w[1].0 - w[0].0).collect();
    if periods.len() < 3 {
        return Err(BiomarkerError::InsufficientCycles(periods.len()));
    }
    let amps: Vec<f64> = peaks.iter().map(|p| p.1).collect();
    Ok((relative_variation(&periods), relative_variation(&amps)))
}

fn relative_variation(x: &[f64]) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    if mean <= 0.0 {
        return 0.0;
    }
    let diffs = x.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (x.len() - 1) as f64;
    diffs / mean
}

/// Sign changes per sample.
pub fn zero_crossing_rate(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let crossings = x.windows(2).filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0)).count();
    crossings as f64 / x.len() as f64
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank and DCT for MFCC sub-frames.
pub struct MfccAnalyzer {
    spectrum: PowerSpectrum,
    filters: Vec<Vec<(usize, f64)>>,
    dct: Vec<Vec<f64>>,
    win: usize,
    hop: usize,
}

impl MfccAnalyzer {
    pub fn new(sample_rate: u32, cfg: &DspConfig) -> Self {
        let sr = f64::from(sample_rate);
        let win = (cfg.stft_win_s * sr).round() as usize;
        let hop = (cfg.stft_hop_s * sr).round() as usize;
        let spectrum = PowerSpectrum::new(win);
        let n_bins = spectrum.n_bins();
        let bin_hz = sr / spectrum.n_fft() as f64;
        let top = hz_to_mel(sr / 2.0);
        let edges: Vec<f64> =
            (0..N_MEL + 2).map(|i| mel_to_hz(top * i as f64 / (N_MEL + 1) as f64)).collect();
        let filters = (0..N_MEL)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect();
        let dct = (0..N_MFCC)
            .map(|c| {
                let scale = if c == 0 {
                    (1.0 / N_MEL as f64).sqrt()
                } else {
                    (2.0 / N_MEL as f64).sqrt()
                };
                (0..N_MEL)
                    .map(|m| {
                        scale
                            * (std::f64::consts::PI * c as f64 * (m as f64 + 0.5) / N_MEL as f64)
                                .cos()
                    })
                    .collect()
            })
            .collect();
        Self { spectrum, filters, dct, win, hop }
    }

    pub fn frame(&mut self, frame: &[f64]) -> [f64; N_MFCC] {
        let p = self.spectrum.compute(frame);
        let log_mel: Vec<f64> = self
            .filters
            .iter()
            .map(|f| f.iter().map(|&(k, w)| p[k] * w).sum::<f64>().max(1e-10).ln())
            .collect();
        let mut out = [0.0; N_MFCC];
        for (c, row) in self.dct.iter().enumerate() {
            out[c] = row.iter().zip(&log_mel).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// Window-averaged MFCC and delta-MFCC (regression over +-2 sub-frames).
    pub fn window(&mut self, x: &[f64]) -> ([f64; N_MFCC], [f64; N_MFCC]) {
        let n = if x.len() >= self.win { (x.len() - self.win) / self.hop + 1 } else { 0 };
        let frames: Vec<[f64; N_MFCC]> =
            (0..n).map(|i| self.frame(&x[i * self.hop..i * self.hop + self.win])).collect();
        let mut mean = [0.0; N_MFCC];
        let mut delta = [0.0; N_MFCC];
        if n == 0 {
            return (mean, delta);
        }
        let at = |i: isize| frames[i.clamp(0, n as isize - 1) as usize];
        for t in 0..n as isize {
            let f = at(t);
            let (p1, m1, p2, m2) = (at(t + 1), at(t - 1), at(t + 2), at(t - 2));
            for c in 0..N_MFCC {
                mean[c] += f[c];
                delta[c] += ((p1[c] - m1[c]) + 2.0 * (p2[c] - m2[c])) / 10.0;
            }
        }
        for c in 0..N_MFCC {
            mean[c] /= n as f64;
            delta[c] /= n as f64;
        }
        (mean, delta)
    }
}

fn analyze_window(x: &[f64], sample_rate: u32, cfg: &DspConfig, mfcc: &mut MfccAnalyzer) -> BiomarkerWindow {
    let energy = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let p = dsp::periodicity(x, sample_rate, cfg);
    let f0_hz = p.lag.map(|lag| (f64::from(sample_rate) / lag).clamp(cfg.f0_min_hz, cfg.f0_max_hz));
    let (hnr_db, jitter, shimmer) = match f0_hz {
        Some(f0) => {
            let (j, s) = compute_jitter_shimmer(x, sample_rate, f0).unwrap_or((0.0, 0.0));
            (hnr_from_ratio(p.r_at_lag), j, s)
        }
        None => (hnr_from_ratio(p.peak_ratio), 0.0, 0.0),
    };
    let (mfcc, delta_mfcc) = mfcc.window(x);
    BiomarkerWindow {
        intensity_db: dsp::power_db(energy),
        mfcc,
        delta_mfcc,
        f0_hz,
        zcr: zero_crossing_rate(x),
        hnr_db,
        jitter,
        shimmer,
        energy,
    }
}

pub fn count_fillers(transcript: &str) -> usize {
    transcript
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|t| FILLERS.contains(t))
        .count()
}

/// Pauses, phonation rate and filler count for a whole utterance.
///
/// A pause is a run of 10 ms frames quieter than the noise floor (5th
/// percentile) plus 10 dB, lasting at least 300 ms. Frames must also sit
/// well below the loudest frame unless they are digital silence, so a
/// steady tone has no pauses.
pub fn utterance_stats(
    buf: &AudioBuffer,
    windows: &[BiomarkerWindow],
    transcript: &str,
    cfg: &DspConfig,
) -> UtteranceStats {
    let sr = f64::from(buf.sample_rate());
    let flen = ((cfg.pause_frame_s * sr).round() as usize).max(1);
    let levels: Vec<f64> = buf
        .samples()
        .chunks_exact(flen)
        .map(|c| dsp::power_db(c.iter().map(|v| v * v).sum::<f64>() / flen as f64))
        .collect();

    let (mut pause_count, mut pause_frames) = (0usize, 0usize);
    if !levels.is_empty() {
        let mut sorted = levels.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = (cfg.pause_floor_percentile / 100.0 * (sorted.len() - 1) as f64).round() as usize;
        let floor = sorted[rank.min(sorted.len() - 1)];
        let peak = sorted[sorted.len() - 1];
        let threshold = floor + cfg.pause_above_floor_db;
        let quiet = |l: f64| {
            l < threshold && (l <= cfg.silence_db || peak - l >= cfg.pause_below_peak_db)
        };
        let min_frames = (cfg.pause_min_s / cfg.pause_frame_s).round() as usize;
        let mut run = 0usize;
        for &l in levels.iter().chain(std::iter::once(&f64::INFINITY)) {
            if quiet(l) {
                run += 1;
            } else {
                if run >= min_frames {
                    pause_count += 1;
                    pause_frames += run;
                }
                run = 0;
            }
        }
    }
    let voiced = windows.iter().filter(|w| w.voiced()).count();
    UtteranceStats {
        pause_count,
        total_pause_s: pause_frames as f64 * flen as f64 / sr,
        phonation_rate: if windows.is_empty() { 0.0 } else { voiced as f64 / windows.len() as f64 },
        filler_count: count_fillers(transcript),
    }
}

/// One window per full 500 ms of audio (the remainder is dropped).
pub fn extract_series(
    buf: &AudioBuffer,
    transcript: &str,
    cfg: &DspConfig,
) -> Result<BiomarkerSeries, BiomarkerError> {
    if buf.sample_rate() != CANONICAL_RATE {
        return Err(BiomarkerError::WrongRate(buf.sample_rate()));
    }
    let wlen = (WINDOW_S * f64::from(buf.sample_rate())).round() as usize;
    if buf.len() < wlen {
        return Err(BiomarkerError::TooShort { got_s: buf.duration_s(), need_s: WINDOW_S });
    }
    let mut mfcc = MfccAnalyzer::new(buf.sample_rate(), cfg);
    let windows: Vec<BiomarkerWindow> = buf
        .samples()
        .chunks_exact(wlen)
        .map(|w| analyze_window(w, buf.sample_rate(), cfg, &mut mfcc))
        .collect();
    let stats = utterance_stats(buf, &windows, transcript, cfg);
    Ok(BiomarkerSeries { windows, window_s: WINDOW_S, stats })
}

pub fn csv_header() -> String {
    let mut cols = vec!["intensity_db".to_string()];
    cols.extend((0..N_MFCC).map(|i| format!("mfcc_{i}")));
    cols.extend((0..N_MFCC).map(|i| format!("delta_mfcc_{i}")));
    cols.extend(["f0_hz", "zcr", "hnr_db", "jitter", "shimmer", "energy"].map(String::from));
    cols.join(",")
}

/// Feature cache CSV: header plus one row per window. Unvoiced F0 is empty.
pub fn series_to_csv(series: &BiomarkerSeries) -> String {
    let mut out = csv_header();
    out.push('\n');
    for w in &series.windows {
        let v = w.to_vector();
        let cells: Vec<String> = v
            .iter()
            .enumerate()
            .map(|(i, x)| if i == 27 && w.f0_hz.is_none() { String::new() } else { x.to_string() })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn stats_to_json(stats: &UtteranceStats) -> String {
    serde_json::to_string_pretty(stats).expect("stats serialize")
}

/// Reads a CSV cache and its stats sidecar back into a series.
pub fn series_from_cache(csv: &str, stats_json: &str) -> Result<BiomarkerSeries, BiomarkerError> {
    let bad = |m: &str| BiomarkerError::BadCache(m.to_string());
    let mut lines = csv.lines();
    if lines.next() != Some(csv_header().as_str()) {
        return Err(bad("header mismatch"));
    }
    let mut windows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != N_WINDOW_FIELDS {
            return Err(bad("wrong column count"));
        }
        let num = |i: usize| cells[i].parse::<f64>().map_err(|_| bad("non-numeric cell"));
        let mut mfcc = [0.0; N_MFCC];
        let mut delta_mfcc = [0.0; N_MFCC];
        for c in 0..N_MFCC {
            mfcc[c] = num(1 + c)?;
            delta_mfcc[c] = num(14 + c)?;
        }
        windows.push(BiomarkerWindow {
            intensity_db: num(0)?,
            mfcc,
            delta_mfcc,
            f0_hz: if cells[27].is_empty() { None } else { Some(num(27)?) },
            zcr: num(28)?,
            hnr_db: num(29)?,
            jitter: num(30)?,
            shimmer: num(31)?,
            energy: num(32)?,
        });
    }
    let stats: UtteranceStats = serde_json::from_str(stats_json).map_err(|e| bad(&e.to_string()))?;
    Ok(BiomarkerSeries { windows, window_s: WINDOW_S, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fillers_counted_from_lowercased_tokens() {
        assert_eq!(count_fillers("um I think uh yes"), 2);
        assert_eq!(count_fillers("Um, HMM... er"), 3);
        assert_eq!(count_fillers("umbrella under"), 0);
    }

    #[test]
    fn hnr_clamp_bounds() {
        let top = hnr_from_ratio(1.0);
        assert!((top - 60.0).abs() < 1e-3, "{top}");
        assert!(hnr_from_ratio(0.5).abs() < 1e-12);
        assert!(hnr_from_ratio(0.0).is_finite());
    }

    #[test]
    fn two_cycles_are_insufficient() {
        let period = 16000.0 / 220.0;
        let n = (2.0 * period) as usize;
        let x: Vec<f64> =
            (0..n).map(|i| (2.0 * std::f64::consts::PI * i as f64 / period).sin()).collect();
        assert!(matches!(
            compute_jitter_shimmer(&x, 16000, 220.0),
            Err(BiomarkerError::InsufficientCycles(_))
        ));
    }

    #[test]
    fn too_short() {
        let b = AudioBuffer::new(vec![0.0; 7999], 16000).unwrap();
        assert!(matches!(
            extract_series(&b, "", &DspConfig::default()),
            Err(BiomarkerError::TooShort { .. })
        ));
    }

    #[test]
    fn csv_has_33_columns() {
        assert_eq!(csv_header().split(',').count(), N_WINDOW_FIELDS);
    }
}
