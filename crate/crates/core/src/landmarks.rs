//! Acoustic landmark detection.
//!
//! The spectrogram is split into six bands. Each band's dB track is smoothed
//! twice (a coarse 50 ms boxcar and a fine 20 ms one); abrupt rises and falls
//! found on the coarse rate-of-rise are confirmed and localized on the fine
//! one. Co-occurring band events are then grouped and named by which bands
//! moved and whether the low band carries energy. Periodicity onsets and
//! offsets come from the shared autocorrelation voicing test.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, CANONICAL_RATE};
use crate::dsp::{self, DspConfig, PowerSpectrum};

pub const N_BANDS: usize = 6;

/// Band edges in Hz.
pub const BAND_EDGES: [(f64, f64); N_BANDS] = [
    (0.0, 400.0),
    (800.0, 1500.0),
    (1200.0, 2000.0),
    (2000.0, 3500.0),
    (3500.0, 5000.0),
    (5000.0, 8000.0),
];

pub const DB_FLOOR: f64 = -120.0;

#[derive(Debug, Error, PartialEq)]
pub enum LandmarkError {
    #[error("audio too short: {got} samples, need {need}")]
    TooShort { got: usize, need: usize },
    #[error("expected {CANONICAL_RATE} Hz audio, got {0} Hz")]
    WrongRate(u32),
    #[error("unknown landmark symbol {0:?}")]
    UnknownSymbol(String),
    #[error("malformed landmark line {0:?}")]
    BadLine(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Symbol {
    GlottisOn,
    GlottisOff,
    BurstOn,
    BurstOff,
    SonorantOn,
    SonorantOff,
    FricationOn,
    FricationOff,
    VoicedFricationOn,
    VoicedFricationOff,
    PeriodicityOn,
    PeriodicityOff,
}

impl Symbol {
    pub const ALL: [Symbol; 12] = [
        Symbol::GlottisOn,
        Symbol::GlottisOff,
        Symbol::BurstOn,
        Symbol::BurstOff,
        Symbol::SonorantOn,
        Symbol::SonorantOff,
        Symbol::FricationOn,
        Symbol::FricationOff,
        Symbol::VoicedFricationOn,
        Symbol::VoicedFricationOff,
        Symbol::PeriodicityOn,
        Symbol::PeriodicityOff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Symbol::GlottisOn => "g+",
            Symbol::GlottisOff => "g-",
            Symbol::BurstOn => "b+",
            Symbol::BurstOff => "b-",
            Symbol::SonorantOn => "s+",
            Symbol::SonorantOff => "s-",
            Symbol::FricationOn => "f+",
            Symbol::FricationOff => "f-",
            Symbol::VoicedFricationOn => "v+",
            Symbol::VoicedFricationOff => "v-",
            Symbol::PeriodicityOn => "p+",
            Symbol::PeriodicityOff => "p-",
        }
    }

    /// Position in [`Symbol::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    fn pick(rise: bool, on: Symbol, off: Symbol) -> Symbol {
        if rise {
            on
        } else {
            off
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Symbol {
    type Err = LandmarkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        // accept the typographic minus as well
        let norm = s.trim().replace('\u{2212}', "-");
        Symbol::ALL
            .into_iter()
            .find(|sym| sym.as_str() == norm)
            .ok_or_else(|| LandmarkError::UnknownSymbol(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub symbol: Symbol,
    pub time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSequence {
    landmarks: Vec<Landmark>,
}

impl LandmarkSequence {
    /// Sorts by time (then symbol) so the sequence is always ordered.
    pub fn new(mut landmarks: Vec<Landmark>) -> Self {
        landmarks.sort_by(|a, b| a.time_s.total_cmp(&b.time_s).then(a.symbol.cmp(&b.symbol)));
        Self { landmarks }
    }

    pub fn landmarks(&self) -> &[Landmark] {
        &self.landmarks
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn symbols(&self) -> Vec<Symbol> {
        self.landmarks.iter().map(|l| l.symbol).collect()
    }

    /// One `<time_s>\t<symbol>` line per landmark.
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        for l in &self.landmarks {
            out.push_str(&format!("{:.4}\t{}\n", l.time_s, l.symbol));
        }
        out
    }

    pub fn from_dump(text: &str) -> Result<Self, LandmarkError> {
        let mut lms = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (t, s) =
                line.split_once('\t').ok_or_else(|| LandmarkError::BadLine(line.to_string()))?;
            let time_s = t.parse::<f64>().map_err(|_| LandmarkError::BadLine(line.to_string()))?;
            lms.push(Landmark { symbol: s.parse()?, time_s });
        }
        Ok(Self::new(lms))
    }
}

/// Space-separated symbols in time order.
pub fn landmarks_to_tokens(seq: &LandmarkSequence) -> String {
    seq.landmarks.iter().map(|l| l.symbol.as_str()).collect::<Vec<_>>().join(" ")
}

/// Per-band dB tracks: raw, coarse-smoothed and fine-smoothed.
#[derive(Debug, Clone)]
pub struct BandEnergyTrack {
    pub raw: Vec<Vec<f64>>,
    pub coarse: Vec<Vec<f64>>,
    pub fine: Vec<Vec<f64>>,
    pub frame_hop_s: f64,
    pub band_edges: [(f64, f64); N_BANDS],
    /// Center time of frame 0.
    pub first_frame_s: f64,
    /// Periodicity decision per frame.
    pub periodic: Vec<bool>,
    cfg: DspConfig,
}

impl BandEnergyTrack {
    pub fn n_frames(&self) -> usize {
        self.raw[0].len()
    }

    pub fn frame_time(&self, i: usize) -> f64 {
        self.first_frame_s + i as f64 * self.frame_hop_s
    }
}

fn boxcar(x: &[f64], len: usize) -> Vec<f64> {
    let n = x.len() as isize;
    let len = len.max(1) as isize;
    (0..n)
        .map(|i| {
            let start = i - len / 2;
            let vals: Vec<f64> =
                (start..start + len).map(|j| x[j.clamp(0, n - 1) as usize]).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}

fn frames_of(seconds: f64, hop_s: f64) -> usize {
    (seconds / hop_s).round().max(1.0) as usize
}

/// Six-band energy decomposition of 16 kHz audio.
pub fn band_energies(buf: &AudioBuffer, cfg: &DspConfig) -> Result<BandEnergyTrack, LandmarkError> {
    if buf.sample_rate() != CANONICAL_RATE {
        return Err(LandmarkError::WrongRate(buf.sample_rate()));
    }
    let sr = f64::from(buf.sample_rate());
    let win = (cfg.stft_win_s * sr).round() as usize;
    let hop = (cfg.stft_hop_s * sr).round() as usize;
    let x = buf.samples();
    if x.len() < win {
        return Err(LandmarkError::TooShort { got: x.len(), need: win });
    }
    let mut spec = PowerSpectrum::new(win);
    let bin_hz = sr / spec.n_fft() as f64;
    let band_bins: Vec<(usize, usize)> = BAND_EDGES
        .iter()
        .enumerate()
        .map(|(b, &(lo, hi))| {
            let first = (lo / bin_hz).ceil() as usize;
            let mut last = (hi / bin_hz).ceil() as usize; // exclusive
            if b == N_BANDS - 1 {
                last = spec.n_bins();
            }
            (first, last.min(spec.n_bins()))
        })
        .collect();

    let n_frames = (x.len() - win) / hop + 1;
    let mut raw = vec![Vec::with_capacity(n_frames); N_BANDS];
    let mut periodic = Vec::with_capacity(n_frames);
    let pwin = (cfg.periodicity_win_s * sr).round() as usize;
    for i in 0..n_frames {
        let start = i * hop;
        let p = spec.compute(&x[start..start + win]);
        for (b, &(lo, hi)) in band_bins.iter().enumerate() {
            // mean power per bin, so white noise is flat across bands
            let mean = p[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            raw[b].push(dsp::power_db(mean).max(DB_FLOOR));
        }
        let center = start + win / 2;
        let lo = center.saturating_sub(pwin / 2);
        let hi = (lo + pwin).min(x.len());
        periodic.push(
            dsp::periodicity(&x[lo..hi], buf.sample_rate(), cfg).peak_ratio > cfg.voicing_threshold,
        );
    }
    let hop_s = hop as f64 / sr;
    let coarse_len = frames_of(cfg.coarse_smooth_s, hop_s);
    let fine_len = frames_of(cfg.fine_smooth_s, hop_s);
    Ok(BandEnergyTrack {
        coarse: raw.iter().map(|t| boxcar(t, coarse_len)).collect(),
        fine: raw.iter().map(|t| boxcar(t, fine_len)).collect(),
        raw,
        frame_hop_s: hop_s,
        band_edges: BAND_EDGES,
        first_frame_s: (win as f64 / 2.0) / sr,
        periodic,
        cfg: cfg.clone(),
    })
}

/// Symmetric rate of rise `track[i + span] - track[i - span]`, edges clamped.
fn rate_of_rise(track: &[f64], span: usize) -> Vec<f64> {
    let n = track.len();
    (0..n)
        .map(|i| track[(i + span).min(n - 1)] - track[i.saturating_sub(span)])
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct BandEvent {
    band: usize,
    rise: bool,
    frame: usize,
}

fn band_events(tracks: &BandEnergyTrack, band: usize) -> Vec<BandEvent> {
    let cfg = &tracks.cfg;
    let n = tracks.n_frames();
    let coarse_span = frames_of(cfg.coarse_smooth_s, tracks.frame_hop_s) / 2 + 1;
    let fine_span = frames_of(cfg.fine_smooth_s, tracks.frame_hop_s) / 2;
    let rc = rate_of_rise(&tracks.coarse[band], coarse_span);
    let rf = rate_of_rise(&tracks.fine[band], fine_span.max(1));
    let confirm = frames_of(cfg.confirm_window_s, tracks.frame_hop_s);

    let mut out: Vec<BandEvent> = Vec::new();
    for rise in [true, false] {
        let sign = if rise { 1.0 } else { -1.0 };
        let mut i = 0;
        while i < n {
            if sign * rc[i] <= cfg.coarse_rise_db {
                i += 1;
                continue;
            }
            let start = i;
            while i < n && sign * rc[i] > cfg.coarse_rise_db {
                i += 1;
            }
            let peak = (start..i)
                .max_by(|&a, &b| (sign * rc[a]).total_cmp(&(sign * rc[b])).then(b.cmp(&a)))
                .expect("nonempty region");
            let lo = peak.saturating_sub(confirm);
            let hi = (peak + confirm).min(n - 1);
            let fine_peak = (lo..=hi)
                .max_by(|&a, &b| (sign * rf[a]).total_cmp(&(sign * rf[b])).then(b.cmp(&a)))
                .expect("nonempty window");
            if sign * rf[fine_peak] >= cfg.fine_rise_db
                && !out.iter().any(|e| e.rise == rise && e.frame == fine_peak)
            {
                out.push(BandEvent { band, rise, frame: fine_peak });
            }
        }
    }
    out
}

/// Frame on the loud side of an event.
fn upper_frame(frame: usize, rise: bool, n: usize) -> usize {
    if rise {
        (frame + 1).min(n - 1)
    } else {
        frame.saturating_sub(1)
    }
}

fn relevant(tracks: &BandEnergyTrack, ev: &BandEvent, utterance_peak: f64) -> bool {
    let cfg = &tracks.cfg;
    let u = upper_frame(ev.frame, ev.rise, tracks.n_frames());
    let level = tracks.fine[ev.band][u];
    let frame_max = (0..N_BANDS).map(|b| tracks.fine[b][u]).fold(f64::NEG_INFINITY, f64::max);
    level >= frame_max - cfg.band_relevance_db && level >= utterance_peak - cfg.landmark_floor_db
}

fn classify(tracks: &BandEnergyTrack, group: &[BandEvent], band1_peak: f64) -> Option<(Symbol, usize)> {
    let cfg = &tracks.cfg;
    let rise = group[0].rise;
    let has = |b: usize| group.iter().any(|e| e.band == b);
    let frame = group
        .iter()
        .find(|e| e.band == 0)
        .map(|e| e.frame)
        .unwrap_or_else(|| group.iter().map(|e| e.frame).min().expect("nonempty group"));
    let u = upper_frame(frame, rise, tracks.n_frames());
    let high_bands = (1..N_BANDS).filter(|&b| has(b)).count();
    let rest_mean = (1..N_BANDS).map(|b| tracks.fine[b][u]).sum::<f64>() / (N_BANDS - 1) as f64;
    let dominance = tracks.fine[0][u] - rest_mean;
    let band1_high = tracks.fine[0][u] >= band1_peak - cfg.band1_high_db;

    let symbol = if high_bands >= 3 && dominance < cfg.glottal_dominance_db {
        Symbol::pick(rise, Symbol::BurstOn, Symbol::BurstOff)
    } else if has(0) {
        Symbol::pick(rise, Symbol::GlottisOn, Symbol::GlottisOff)
    } else if band1_high && (has(1) || has(2)) {
        Symbol::pick(rise, Symbol::SonorantOn, Symbol::SonorantOff)
    } else if has(3) || has(4) || has(5) {
        if band1_high {
            Symbol::pick(rise, Symbol::VoicedFricationOn, Symbol::VoicedFricationOff)
        } else {
            Symbol::pick(rise, Symbol::FricationOn, Symbol::FricationOff)
        }
    } else {
        return None;
    };
    Some((symbol, frame))
}

fn periodicity_landmarks(tracks: &BandEnergyTrack) -> Vec<Landmark> {
    let min_run = tracks.cfg.periodicity_min_frames.max(1);
    let p = &tracks.periodic;
    let mut out = Vec::new();
    let mut state = false;
    let mut i = 0;
    while i < p.len() {
        if p[i] == state {
            i += 1;
            continue;
        }
        let start = i;
        while i < p.len() && p[i] != state {
            i += 1;
        }
        if i - start >= min_run {
            state = !state;
            out.push(Landmark {
                symbol: Symbol::pick(state, Symbol::PeriodicityOn, Symbol::PeriodicityOff),
                time_s: tracks.frame_time(start),
            });
        }
    }
    out
}

/// Finds landmarks in a band-energy track set. Silence yields nothing.
pub fn detect_landmarks(tracks: &BandEnergyTrack) -> LandmarkSequence {
    let n = tracks.n_frames();
    if n == 0 {
        return LandmarkSequence::default();
    }
    let utterance_peak = tracks
        .fine
        .iter()
        .flat_map(|t| t.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let band1_peak = tracks.fine[0].iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut events: Vec<BandEvent> = (0..N_BANDS)
        .flat_map(|b| band_events(tracks, b))
        .filter(|e| relevant(tracks, e, utterance_peak))
        .collect();
    events.sort_by_key(|e| (!e.rise, e.frame, e.band));

    let group_len = frames_of(tracks.cfg.group_window_s, tracks.frame_hop_s);
    let mut landmarks = Vec::new();
    let mut i = 0;
    while i < events.len() {
        let head = events[i];
        let mut j = i;
        while j < events.len() && events[j].rise == head.rise && events[j].frame <= head.frame + group_len
        {
            j += 1;
        }
        if let Some((symbol, frame)) = classify(tracks, &events[i..j], band1_peak) {
            landmarks.push(Landmark { symbol, time_s: tracks.frame_time(frame) });
        }
        i = j;
    }
    landmarks.extend(periodicity_landmarks(tracks));
    LandmarkSequence::new(landmarks)
}

/// Convenience: band energies followed by detection.
pub fn extract_landmarks(buf: &AudioBuffer, cfg: &DspConfig) -> Result<LandmarkSequence, LandmarkError> {
    Ok(detect_landmarks(&band_energies(buf, cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_drop_times() {
        assert_eq!(landmarks_to_tokens(&LandmarkSequence::default()), "");
        let seq = LandmarkSequence::new(vec![
            Landmark { symbol: Symbol::SonorantOn, time_s: 0.3 },
            Landmark { symbol: Symbol::GlottisOn, time_s: 0.1 },
        ]);
        assert_eq!(landmarks_to_tokens(&seq), "g+ s+");
    }

    #[test]
    fn symbol_parse_accepts_both_minus_signs() {
        assert_eq!("g-".parse::<Symbol>().unwrap(), Symbol::GlottisOff);
        assert_eq!("g\u{2212}".parse::<Symbol>().unwrap(), Symbol::GlottisOff);
        assert!("x+".parse::<Symbol>().is_err());
        for s in Symbol::ALL {
            assert_eq!(s.as_str().parse::<Symbol>().unwrap(), s);
            assert_eq!(Symbol::ALL[s.index()], s);
        }
    }

    #[test]
    fn dump_round_trip() {
        let seq = LandmarkSequence::new(vec![
            Landmark { symbol: Symbol::GlottisOn, time_s: 0.4925 },
            Landmark { symbol: Symbol::PeriodicityOff, time_s: 1.5125 },
        ]);
        let dump = seq.to_dump();
        assert_eq!(dump, "0.4925\tg+\n1.5125\tp-\n");
        assert_eq!(LandmarkSequence::from_dump(&dump).unwrap(), seq);
        assert!(LandmarkSequence::from_dump("0.1 g+").is_err());
    }

    #[test]
    fn boxcar_centered() {
        let x = [0.0, 0.0, 0.0, 10.0, 10.0, 10.0];
        let c = boxcar(&x, 2);
        assert_eq!(c, vec![0.0, 0.0, 0.0, 5.0, 10.0, 10.0]);
    }

    #[test]
    fn too_short_and_wrong_rate() {
        let cfg = DspConfig::default();
        let short = AudioBuffer::new(vec![0.0; 100], 16000).unwrap();
        assert_eq!(
            band_energies(&short, &cfg).unwrap_err(),
            LandmarkError::TooShort { got: 100, need: 400 }
        );
        let slow = AudioBuffer::new(vec![0.0; 8000], 8000).unwrap();
        assert_eq!(band_energies(&slow, &cfg).unwrap_err(), LandmarkError::WrongRate(8000));
    }
}
