//! Patients, visits, survey-derived labels and the synthetic cohort generator.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioBuffer, AudioError, CANONICAL_RATE};
use crate::nn::sigmoid;

#[derive(Debug, thiserror::Error)]
pub enum CohortError {
    #[error("{field} = {value} is outside 0..={max}")]
    OutOfRange { field: &'static str, value: u32, max: u32 },
    #[error("split fractions must be nonnegative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const HAMD_MAX: u32 = 52;
pub const HAMD_CUTOFF: u32 = 17;
pub const SI_CUTOFF: u32 = 2;
pub const SLEEP_CUTOFF: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyScores {
    pub hamd: u32,
    pub phq9_q9: u32,
    pub phq9_q3: u32,
    pub mfq_q19: u32,
    pub mfq_q32: u32,
    pub mfq_q33: u32,
}

impl SurveyScores {
    pub fn validate(&self) -> Result<(), CohortError> {
        let check = |field, value, max| {
            if value > max {
                Err(CohortError::OutOfRange { field, value, max })
            } else {
                Ok(())
            }
        };
        check("hamd", self.hamd, HAMD_MAX)?;
        check("phq9_q9", self.phq9_q9, 3)?;
        check("phq9_q3", self.phq9_q3, 3)?;
        check("mfq_q19", self.mfq_q19, 2)?;
        check("mfq_q32", self.mfq_q32, 2)?;
        check("mfq_q33", self.mfq_q33, 2)
    }
}

/// Which side of the HAM-D cutoff counts as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// `hamd > 17` is positive.
    #[default]
    SeverityPositive,
    /// `hamd < 17` is positive; 17 itself is negative.
    TableLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Depression,
    SuicidalIdeation,
    Sleep,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Depression, Task::SuicidalIdeation, Task::Sleep];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Depression => "depression",
            Task::SuicidalIdeation => "si",
            Task::Sleep => "sleep",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub depression: bool,
    pub si: bool,
    pub sleep: bool,
}

impl Labels {
    pub fn get(&self, t: Task) -> bool {
        match t {
            Task::Depression => self.depression,
            Task::SuicidalIdeation => self.si,
            Task::Sleep => self.sleep,
        }
    }

    pub fn as_array(&self) -> [bool; 3] {
        [self.depression, self.si, self.sleep]
    }
}

/// Survey cutoffs. Sums landing exactly on a cutoff are negative.
pub fn label_from_surveys(s: &SurveyScores, polarity: Polarity) -> Result<Labels, CohortError> {
    s.validate()?;
    let depression = match polarity {
        Polarity::SeverityPositive => s.hamd > HAMD_CUTOFF,
        Polarity::TableLiteral => s.hamd < HAMD_CUTOFF,
    };
    Ok(Labels {
        depression,
        si: s.phq9_q9 + s.mfq_q19 > SI_CUTOFF,
        sleep: s.phq9_q3 + s.mfq_q32 + s.mfq_q33 > SLEEP_CUTOFF,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub patient_id: String,
    pub arm: u32,
    /// WAV path relative to the cohort directory.
    pub wav: PathBuf,
    pub transcript: String,
    pub scores: SurveyScores,
    pub labels: Labels,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub visits: Vec<Visit>,
}

impl Cohort {
    /// Distinct patient ids in sorted order.
    pub fn patients(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.visits.iter().map(|v| v.patient_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn patients_in(&self, split: Split) -> BTreeSet<String> {
        self.visits
            .iter()
            .filter(|v| v.split == Some(split))
            .map(|v| v.patient_id.clone())
            .collect()
    }

    /// Visits of one patient in arm order.
    pub fn trajectory(&self, patient_id: &str) -> Vec<&Visit> {
        let mut v: Vec<&Visit> = self.visits.iter().filter(|v| v.patient_id == patient_id).collect();
        v.sort_by_key(|v| v.arm);
        v
    }
}

/// Parameters of the synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub n_arms: usize,
    pub effect_strength: f64,
    pub polarity: Polarity,
    /// Visit-to-visit persistence of latent severity.
    pub ar_coef: f64,
    /// Standard deviation of the severity innovation.
    pub ar_noise: f64,
    pub voiced_segments: usize,
    pub noise_floor: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_patients: 60,
            n_arms: 4,
            effect_strength: 3.0,
            polarity: Polarity::SeverityPositive,
            ar_coef: 0.8,
            ar_noise: 0.3,
            voiced_segments: 4,
            noise_floor: 1e-3,
        }
    }
}

/// One generated visit before it is written to disk.
#[derive(Debug, Clone)]
pub struct SynthVisit {
    pub patient_id: String,
    pub arm: u32,
    pub severity: f64,
    pub audio: AudioBuffer,
    pub transcript: String,
    pub scores: SurveyScores,
    pub labels: Labels,
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:03}")
}

/// Per-patient generator stream, so patients can be produced in any order.
pub fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index as u64)
}

/// Latent severity trajectory: `s_0 ~ N(0, 1)`, `s_k = a s_{k-1} + N(0, sd)`.
pub fn severity_path(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(cfg.n_arms);
    let mut s = std.sample(rng);
    for k in 0..cfg.n_arms {
        if k > 0 {
            s = cfg.ar_coef * s + cfg.ar_noise * std.sample(rng);
        }
        out.push(s);
    }
    out
}

/// Generates every visit of one patient.
pub fn synthesize_patient(cfg: &SynthConfig, index: usize) -> Result<Vec<SynthVisit>, CohortError> {
    let mut rng = patient_rng(cfg.seed, index);
    let path = severity_path(cfg, &mut rng);
    let pid = patient_id(index);
    path.into_iter()
        .enumerate()
        .map(|(arm, s)| {
            let audio = synth_waveform(s, cfg, &mut rng)?;
            let transcript = synth_transcript(s, &mut rng);
            let scores = synth_scores(s, cfg.effect_strength, &mut rng);
            let labels = label_from_surveys(&scores, cfg.polarity)?;
            Ok(SynthVisit { patient_id: pid.clone(), arm: arm as u32, severity: s, audio, transcript, scores, labels })
        })
        .collect()
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

/// Voiced pulse-train segments separated by pauses over a faint noise bed.
///
/// Severity lowers F0, raises jitter and shimmer and lengthens pauses. Some
/// segments open with a short burst of high-passed noise.
fn synth_waveform(s: f64, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<AudioBuffer, CohortError> {
    let sr = f64::from(CANONICAL_RATE);
    let sig = sigmoid(s);
    let f0 = 180.0 - 25.0 * sig;
    let jitter = 0.005 + 0.02 * sig;
    let shimmer = 0.005 + 0.02 * sig;
    let pause_s = 0.2 + 0.6 * sig;

    let mut x: Vec<f64> = Vec::new();
    let silence = |x: &mut Vec<f64>, dur: f64| x.extend(std::iter::repeat_n(0.0, (dur * sr) as usize));
    silence(&mut x, 0.15);
    for seg in 0..cfg.voiced_segments {
        if seg > 0 {
            let d = (pause_s * (1.0 + 0.05 * gauss(rng))).max(0.05);
            silence(&mut x, d);
        }
        if rng.random_bool(0.5) {
            let n = (0.06 * sr) as usize;
            let mut prev = 0.0;
            for _ in 0..n {
                let w = 0.08 * gauss(rng);
                x.push(w - prev);
                prev = w;
            }
        }
        let dur = rng.random_range(0.45..0.75);
        let amp = rng.random_range(0.3..0.5);
        let end = x.len() + (dur * sr) as usize;
        let mut lp = 0.0;
        while x.len() < end {
            let period = (sr / f0) * (1.0 + jitter * gauss(rng));
            let a = amp * (1.0 + shimmer * gauss(rng));
            let n = period.round().max(2.0) as usize;
            for i in 0..n {
                let phase = i as f64 / n as f64;
                let saw = a * (1.0 - 2.0 * phase);
                lp += 0.35 * (saw - lp);
                x.push(lp);
            }
        }
    }
    silence(&mut x, 0.15);
    for v in &mut x {
        *v += cfg.noise_floor * gauss(rng);
    }
    Ok(AudioBuffer::new(x, CANONICAL_RATE)?)
}

const SUBJECTS: [&str; 6] = ["today i", "this week i", "lately i", "at work i", "at home i", "in the evening i"];
const VERBS: [&str; 6] = ["felt", "was", "stayed", "seemed", "kept feeling", "ended up"];
const NEUTRAL: [&str; 8] = ["fine", "okay", "busy", "calm", "rested", "good", "relaxed", "cheerful"];
const NEGATIVE: [&str; 8] = ["sad", "tired", "hopeless", "empty", "worthless", "lonely", "awful", "numb"];
const TAILS: [&str; 6] = [
    "and talked with friends",
    "and went for a walk",
    "and could not sleep",
    "and stayed in bed",
    "and cooked dinner",
    "and watched the rain",
];

/// Three short sentences. Severity raises both the share of negative mood
/// words and the rate of fillers.
pub fn synth_transcript(s: f64, rng: &mut ChaCha8Rng) -> String {
    let sig = sigmoid(s);
    let neg_rate = 0.1 + 0.6 * sig;
    let filler_rate = 0.05 + 0.3 * sig;
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).expect("nonempty bank");
    let mut sentences = Vec::new();
    for _ in 0..3 {
        let mut words = vec![pick(rng, &SUBJECTS)];
        if rng.random_bool(filler_rate) {
            words.push(pick(rng, &crate::biomarkers::FILLERS));
        }
        words.push(pick(rng, &VERBS));
        let mood = if rng.random_bool(neg_rate) { &NEGATIVE } else { &NEUTRAL };
        words.push(pick(rng, mood));
        words.push(pick(rng, &TAILS));
        sentences.push(words.join(" "));
    }
    sentences.join(". ")
}

/// Survey items from `sigmoid(effect * s)` scaled to each range, plus noise.
pub fn synth_scores(s: f64, effect: f64, rng: &mut ChaCha8Rng) -> SurveyScores {
    let hamd = {
        let v = 2.0 + 30.0 * sigmoid(effect * s) + 2.0 * gauss(rng);
        v.round().clamp(0.0, f64::from(HAMD_MAX)) as u32
    };
    let mut item = |max: u32, offset: f64, noise: f64| {
        let v = f64::from(max) * sigmoid(effect * s - offset) + noise * gauss(rng);
        v.round().clamp(0.0, f64::from(max)) as u32
    };
    SurveyScores {
        hamd,
        phq9_q9: item(3, 1.5, 0.4),
        mfq_q19: item(2, 1.5, 0.4),
        phq9_q3: item(3, 0.7, 0.4),
        mfq_q32: item(2, 0.7, 0.4),
        mfq_q33: item(2, 0.7, 0.4),
    }
}

pub fn wav_name(patient_id: &str, arm: u32) -> PathBuf {
    PathBuf::from("wav").join(format!("{patient_id}_arm{arm}.wav"))
}

/// Writes WAVs under `dir/wav/` and returns the unsplit cohort.
pub fn generate_cohort(cfg: &SynthConfig, dir: &Path) -> Result<Cohort, CohortError> {
    fs::create_dir_all(dir.join("wav"))?;
    let mut visits = Vec::new();
    for i in 0..cfg.n_patients {
        for v in synthesize_patient(cfg, i)? {
            visits.push(write_visit(dir, v)?);
        }
    }
    Ok(Cohort { visits })
}

pub fn write_visit(dir: &Path, v: SynthVisit) -> Result<Visit, CohortError> {
    let wav = wav_name(&v.patient_id, v.arm);
    audio::write_wav(&dir.join(&wav), &v.audio)?;
    Ok(Visit {
        patient_id: v.patient_id,
        arm: v.arm,
        wav,
        transcript: v.transcript,
        scores: v.scores,
        labels: v.labels,
        split: None,
    })
}

/// Shuffles patients with `seed` and assigns train/val/test.
///
/// Val and test get `floor(fraction * n)` patients each and train takes the
/// remainder.
pub fn split(cohort: &mut Cohort, fractions: [f64; 3], seed: u64) -> Result<(), CohortError> {
    let ok = fractions.iter().all(|f| f.is_finite() && *f >= 0.0)
        && (fractions.iter().sum::<f64>() - 1.0).abs() < 1e-6;
    if !ok {
        return Err(CohortError::BadFractions(fractions));
    }
    let mut patients = cohort.patients();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = patients.len() as f64;
    let n_val = (fractions[1] * n + 1e-9).floor() as usize;
    let n_test = (fractions[2] * n + 1e-9).floor() as usize;
    let n_train = patients.len() - n_val - n_test;
    for v in &mut cohort.visits {
        let pos = patients.iter().position(|p| *p == v.patient_id).expect("patient listed");
        v.split = Some(if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: serde_json::Value,
    pub visits: Vec<Visit>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_manifest(dir: &Path, cohort: &Cohort, config: serde_json::Value) -> Result<PathBuf, CohortError> {
    let path = dir.join(MANIFEST_FILE);
    let m = Manifest { config, visits: cohort.visits.clone() };
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<(Cohort, serde_json::Value), CohortError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| CohortError::BadManifest(format!("{}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    let mut seen = BTreeSet::new();
    for v in &m.visits {
        if !seen.insert((v.patient_id.clone(), v.arm)) {
            return Err(CohortError::BadManifest(format!("duplicate visit {} arm {}", v.patient_id, v.arm)));
        }
    }
    Ok((Cohort { visits: m.visits }, m.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_of_range_score_is_rejected() {
        let s = SurveyScores { hamd: 53, phq9_q9: 0, phq9_q3: 0, mfq_q19: 0, mfq_q32: 0, mfq_q33: 0 };
        assert!(matches!(
            label_from_surveys(&s, Polarity::SeverityPositive),
            Err(CohortError::OutOfRange { field: "hamd", .. })
        ));
    }

    #[test]
    fn severity_path_has_one_value_per_arm() {
        let cfg = SynthConfig { n_arms: 5, ..SynthConfig::default() };
        assert_eq!(severity_path(&cfg, &mut patient_rng(1, 0)).len(), 5);
    }

    #[test]
    fn transcripts_mention_only_bank_words() {
        let t = synth_transcript(0.3, &mut patient_rng(2, 3));
        assert_eq!(t.matches(". ").count(), 2);
        assert!(t.is_ascii());
    }
}
