//! Train-and-evaluate drivers for the architecture comparison and the
//! auxiliary-weight ablation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{median, metrics, roc_and_threshold, ConfusionCounts, EvalError};
use crate::biomarkers::{self, BiomarkerError, BiomarkerSeries};
use crate::cohort::{self, Cohort, CohortError, Split, SynthConfig, Task, Visit};
use crate::dsp::DspConfig;
use crate::fusion::loss::{positive_weights, MtlLossConfig};
use crate::fusion::{bio_matrix, FusionConfig, FusionError, FusionModel, Mode, VisitFeatures};
use crate::landmarks::{self, LandmarkError, Symbol};
use crate::lm::{AlignedPair, ClassExample, LmConfig, LmError, TinyLm};
use crate::nn::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Landmark(#[from] LandmarkError),
    #[error(transparent)]
    Biomarker(#[from] BiomarkerError),
    #[error("no visits in the {0:?} split")]
    EmptySplit(Split),
    #[error("visit {0} has no split assignment")]
    Unsplit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "text")]
    Text,
    #[serde(rename = "text+landmarks")]
    TextLandmarks,
    #[serde(rename = "trimodal")]
    Trimodal,
    #[serde(rename = "trimodal+longitudinal")]
    TrimodalLongitudinal,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Text,
        Architecture::TextLandmarks,
        Architecture::Trimodal,
        Architecture::TrimodalLongitudinal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Text => "text",
            Architecture::TextLandmarks => "text+landmarks",
            Architecture::Trimodal => "trimodal",
            Architecture::TrimodalLongitudinal => "trimodal+longitudinal",
        }
    }

    pub fn uses_landmarks(self) -> bool {
        self != Architecture::Text
    }

    pub fn uses_fusion(self) -> bool {
        matches!(self, Architecture::Trimodal | Architecture::TrimodalLongitudinal)
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub lm: LmConfig,
    /// `d_model` is taken from the language model; `mode` from the architecture.
    pub fusion: FusionConfig,
    pub pretrain_epochs: usize,
    pub crossmodal_epochs: usize,
    pub ptune_epochs: usize,
    pub lambda_aux: f64,
    pub architectures: Vec<Architecture>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            fusion: FusionConfig::default(),
            pretrain_epochs: 4,
            crossmodal_epochs: 4,
            ptune_epochs: 10,
            lambda_aux: 0.25,
            architectures: Architecture::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

/// One visit with its extracted features, ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedVisit {
    pub patient_id: String,
    pub arm: u32,
    pub split: Split,
    pub transcript: String,
    pub landmarks: Vec<Symbol>,
    pub bio: Tensor,
    pub labels: [bool; 3],
}

impl PreparedVisit {
    pub fn new(
        visit: &Visit,
        lms: &landmarks::LandmarkSequence,
        series: &BiomarkerSeries,
    ) -> Result<Self, ExperimentError> {
        Ok(Self {
            patient_id: visit.patient_id.clone(),
            arm: visit.arm,
            split: visit.split.ok_or_else(|| ExperimentError::Unsplit(visit.patient_id.clone()))?,
            transcript: visit.transcript.clone(),
            landmarks: lms.symbols(),
            bio: bio_matrix(series)?,
            labels: visit.labels.as_array(),
        })
    }
}

/// Generates, splits and extracts a synthetic cohort entirely in memory.
pub fn prepare_synthetic(
    synth: &SynthConfig,
    fractions: [f64; 3],
    split_seed: u64,
    dsp: &DspConfig,
) -> Result<Vec<PreparedVisit>, ExperimentError> {
    let mut synthetic = Vec::new();
    for i in 0..synth.n_patients {
        synthetic.extend(cohort::synthesize_patient(synth, i)?);
    }
    let mut c = Cohort {
        visits: synthetic
            .iter()
            .map(|v| Visit {
                patient_id: v.patient_id.clone(),
                arm: v.arm,
                wav: cohort::wav_name(&v.patient_id, v.arm),
                transcript: v.transcript.clone(),
                scores: v.scores,
                labels: v.labels,
                split: None,
            })
            .collect(),
    };
    cohort::split(&mut c, fractions, split_seed)?;
    c.visits
        .iter()
        .zip(&synthetic)
        .map(|(visit, s)| {
            let lms = landmarks::extract_landmarks(&s.audio, dsp)?;
            let series = biomarkers::extract_series(&s.audio, &s.transcript, dsp)?;
            PreparedVisit::new(visit, &lms, &series)
        })
        .collect()
}

fn in_split(prepared: &[PreparedVisit], split: Split) -> impl Iterator<Item = (usize, &PreparedVisit)> {
    prepared.iter().enumerate().filter(move |(_, v)| v.split == split)
}

fn lm_config(cfg: &ExperimentConfig, seed: u64) -> LmConfig {
    LmConfig { seed, ..cfg.lm.clone() }
}

pub fn fusion_config(cfg: &ExperimentConfig, seed: u64, mode: Mode, lambda: f64) -> FusionConfig {
    FusionConfig { seed, mode, lambda_aux: lambda, d_model: cfg.lm.d_model, ..cfg.fusion.clone() }
}

fn train_labels(prepared: &[PreparedVisit]) -> Vec<[bool; 3]> {
    in_split(prepared, Split::Train).map(|(_, v)| v.labels).collect()
}

/// Base language model trained on training-split transcripts.
pub fn train_base(prepared: &[PreparedVisit], cfg: &ExperimentConfig, seed: u64) -> Result<TinyLm, ExperimentError> {
    let corpus: Vec<String> = in_split(prepared, Split::Train).map(|(_, v)| v.transcript.clone()).collect();
    let mut lm = TinyLm::new(lm_config(cfg, seed))?;
    lm.pretrain(&corpus, cfg.pretrain_epochs)?;
    Ok(lm)
}

/// Copy of `base` with LoRA adapters trained to map transcripts to landmarks.
pub fn train_crossmodal(base: &TinyLm, prepared: &[PreparedVisit], cfg: &ExperimentConfig) -> Result<TinyLm, ExperimentError> {
    let pairs: Vec<AlignedPair> = in_split(prepared, Split::Train)
        .map(|(_, v)| AlignedPair { transcript: v.transcript.clone(), landmarks: v.landmarks.clone() })
        .collect();
    let mut lm = base.clone();
    lm.attach_lora()?;
    lm.crossmodal_finetune(&pairs, cfg.crossmodal_epochs)?;
    Ok(lm)
}

fn class_ids(lm: &TinyLm, v: &PreparedVisit, with_landmarks: bool) -> Vec<usize> {
    lm.classification_ids(&v.transcript, with_landmarks.then_some(v.landmarks.as_slice()))
}

/// Copy of `lm` with prompt and classifier trained on the training split.
pub fn train_ptune(
    lm: &TinyLm,
    prepared: &[PreparedVisit],
    cfg: &ExperimentConfig,
    with_landmarks: bool,
) -> Result<TinyLm, ExperimentError> {
    let data: Vec<ClassExample> = in_split(prepared, Split::Train)
        .map(|(_, v)| ClassExample { ids: class_ids(lm, v, with_landmarks), labels: v.labels })
        .collect();
    let labels = train_labels(prepared);
    let (w_plus, _) = positive_weights(labels.iter());
    let mut out = lm.clone();
    out.p_tune(&data, cfg.ptune_epochs, &MtlLossConfig::new(w_plus, cfg.lambda_aux))?;
    Ok(out)
}

/// Task probabilities from the classifier head, one entry per visit.
pub fn score_lm(lm: &TinyLm, prepared: &[PreparedVisit], with_landmarks: bool) -> Result<Vec<[f64; 3]>, ExperimentError> {
    prepared.iter().map(|v| Ok(lm.class_probs(&class_ids(lm, v, with_landmarks))?)).collect()
}

/// Frozen language-model embeddings joined with biomarker matrices.
pub fn fusion_features(lm: &TinyLm, prepared: &[PreparedVisit]) -> Result<Vec<VisitFeatures>, ExperimentError> {
    prepared
        .iter()
        .map(|v| {
            Ok(VisitFeatures {
                patient_id: v.patient_id.clone(),
                arm: v.arm,
                e_lm: lm.embed(&class_ids(lm, v, true))?,
                bio: v.bio.clone(),
                labels: v.labels,
            })
        })
        .collect()
}

/// Per-patient trajectories of one split in arm order, with the indices of
/// their visits in `feats`.
pub fn trajectories(feats: &[VisitFeatures], prepared: &[PreparedVisit], split: Split) -> Vec<(Vec<usize>, Vec<VisitFeatures>)> {
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, v) in in_split(prepared, split) {
        by_patient.entry(v.patient_id.as_str()).or_default().push(i);
    }
    by_patient
        .into_values()
        .map(|mut idx| {
            idx.sort_by_key(|&i| feats[i].arm);
            let t = idx.iter().map(|&i| feats[i].clone()).collect();
            (idx, t)
        })
        .collect()
}

pub fn train_fusion(
    feats: &[VisitFeatures],
    prepared: &[PreparedVisit],
    fcfg: FusionConfig,
) -> Result<FusionModel, ExperimentError> {
    let train: Vec<_> = trajectories(feats, prepared, Split::Train).into_iter().map(|(_, t)| t).collect();
    let val: Vec<_> = trajectories(feats, prepared, Split::Val).into_iter().map(|(_, t)| t).collect();
    let mut model = FusionModel::new(fcfg)?;
    model.train(&train, &val)?;
    Ok(model)
}

/// Fusion probabilities for every validation and test visit; training
/// visits are scored too so the output aligns with `prepared`.
pub fn score_fusion(model: &FusionModel, feats: &[VisitFeatures], prepared: &[PreparedVisit]) -> Result<Vec<[f64; 3]>, ExperimentError> {
    let mut out = vec![[f64::NAN; 3]; prepared.len()];
    for split in [Split::Train, Split::Val, Split::Test] {
        for (idx, traj) in trajectories(feats, prepared, split) {
            for (i, p) in idx.into_iter().zip(model.predict(&traj)?) {
                out[i] = p;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub architecture: Architecture,
    pub task: Task,
    pub seed: u64,
    pub lambda: f64,
    pub precision: f64,
    pub recall: f64,
    pub balanced_accuracy: f64,
    pub threshold: f64,
    /// Split whose scores chose the threshold.
    pub threshold_split: Split,
}

/// Picks each task's threshold on validation scores and applies it to test.
/// A validation split with a single class falls back to 0.5.
pub fn evaluate(
    architecture: Architecture,
    seed: u64,
    lambda: f64,
    prepared: &[PreparedVisit],
    scores: &[[f64; 3]],
) -> Result<Vec<ResultRow>, ExperimentError> {
    let collect = |split, k: usize| -> (Vec<f64>, Vec<bool>) {
        in_split(prepared, split).map(|(i, v)| (scores[i][k], v.labels[k])).unzip()
    };
    Task::ALL
        .iter()
        .map(|&task| {
            let k = task.index();
            let (vs, vl) = collect(Split::Val, k);
            let (ts, tl) = collect(Split::Test, k);
            if ts.is_empty() {
                return Err(ExperimentError::EmptySplit(Split::Test));
            }
            let threshold = match roc_and_threshold(&vs, &vl) {
                Ok(r) => r.threshold,
                Err(EvalError::SingleClass) => 0.5,
                Err(e) => return Err(e.into()),
            };
            let m = metrics(&ConfusionCounts::at_threshold(&ts, &tl, threshold))?;
            Ok(ResultRow {
                architecture,
                task,
                seed,
                lambda,
                precision: m.precision,
                recall: m.recall,
                balanced_accuracy: m.balanced_accuracy,
                threshold,
                threshold_split: Split::Val,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub architecture: Architecture,
    pub task: Task,
    pub lambda: f64,
    pub precision: f64,
    pub recall: f64,
    pub balanced_accuracy: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: serde_json::Value,
    pub rows: Vec<ResultRow>,
    pub medians: Vec<MedianRow>,
}

impl ExperimentResults {
    pub fn new(config: serde_json::Value, mut rows: Vec<ResultRow>) -> Self {
        rows.sort_by(|a, b| {
            (a.architecture, a.task.index(), a.seed)
                .cmp(&(b.architecture, b.task.index(), b.seed))
                .then(a.lambda.total_cmp(&b.lambda))
        });
        let mut groups: Vec<(Architecture, Task, f64, Vec<&ResultRow>)> = Vec::new();
        for r in &rows {
            match groups.iter_mut().find(|g| g.0 == r.architecture && g.1 == r.task && g.2 == r.lambda) {
                Some(g) => g.3.push(r),
                None => groups.push((r.architecture, r.task, r.lambda, vec![r])),
            }
        }
        groups.sort_by(|a, b| (a.0, a.1.index()).cmp(&(b.0, b.1.index())).then(a.2.total_cmp(&b.2)));
        let medians = groups
            .into_iter()
            .map(|(architecture, task, lambda, rs)| {
                let col = |f: fn(&ResultRow) -> f64| median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
                MedianRow {
                    architecture,
                    task,
                    lambda,
                    precision: col(|r| r.precision),
                    recall: col(|r| r.recall),
                    balanced_accuracy: col(|r| r.balanced_accuracy),
                    n_seeds: rs.len(),
                }
            })
            .collect();
        Self { config, rows, medians }
    }

    pub fn median_ba(&self, arch: Architecture, task: Task, lambda: f64) -> Option<f64> {
        self.medians
            .iter()
            .find(|m| m.architecture == arch && m.task == task && m.lambda == lambda)
            .map(|m| m.balanced_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("architecture,task,seed,lambda,P,R,BA,threshold\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.architecture, r.task, r.seed, r.lambda, r.precision, r.recall, r.balanced_accuracy, r.threshold
            ));
        }
        out
    }

    /// Writes `results.csv` and `results.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("results.csv"), self.to_csv())?;
        fs::write(dir.join("results.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Models produced for one seed, kept so stages can be saved or reused.
#[derive(Debug, Clone)]
pub struct SeedModels {
    pub base: TinyLm,
    pub text: Option<TinyLm>,
    pub crossmodal: Option<TinyLm>,
    pub landmark: Option<TinyLm>,
}

/// Runs every language-model stage that `archs` needs.
pub fn train_lm_stages(
    prepared: &[PreparedVisit],
    cfg: &ExperimentConfig,
    seed: u64,
    archs: &[Architecture],
) -> Result<SeedModels, ExperimentError> {
    let base = train_base(prepared, cfg, seed)?;
    let text = archs
        .contains(&Architecture::Text)
        .then(|| train_ptune(&base, prepared, cfg, false))
        .transpose()?;
    let (crossmodal, landmark) = if archs.iter().any(|a| a.uses_landmarks()) {
        let cm = train_crossmodal(&base, prepared, cfg)?;
        let pt = train_ptune(&cm, prepared, cfg, true)?;
        (Some(cm), Some(pt))
    } else {
        (None, None)
    };
    Ok(SeedModels { base, text, crossmodal, landmark })
}

/// Scores every requested architecture for one seed.
pub fn run_seed(
    prepared: &[PreparedVisit],
    cfg: &ExperimentConfig,
    seed: u64,
    models: &SeedModels,
) -> Result<Vec<ResultRow>, ExperimentError> {
    let mut rows = Vec::new();
    let mut feats = None;
    for &arch in &cfg.architectures {
        let scores = match arch {
            Architecture::Text => score_lm(models.text.as_ref().expect("text model trained"), prepared, false)?,
            Architecture::TextLandmarks => {
                score_lm(models.landmark.as_ref().expect("landmark model trained"), prepared, true)?
            }
            Architecture::Trimodal | Architecture::TrimodalLongitudinal => {
                let lm = models.landmark.as_ref().expect("landmark model trained");
                let f = match &feats {
                    Some(f) => f,
                    None => feats.insert(fusion_features(lm, prepared)?),
                };
                let mode = if arch == Architecture::Trimodal { Mode::CrossSectional } else { Mode::Longitudinal };
                let model = train_fusion(f, prepared, fusion_config(cfg, seed, mode, cfg.lambda_aux))?;
                score_fusion(&model, f, prepared)?
            }
        };
        rows.extend(evaluate(arch, seed, cfg.lambda_aux, prepared, &scores)?);
    }
    Ok(rows)
}

/// Trains and evaluates every configured architecture for every seed.
pub fn run_experiment(prepared: &[PreparedVisit], cfg: &ExperimentConfig) -> Result<ExperimentResults, ExperimentError> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let models = train_lm_stages(prepared, cfg, seed, &cfg.architectures)?;
        rows.extend(run_seed(prepared, cfg, seed, &models)?);
    }
    Ok(ExperimentResults::new(serde_json::to_value(cfg)?, rows))
}

pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Longitudinal trimodal model retrained per auxiliary weight. Language
/// model stages are trained once per seed and shared across weights.
pub fn ablate_lambda(
    prepared: &[PreparedVisit],
    cfg: &ExperimentConfig,
    lambdas: &[f64],
) -> Result<ExperimentResults, ExperimentError> {
    let arch = Architecture::TrimodalLongitudinal;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let models = train_lm_stages(prepared, cfg, seed, &[arch])?;
        let feats = fusion_features(models.landmark.as_ref().expect("landmark model trained"), prepared)?;
        for &lambda in lambdas {
            let model = train_fusion(&feats, prepared, fusion_config(cfg, seed, Mode::Longitudinal, lambda))?;
            let scores = score_fusion(&model, &feats, prepared)?;
            rows.extend(evaluate(arch, seed, lambda, prepared, &scores)?);
        }
    }
    let mut config = serde_json::to_value(cfg)?;
    config["lambdas"] = serde_json::to_value(lambdas)?;
    Ok(ExperimentResults::new(config, rows))
}

/// Main-task medians per auxiliary weight, in grid order.
pub fn ablation_table(results: &ExperimentResults, lambdas: &[f64]) -> Vec<MedianRow> {
    lambdas
        .iter()
        .filter_map(|&l| {
            results
                .medians
                .iter()
                .find(|m| m.task == Task::Depression && m.lambda == l)
                .cloned()
        })
        .collect()
}

pub fn ablation_csv(table: &[MedianRow]) -> String {
    let mut out = String::from("lambda,P,R,BA\n");
    for m in table {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", m.lambda, m.precision, m.recall, m.balanced_accuracy));
    }
    out
}
