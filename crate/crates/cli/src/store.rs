//! On-disk layout: cohort, feature caches, checkpoints and results.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use phenoscribe::biomarkers::{self, BiomarkerSeries};
use phenoscribe::cohort::{self, Cohort, Visit};
use phenoscribe::evalkit::experiment::{fusion_config, PreparedVisit};
use phenoscribe::fusion::{FusionModel, Mode, BIO_FEATURES};
use phenoscribe::landmarks::{LandmarkSequence, Symbol};
use phenoscribe::lm::{LmConfig, TinyLm};
use phenoscribe::nn::{Checkpoint, Tensor};
use serde::{Deserialize, Serialize};

use crate::{CliError, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkptName {
    Base,
    Crossmodal,
    PtuneText,
    PtuneLandmarks,
    Fusion(Mode),
}

impl fmt::Display for CkptName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CkptName::Base => "base",
            CkptName::Crossmodal => "crossmodal",
            CkptName::PtuneText => "ptune-text",
            CkptName::PtuneLandmarks => "ptune-landmarks",
            CkptName::Fusion(Mode::Longitudinal) => "fusion-longitudinal",
            CkptName::Fusion(Mode::CrossSectional) => "fusion-cross_sectional",
        })
    }
}

pub const LANDMARK_CACHE: &str = "landmarks";
pub const BIOMARKER_CACHE: &str = "biomarkers";
pub const ERROR_LOG: &str = "errors.json";

/// Landmark cache file contents.
#[derive(Debug, Serialize, Deserialize)]
pub struct LandmarkCache {
    pub config: serde_json::Value,
    pub patient_id: String,
    pub arm: u32,
    pub landmarks: LandmarkSequence,
}

/// Sidecar of a biomarker CSV holding the utterance statistics.
#[derive(Debug, Serialize, Deserialize)]
pub struct StatsSidecar {
    pub config: serde_json::Value,
    pub stats: biomarkers::UtteranceStats,
}

pub fn visit_stem(v: &Visit) -> String {
    format!("{}_arm{}", v.patient_id, v.arm)
}

pub fn dsp_echo(cfg: &RunConfig) -> serde_json::Value {
    serde_json::json!({ "dsp": cfg.dsp })
}

pub fn to_json(value: &impl Serialize) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Fails with [`CliError::Exists`] for any existing path unless `force`.
pub fn guard(paths: &[&Path], force: bool) -> Result<(), CliError> {
    match paths.iter().find(|p| p.exists()) {
        Some(p) if !force => Err(CliError::Exists(p.to_path_buf())),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn cohort_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.root.join(&cfg.paths.cohort)
    }

    pub fn cache_dir(&self, cfg: &RunConfig, kind: &str) -> PathBuf {
        self.root.join(&cfg.paths.cache).join(kind)
    }

    pub fn checkpoint(&self, cfg: &RunConfig, seed: u64, name: CkptName) -> PathBuf {
        self.root.join(&cfg.paths.checkpoints).join(format!("seed-{seed}")).join(format!("{name}.phsc"))
    }

    pub fn results_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.root.join(&cfg.paths.results)
    }

    pub fn cohort(&self, cfg: &RunConfig) -> Result<Cohort, CliError> {
        let dir = self.cohort_dir(cfg);
        if !dir.join(cohort::MANIFEST_FILE).exists() {
            return Err(CliError::MissingPrerequisite(format!(
                "no cohort manifest in {}; run `synth` first",
                dir.display()
            )));
        }
        Ok(cohort::read_manifest(&dir)?.0)
    }

    fn read_cache(&self, path: PathBuf, kind: &str) -> Result<String, CliError> {
        fs::read_to_string(&path).map_err(|_| {
            CliError::MissingPrerequisite(format!("{} is missing; run `extract --kind {kind}`", path.display()))
        })
    }

    pub fn landmarks(&self, cfg: &RunConfig, v: &Visit) -> Result<Vec<Symbol>, CliError> {
        let path = self.cache_dir(cfg, LANDMARK_CACHE).join(format!("{}.json", visit_stem(v)));
        let cache: LandmarkCache = serde_json::from_str(&self.read_cache(path, LANDMARK_CACHE)?)?;
        Ok(cache.landmarks.symbols())
    }

    pub fn biomarkers(&self, cfg: &RunConfig, v: &Visit) -> Result<BiomarkerSeries, CliError> {
        let dir = self.cache_dir(cfg, BIOMARKER_CACHE);
        let stem = visit_stem(v);
        let csv = self.read_cache(dir.join(format!("{stem}.csv")), BIOMARKER_CACHE)?;
        let side: StatsSidecar = serde_json::from_str(&self.read_cache(dir.join(format!("{stem}.stats.json")), BIOMARKER_CACHE)?)?;
        biomarkers::series_from_cache(&csv, &serde_json::to_string(&side.stats)?)
            .map_err(|e| CliError::MissingPrerequisite(format!("unreadable biomarker cache {stem}: {e}")))
    }

    /// Visits with whichever caches are requested. Skipped caches leave
    /// the landmark list or biomarker matrix empty.
    pub fn prepared(&self, cfg: &RunConfig, landmarks: bool, bio: bool) -> Result<Vec<PreparedVisit>, CliError> {
        let cohort = self.cohort(cfg)?;
        cohort
            .visits
            .iter()
            .map(|v| {
                Ok(PreparedVisit {
                    patient_id: v.patient_id.clone(),
                    arm: v.arm,
                    split: v.split.ok_or_else(|| CliError::MissingPrerequisite(format!("{} has no split", v.patient_id)))?,
                    transcript: v.transcript.clone(),
                    landmarks: if landmarks { self.landmarks(cfg, v)? } else { Vec::new() },
                    bio: if bio {
                        phenoscribe::fusion::bio_matrix(&self.biomarkers(cfg, v)?)?
                    } else {
                        Tensor::zeros(0, BIO_FEATURES)
                    },
                    labels: v.labels.as_array(),
                })
            })
            .collect()
    }

    pub fn require(&self, cfg: &RunConfig, seed: u64, names: &[CkptName], hint: &str) -> Result<(), CliError> {
        for &n in names {
            let p = self.checkpoint(cfg, seed, n);
            if !p.exists() {
                return Err(CliError::MissingPrerequisite(format!("{} not found; {hint}", p.display())));
            }
        }
        Ok(())
    }

    fn load_into(&self, lm: &mut TinyLm, path: PathBuf) -> Result<(), CliError> {
        if !path.exists() {
            return Err(CliError::MissingCheckpoint(path));
        }
        lm.load_stage(&path)?;
        Ok(())
    }

    /// Language model restored from base, adapter and prompt checkpoints.
    pub fn load_lm(&self, cfg: &RunConfig, seed: u64, with_landmarks: bool) -> Result<TinyLm, CliError> {
        let mut lm = TinyLm::new(lm_config(cfg, seed))?;
        self.load_into(&mut lm, self.checkpoint(cfg, seed, CkptName::Base))?;
        if with_landmarks {
            self.load_into(&mut lm, self.checkpoint(cfg, seed, CkptName::Crossmodal))?;
            self.load_into(&mut lm, self.checkpoint(cfg, seed, CkptName::PtuneLandmarks))?;
        } else {
            self.load_into(&mut lm, self.checkpoint(cfg, seed, CkptName::PtuneText))?;
        }
        Ok(lm)
    }

    pub fn load_fusion(&self, cfg: &RunConfig, seed: u64, mode: Mode) -> Result<FusionModel, CliError> {
        let path = self.checkpoint(cfg, seed, CkptName::Fusion(mode));
        if !path.exists() {
            return Err(CliError::MissingCheckpoint(path));
        }
        let e = &cfg.experiment;
        let mut model = FusionModel::new(fusion_config(e, seed, mode, e.lambda_aux))?;
        Checkpoint::load(&path)?.apply(&mut model.store)?;
        Ok(model)
    }

    /// Writes `ck` with the run config, stage and seed folded into its
    /// config echo.
    pub fn save_checkpoint(&self, cfg: &RunConfig, seed: u64, name: CkptName, mut ck: Checkpoint) -> Result<PathBuf, CliError> {
        let path = self.checkpoint(cfg, seed, name);
        ck.config = serde_json::json!({
            "stage": name.to_string(),
            "seed": seed,
            "model": ck.config,
            "run": cfg.echo(),
        });
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        ck.save(&path)?;
        Ok(path)
    }
}

pub fn lm_config(cfg: &RunConfig, seed: u64) -> LmConfig {
    LmConfig { seed, ..cfg.experiment.lm.clone() }
}
