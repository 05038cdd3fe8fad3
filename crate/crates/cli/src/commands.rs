use std::fs;
use std::path::Path;

use log::info;
use phenoscribe::audio;
use phenoscribe::biomarkers;
use phenoscribe::cohort::{self, Split, Visit};
use phenoscribe::evalkit::experiment::{
    ablation_csv, ablation_table, evaluate, fusion_config, fusion_features, score_fusion, score_lm,
    train_crossmodal, train_fusion, train_ptune, Architecture, ExperimentResults, PreparedVisit,
};
use phenoscribe::fusion::{Mode, VisitFeatures};
use phenoscribe::landmarks;
use phenoscribe::lm::{LmStage, TinyLm};
use rayon::prelude::*;
use serde::Serialize;

use crate::store::{
    dsp_echo, guard, lm_config, to_json, visit_stem, CkptName, LandmarkCache, StatsSidecar, Workspace,
    BIOMARKER_CACHE, ERROR_LOG, LANDMARK_CACHE,
};
use crate::{CliError, ExtractKind, RunConfig, TrainStage};

pub const THREADS_ENV: &str = "PHENOSCRIBE_THREADS";

pub fn synth(ws: &Workspace, cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let dir = ws.cohort_dir(cfg);
    guard(&[&dir.join(cohort::MANIFEST_FILE)], force)?;
    if dir.join("wav").exists() {
        fs::remove_dir_all(dir.join("wav"))?;
    }
    let mut c = cohort::generate_cohort(&cfg.synth, &dir)?;
    cohort::split(&mut c, cfg.split.fractions, cfg.split.seed)?;
    let echo = serde_json::json!({ "synth": cfg.synth, "split": cfg.split });
    let path = cohort::write_manifest(&dir, &c, echo)?;
    println!("wrote {} visits of {} patients to {}", c.visits.len(), c.patients().len(), path.display());
    Ok(())
}

fn thread_count() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("{THREADS_ENV}={s:?} is not a positive integer"))),
        },
    }
}

#[derive(Serialize)]
struct FailedVisit {
    wav: String,
    error: String,
}

fn extract_one(ws: &Workspace, cfg: &RunConfig, dir: &Path, kind: &str, v: &Visit) -> Result<(), String> {
    let buf = audio::load_wav(&ws.cohort_dir(cfg).join(&v.wav)).map_err(|e| e.to_string())?;
    let stem = visit_stem(v);
    let write = |name: String, text: String| fs::write(dir.join(name), text).map_err(|e| e.to_string());
    if kind == LANDMARK_CACHE {
        let landmarks = landmarks::extract_landmarks(&buf, &cfg.dsp).map_err(|e| e.to_string())?;
        let cache = LandmarkCache { config: dsp_echo(cfg), patient_id: v.patient_id.clone(), arm: v.arm, landmarks };
        write(format!("{stem}.json"), to_json(&cache).map_err(|e| e.to_string())?)
    } else {
        let series = biomarkers::extract_series(&buf, &v.transcript, &cfg.dsp).map_err(|e| e.to_string())?;
        write(format!("{stem}.csv"), biomarkers::series_to_csv(&series))?;
        let side = StatsSidecar { config: dsp_echo(cfg), stats: series.stats };
        write(format!("{stem}.stats.json"), to_json(&side).map_err(|e| e.to_string())?)
    }
}

/// Caches are derived data and are rewritten on every run. A visit that
/// fails is logged and the others still run.
pub fn extract(ws: &Workspace, cfg: &RunConfig, kind: ExtractKind) -> Result<(), CliError> {
    let c = ws.cohort(cfg)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Config(e.to_string()))?;
    let kinds: &[&str] = match kind {
        ExtractKind::Landmarks => &[LANDMARK_CACHE],
        ExtractKind::Biomarkers => &[BIOMARKER_CACHE],
        ExtractKind::All => &[LANDMARK_CACHE, BIOMARKER_CACHE],
    };
    let mut failure = None;
    for &k in kinds {
        let dir = ws.cache_dir(cfg, k);
        fs::create_dir_all(&dir)?;
        let results: Vec<Result<(), String>> =
            pool.install(|| c.visits.par_iter().map(|v| extract_one(ws, cfg, &dir, k, v)).collect());
        let failed: Vec<FailedVisit> = c
            .visits
            .iter()
            .zip(results)
            .filter_map(|(v, r)| r.err().map(|error| FailedVisit { wav: v.wav.display().to_string(), error }))
            .collect();
        let log = dir.join(ERROR_LOG);
        if failed.is_empty() {
            if log.exists() {
                fs::remove_file(&log)?;
            }
            println!("{k}: cached {} visits in {}", c.visits.len(), dir.display());
        } else {
            fs::write(&log, to_json(&failed)?)?;
            eprintln!("{k}: {} of {} visits failed", failed.len(), c.visits.len());
            failure.get_or_insert(CliError::PartialFailure { failed: failed.len(), total: c.visits.len(), log });
        }
    }
    failure.map_or(Ok(()), Err)
}

fn train_base(ws: &Workspace, cfg: &RunConfig, seed: u64, force: bool) -> Result<(), CliError> {
    let out = ws.checkpoint(cfg, seed, CkptName::Base);
    guard(&[&out], force)?;
    let c = ws.cohort(cfg)?;
    let corpus: Vec<String> =
        c.visits.iter().filter(|v| v.split == Some(Split::Train)).map(|v| v.transcript.clone()).collect();
    let mut lm = TinyLm::new(lm_config(cfg, seed))?;
    let losses = lm.pretrain(&corpus, cfg.experiment.pretrain_epochs)?;
    info!("base seed {seed}: loss per epoch {losses:?}");
    let path = ws.save_checkpoint(cfg, seed, CkptName::Base, lm.checkpoint(LmStage::Base))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_base(ws: &Workspace, cfg: &RunConfig, seed: u64) -> Result<TinyLm, CliError> {
    let mut lm = TinyLm::new(lm_config(cfg, seed))?;
    lm.load_stage(&ws.checkpoint(cfg, seed, CkptName::Base))?;
    Ok(lm)
}

fn train_crossmodal_stage(ws: &Workspace, cfg: &RunConfig, seed: u64, force: bool) -> Result<(), CliError> {
    let out = ws.checkpoint(cfg, seed, CkptName::Crossmodal);
    guard(&[&out], force)?;
    ws.require(cfg, seed, &[CkptName::Base], "run `train --stage base` first")?;
    let prepared = ws.prepared(cfg, true, false)?;
    let lm = train_crossmodal(&load_base(ws, cfg, seed)?, &prepared, &cfg.experiment)?;
    let path = ws.save_checkpoint(cfg, seed, CkptName::Crossmodal, lm.checkpoint(LmStage::Crossmodal))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn train_ptune_stage(ws: &Workspace, cfg: &RunConfig, seed: u64, arch: Architecture, force: bool) -> Result<(), CliError> {
    let with_landmarks = arch.uses_landmarks();
    let name = if with_landmarks { CkptName::PtuneLandmarks } else { CkptName::PtuneText };
    let out = ws.checkpoint(cfg, seed, name);
    guard(&[&out], force)?;
    let mut lm = if with_landmarks {
        ws.require(cfg, seed, &[CkptName::Base, CkptName::Crossmodal], &format!("{arch} needs `train --stage crossmodal` first"))?;
        let mut lm = load_base(ws, cfg, seed)?;
        lm.load_stage(&ws.checkpoint(cfg, seed, CkptName::Crossmodal))?;
        lm
    } else {
        ws.require(cfg, seed, &[CkptName::Base], "run `train --stage base` first")?;
        load_base(ws, cfg, seed)?
    };
    let prepared = ws.prepared(cfg, with_landmarks, false)?;
    lm = train_ptune(&lm, &prepared, &cfg.experiment, with_landmarks)?;
    let path = ws.save_checkpoint(cfg, seed, name, lm.checkpoint(LmStage::Ptune))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn train_fusion_stage(ws: &Workspace, cfg: &RunConfig, seed: u64, mode: Mode, force: bool) -> Result<(), CliError> {
    let name = CkptName::Fusion(mode);
    let out = ws.checkpoint(cfg, seed, name);
    guard(&[&out], force)?;
    ws.require(
        cfg,
        seed,
        &[CkptName::Base, CkptName::Crossmodal, CkptName::PtuneLandmarks],
        "fusion needs the landmark P-tuning stage first",
    )?;
    let lm = ws.load_lm(cfg, seed, true)?;
    let prepared = ws.prepared(cfg, true, true)?;
    let feats = fusion_features(&lm, &prepared)?;
    let e = &cfg.experiment;
    let model = train_fusion(&feats, &prepared, fusion_config(e, seed, mode, e.lambda_aux))?;
    let path = ws.save_checkpoint(cfg, seed, name, model.checkpoint())?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn train(ws: &Workspace, cfg: &RunConfig, stage: TrainStage, seed: u64, arch: Architecture, force: bool) -> Result<(), CliError> {
    match stage {
        TrainStage::Base => train_base(ws, cfg, seed, force),
        TrainStage::Crossmodal => train_crossmodal_stage(ws, cfg, seed, force),
        TrainStage::Ptune => train_ptune_stage(ws, cfg, seed, arch, force),
        TrainStage::Fusion => train_fusion_stage(ws, cfg, seed, cfg.experiment.fusion.mode, force),
        TrainStage::All => {
            let archs = &cfg.experiment.architectures;
            for &s in &cfg.experiment.seeds {
                // existing checkpoints are kept so an interrupted run can resume
                let todo = |name| force || !ws.checkpoint(cfg, s, name).exists();
                if todo(CkptName::Base) {
                    train_base(ws, cfg, s, force)?;
                }
                if archs.contains(&Architecture::Text) && todo(CkptName::PtuneText) {
                    train_ptune_stage(ws, cfg, s, Architecture::Text, force)?;
                }
                if archs.iter().any(|a| a.uses_landmarks()) {
                    if todo(CkptName::Crossmodal) {
                        train_crossmodal_stage(ws, cfg, s, force)?;
                    }
                    if todo(CkptName::PtuneLandmarks) {
                        train_ptune_stage(ws, cfg, s, Architecture::TextLandmarks, force)?;
                    }
                }
                for (arch, mode) in [
                    (Architecture::Trimodal, Mode::CrossSectional),
                    (Architecture::TrimodalLongitudinal, Mode::Longitudinal),
                ] {
                    if archs.contains(&arch) && todo(CkptName::Fusion(mode)) {
                        train_fusion_stage(ws, cfg, s, mode, force)?;
                    }
                }
            }
            Ok(())
        }
    }
}

fn fusion_inputs(ws: &Workspace, cfg: &RunConfig, seed: u64, prepared: &[PreparedVisit]) -> Result<Vec<VisitFeatures>, CliError> {
    Ok(fusion_features(&ws.load_lm(cfg, seed, true)?, prepared)?)
}

pub fn eval(ws: &Workspace, cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let dir = ws.results_dir(cfg);
    let (csv, json) = (dir.join("results.csv"), dir.join("results.json"));
    guard(&[&csv, &json], force)?;
    let archs = &cfg.experiment.architectures;
    let prepared = ws.prepared(
        cfg,
        archs.iter().any(|a| a.uses_landmarks()),
        archs.iter().any(|a| a.uses_fusion()),
    )?;
    let lambda = cfg.experiment.lambda_aux;
    let mut rows = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let mut feats = None;
        for &arch in archs {
            let scores = match arch {
                Architecture::Text => score_lm(&ws.load_lm(cfg, seed, false)?, &prepared, false)?,
                Architecture::TextLandmarks => score_lm(&ws.load_lm(cfg, seed, true)?, &prepared, true)?,
                Architecture::Trimodal | Architecture::TrimodalLongitudinal => {
                    let mode = if arch == Architecture::Trimodal { Mode::CrossSectional } else { Mode::Longitudinal };
                    let model = ws.load_fusion(cfg, seed, mode)?;
                    let f = match &feats {
                        Some(f) => f,
                        None => feats.insert(fusion_inputs(ws, cfg, seed, &prepared)?),
                    };
                    score_fusion(&model, f, &prepared)?
                }
            };
            rows.extend(evaluate(arch, seed, lambda, &prepared, &scores)?);
        }
    }
    let results = ExperimentResults::new(cfg.echo(), rows);
    results.write(&dir)?;
    for m in &results.medians {
        println!(
            "{:<22} {:<10} P={:.3} R={:.3} BA={:.3} (median of {})",
            m.architecture, m.task, m.precision, m.recall, m.balanced_accuracy, m.n_seeds
        );
    }
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

pub fn ablate(ws: &Workspace, cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let dir = ws.results_dir(cfg);
    let (csv, json) = (dir.join("ablation.csv"), dir.join("ablation.json"));
    guard(&[&csv, &json], force)?;
    let prepared = ws.prepared(cfg, true, true)?;
    let arch = Architecture::TrimodalLongitudinal;
    let mut rows = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let feats = fusion_inputs(ws, cfg, seed, &prepared)?;
        for &lambda in &cfg.lambdas {
            let model = train_fusion(&feats, &prepared, fusion_config(&cfg.experiment, seed, Mode::Longitudinal, lambda))?;
            let scores = score_fusion(&model, &feats, &prepared)?;
            rows.extend(evaluate(arch, seed, lambda, &prepared, &scores)?);
            info!("seed {seed} lambda {lambda} done");
        }
    }
    let results = ExperimentResults::new(cfg.echo(), rows);
    let table = ablation_table(&results, &cfg.lambdas);
    fs::create_dir_all(&dir)?;
    fs::write(&csv, ablation_csv(&table))?;
    let doc = serde_json::json!({ "config": results.config, "table": table, "rows": results.rows });
    fs::write(&json, to_json(&doc)?)?;
    for m in &table {
        println!("lambda {:<5} P={:.3} R={:.3} BA={:.3}", m.lambda, m.precision, m.recall, m.balanced_accuracy);
    }
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}
