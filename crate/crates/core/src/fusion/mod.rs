//! Biomarker encoder, decision-level fusion with the language-model
//! embedding, optional GRU across visits and three task heads trained with
//! the weighted multi-task loss.

pub mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biomarkers::{BiomarkerSeries, N_STATS, N_WINDOW_FIELDS};
use crate::cohort::Task;
use crate::evalkit::{balanced_accuracy_at, roc_and_threshold};
use crate::nn::{
    positional_encoding, Adam, Checkpoint, Encoder, EncoderShape, Graph, GruCell, Linear, NnError,
    ParamId, ParamStore, Tensor, Var,
};
use loss::{mtl_loss, positive_weights, MtlLossConfig};

pub const BIO_FEATURES: usize = N_WINDOW_FIELDS + N_STATS;

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("biomarker series has no windows")]
    EmptySeries,
    #[error("embedding dims differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("visits of {0} are not in strictly increasing arm order")]
    UnsortedArms(String),
    #[error("no training trajectories")]
    EmptyCohort,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Longitudinal,
    CrossSectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Mix the two embeddings, then apply shared heads.
    Embedding,
    /// Apply heads to each embedding and mix the per-task probabilities.
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub positional: bool,
    pub mode: Mode,
    pub fusion: FusionKind,
    pub lambda_aux: f64,
    /// Fixed positive-class weights; derived from the training split when absent.
    pub w_plus: Option<[f64; 3]>,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            positional: true,
            mode: Mode::Longitudinal,
            fusion: FusionKind::Embedding,
            lambda_aux: 0.25,
            w_plus: None,
            lr: 1e-3,
            epochs: 200,
            patience: 20,
            seed: 0,
        }
    }
}

/// Per-window feature rows with the utterance statistics appended to each.
pub fn bio_matrix(series: &BiomarkerSeries) -> Result<Tensor, FusionError> {
    if series.windows.is_empty() {
        return Err(FusionError::EmptySeries);
    }
    let stats = series.stats.to_vector();
    let rows: Vec<Vec<f64>> = series
        .windows
        .iter()
        .map(|w| w.to_vector().iter().chain(stats.iter()).copied().collect())
        .collect();
    Ok(Tensor::from_rows(&rows))
}

/// Everything the fusion model sees about one visit.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitFeatures {
    pub patient_id: String,
    pub arm: u32,
    pub e_lm: Vec<f64>,
    pub bio: Tensor,
    pub labels: [bool; 3],
}

pub const TRAINABLE_PREFIXES: [&str; 5] = ["bio_enc.proj", "bio_enc.blocks", "fusion.", "gru.", "head."];

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub cfg: FusionConfig,
    pub store: ParamStore,
    norm_mean: ParamId,
    norm_std: ParamId,
    proj: Linear,
    encoder: Encoder,
    fusion_logits: ParamId,
    gru: GruCell,
    heads: [Linear; 3],
}

fn head_name(t: Task) -> &'static str {
    match t {
        Task::Depression => "head.depression",
        Task::SuicidalIdeation => "head.si",
        Task::Sleep => "head.sleep",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_ba: Option<f64>,
    pub w_plus: [f64; 3],
    pub single_class_tasks: Vec<Task>,
    pub train_loss: Vec<f64>,
}

impl FusionModel {
    pub fn new(cfg: FusionConfig) -> Result<Self, FusionError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let norm_mean = store.add("bio_enc.norm.mean", Tensor::zeros(1, BIO_FEATURES));
        let norm_std = store.add("bio_enc.norm.std", Tensor::full(1, BIO_FEATURES, 1.0));
        let proj = Linear::new(&mut store, "bio_enc.proj", BIO_FEATURES, d, true, &mut rng);
        let shape = EncoderShape {
            d_model: d,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            d_ff: cfg.d_ff,
            causal: false,
        };
        let encoder = Encoder::new(&mut store, "bio_enc.blocks", shape, &mut rng)?;
        let fusion_logits = store.add("fusion.logits", Tensor::zeros(1, 2));
        let gru = GruCell::new(&mut store, "gru", d, d, &mut rng);
        let heads = Task::ALL.map(|t| Linear::new(&mut store, head_name(t), d, 1, true, &mut rng));
        let mut m = Self { cfg, store, norm_mean, norm_std, proj, encoder, fusion_logits, gru, heads };
        m.store.train_only(&TRAINABLE_PREFIXES);
        Ok(m)
    }

    pub fn fusion_logits_id(&self) -> ParamId {
        self.fusion_logits
    }

    /// Current softmax fusion weights (language model, biomarkers).
    pub fn fusion_weights(&self) -> [f64; 2] {
        let l = self.store.value(self.fusion_logits).data();
        let m = l[0].max(l[1]);
        let (a, b) = ((l[0] - m).exp(), (l[1] - m).exp());
        [a / (a + b), b / (a + b)]
    }

    /// Column means and standard deviations over every training window.
    pub fn fit_normalizer<'a>(&mut self, bios: impl IntoIterator<Item = &'a Tensor>) {
        let mut sum = vec![0.0; BIO_FEATURES];
        let mut sq = vec![0.0; BIO_FEATURES];
        let mut n = 0usize;
        for t in bios {
            for r in 0..t.rows() {
                for (j, v) in t.row_slice(r).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / n as f64 - m * m).max(0.0).sqrt();
                if s > 1e-9 { s } else { 1.0 }
            })
            .collect();
        self.store.get_mut(self.norm_mean).value = Tensor::row(mean);
        self.store.get_mut(self.norm_std).value = Tensor::row(std);
    }

    /// Mean-pooled encoder output over windows, `1 x d`.
    pub fn encode_biomarkers(&self, g: &mut Graph, bio: &Tensor) -> Result<Var, FusionError> {
        if bio.rows() == 0 {
            return Err(FusionError::EmptySeries);
        }
        if bio.cols() != BIO_FEATURES {
            return Err(FusionError::DimMismatch(BIO_FEATURES, bio.cols()));
        }
        let (mean, std) = (self.store.value(self.norm_mean).data(), self.store.value(self.norm_std).data());
        let z: Vec<f64> = bio
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % BIO_FEATURES]) / std[i % BIO_FEATURES])
            .collect();
        let x = g.constant(Tensor::new(bio.rows(), BIO_FEATURES, z));
        let mut h = self.proj.forward(g, &self.store, x)?;
        if self.cfg.positional {
            let pe = g.constant(positional_encoding(bio.rows(), self.cfg.d_model));
            h = g.add(h, pe);
        }
        let h = self.encoder.forward(g, &self.store, h)?;
        Ok(g.mean_rows(h))
    }

    fn mix(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        let logits = g.param(&self.store, self.fusion_logits);
        let w = g.softmax_rows(logits, false);
        let wa = g.slice_cols(w, 0, 1);
        let wb = g.slice_cols(w, 1, 1);
        let a = g.mul_scalar(a, wa);
        let b = g.mul_scalar(b, wb);
        g.add(a, b)
    }

    /// Softmax-weighted sum of the two embeddings.
    pub fn fuse(&self, g: &mut Graph, e_lm: Var, e_bio: Var) -> Result<Var, FusionError> {
        let (a, b) = (g.shape(e_lm), g.shape(e_bio));
        if a != b {
            return Err(FusionError::DimMismatch(a[1], b[1]));
        }
        Ok(self.mix(g, e_lm, e_bio))
    }

    fn heads_forward(&self, g: &mut Graph, rep: Var) -> Result<[Var; 3], FusionError> {
        let mut out = Vec::with_capacity(3);
        for h in &self.heads {
            let z = h.forward(g, &self.store, rep)?;
            out.push(g.sigmoid(z));
        }
        Ok([out[0], out[1], out[2]])
    }

    fn check_order(traj: &[VisitFeatures]) -> Result<(), FusionError> {
        if traj.windows(2).any(|w| w[1].arm <= w[0].arm) {
            return Err(FusionError::UnsortedArms(traj[0].patient_id.clone()));
        }
        Ok(())
    }

    /// Per-visit representation: the fused embedding, or the GRU state
    /// after consuming fused embeddings of this and all earlier visits.
    pub fn visit_reps(&self, g: &mut Graph, traj: &[VisitFeatures]) -> Result<Vec<Var>, FusionError> {
        Self::check_order(traj)?;
        let mut h = g.constant(Tensor::zeros(1, self.cfg.d_model));
        let mut reps = Vec::with_capacity(traj.len());
        for v in traj {
            let e_lm = g.constant(Tensor::row(v.e_lm.clone()));
            let e_bio = self.encode_biomarkers(g, &v.bio)?;
            let fused = self.fuse(g, e_lm, e_bio)?;
            let rep = match self.cfg.mode {
                Mode::CrossSectional => fused,
                Mode::Longitudinal => {
                    h = self.gru.step(g, &self.store, h, fused)?;
                    h
                }
            };
            reps.push(rep);
        }
        Ok(reps)
    }

    /// Per-visit task probabilities as graph nodes.
    pub fn predict_vars(&self, g: &mut Graph, traj: &[VisitFeatures]) -> Result<Vec<[Var; 3]>, FusionError> {
        match self.cfg.fusion {
            FusionKind::Embedding => {
                let reps = self.visit_reps(g, traj)?;
                reps.into_iter().map(|r| self.heads_forward(g, r)).collect()
            }
            FusionKind::Probability => {
                Self::check_order(traj)?;
                let zero = g.constant(Tensor::zeros(1, self.cfg.d_model));
                let (mut h_lm, mut h_bio) = (zero, zero);
                let mut out = Vec::with_capacity(traj.len());
                for v in traj {
                    let mut e_lm = g.constant(Tensor::row(v.e_lm.clone()));
                    let mut e_bio = self.encode_biomarkers(g, &v.bio)?;
                    let (sa, sb) = (g.shape(e_lm), g.shape(e_bio));
                    if sa != sb {
                        return Err(FusionError::DimMismatch(sa[1], sb[1]));
                    }
                    if self.cfg.mode == Mode::Longitudinal {
                        h_lm = self.gru.step(g, &self.store, h_lm, e_lm)?;
                        h_bio = self.gru.step(g, &self.store, h_bio, e_bio)?;
                        e_lm = h_lm;
                        e_bio = h_bio;
                    }
                    let pa = self.heads_forward(g, e_lm)?;
                    let pb = self.heads_forward(g, e_bio)?;
                    out.push([0, 1, 2].map(|k| self.mix(g, pa[k], pb[k])));
                }
                Ok(out)
            }
        }
    }

    pub fn predict(&self, traj: &[VisitFeatures]) -> Result<Vec<[f64; 3]>, FusionError> {
        let mut g = Graph::inference();
        let vars = self.predict_vars(&mut g, traj)?;
        Ok(vars.iter().map(|v| v.map(|p| g.value(p).item())).collect())
    }

    /// Mean multi-task loss over the visits of one trajectory.
    pub fn loss(&self, g: &mut Graph, traj: &[VisitFeatures], cfg: &MtlLossConfig) -> Result<Var, FusionError> {
        let preds = self.predict_vars(g, traj)?;
        let terms: Vec<Var> = preds
            .into_iter()
            .zip(traj)
            .map(|(p, v)| mtl_loss(g, p, v.labels, cfg))
            .collect();
        let all = g.concat_rows(&terms);
        let s = g.sum(all);
        Ok(g.scale(s, 1.0 / traj.len() as f64))
    }

    /// Splits trajectories into training batches according to the mode.
    fn batches(&self, trajs: &[Vec<VisitFeatures>]) -> Vec<Vec<VisitFeatures>> {
        match self.cfg.mode {
            Mode::Longitudinal => trajs.iter().filter(|t| !t.is_empty()).cloned().collect(),
            Mode::CrossSectional => trajs.iter().flatten().map(|v| vec![v.clone()]).collect(),
        }
    }

    /// Depression balanced accuracy on `trajs` at the threshold chosen on
    /// those same scores, or at 0.5 when one class is missing.
    pub fn main_task_ba(&self, trajs: &[Vec<VisitFeatures>]) -> Result<Option<f64>, FusionError> {
        let (mut scores, mut labels) = (Vec::new(), Vec::new());
        for t in trajs {
            for (p, v) in self.predict(t)?.iter().zip(t) {
                scores.push(p[0]);
                labels.push(v.labels[0]);
            }
        }
        if scores.is_empty() {
            return Ok(None);
        }
        let thr = roc_and_threshold(&scores, &labels).map(|r| r.threshold).unwrap_or(0.5);
        Ok(Some(balanced_accuracy_at(&scores, &labels, thr)))
    }

    /// Adam training with early stopping on validation balanced accuracy of
    /// the main task. The best parameters seen are restored at the end.
    pub fn train(&mut self, train: &[Vec<VisitFeatures>], val: &[Vec<VisitFeatures>]) -> Result<TrainReport, FusionError> {
        if train.iter().all(Vec::is_empty) {
            return Err(FusionError::EmptyCohort);
        }
        self.fit_normalizer(train.iter().flatten().map(|v| &v.bio));
        let (auto_w, single) = positive_weights(train.iter().flatten().map(|v| &v.labels));
        for t in &single {
            log::warn!("task {t} has a single class in training; its positive weight is 1");
        }
        let w_plus = self.cfg.w_plus.unwrap_or(auto_w);
        let loss_cfg = MtlLossConfig::new(w_plus, self.cfg.lambda_aux);
        self.store.train_only(&TRAINABLE_PREFIXES);
        let batches = self.batches(train);
        let mut opt = Adam::new(self.cfg.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xf05e);
        let mut order: Vec<usize> = (0..batches.len()).collect();
        let mut best: Option<(f64, usize, ParamStore)> = None;
        let mut report = TrainReport {
            epochs_run: 0,
            best_epoch: 0,
            best_val_ba: None,
            w_plus,
            single_class_tasks: single,
            train_loss: Vec::new(),
        };
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for &i in &order {
                let mut g = Graph::new();
                let l = self.loss(&mut g, &batches[i], &loss_cfg)?;
                total += g.value(l).item();
                g.backward(l)?;
                g.accumulate_param_grads(&mut self.store);
                opt.step(&mut self.store);
            }
            report.train_loss.push(total / batches.len() as f64);
            report.epochs_run = epoch + 1;
            let Some(ba) = self.main_task_ba(val)? else { continue };
            if best.as_ref().is_none_or(|(b, _, _)| ba > *b) {
                best = Some((ba, epoch, self.store.clone()));
            } else if best.as_ref().is_some_and(|(_, e, _)| epoch - e >= self.cfg.patience) {
                break;
            }
        }
        if let Some((ba, epoch, store)) = best {
            self.store = store;
            report.best_val_ba = Some(ba);
            report.best_epoch = epoch;
        } else {
            report.best_epoch = report.epochs_run.saturating_sub(1);
        }
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, &[], serde_json::to_value(&self.cfg).expect("config serializes"))
    }

    /// Parameter ids shared by all heads (everything except the heads and
    /// the frozen normalizer).
    pub fn trunk_params(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| !p.frozen && !p.name.starts_with("head."))
            .map(|(id, _)| id)
            .collect()
    }
}
