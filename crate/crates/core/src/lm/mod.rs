//! Tiny causal language model over byte and landmark tokens, with LoRA
//! adapters for cross-modal fine-tuning and prompt tuning for
//! classification.

pub mod lora;
pub mod vocab;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::loss::{mtl_loss, MtlLossConfig};
use crate::landmarks::Symbol;
use crate::nn::{
    positional_encoding, Adam, Checkpoint, Encoder, EncoderShape, Graph, LayerNorm, Linear,
    NnError, ParamId, ParamStore, Var,
};
use vocab::{BOS, EOS, SEP, VOCAB_SIZE};

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("input token sequence is empty")]
    EmptyInput,
    #[error("no LoRA adapter attached")]
    NoAdapter,
    #[error("LoRA rank {rank} exceeds min({d_in}, {d_out})")]
    RankTooLarge { rank: usize, d_in: usize, d_out: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub const TASK_PROMPT: &str = "predict depression, suicidal ideation, sleep:";
pub const INSTRUCTION_V1: &str = "list the landmarks for: ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub prompt_len: usize,
    pub instruction_version: String,
    pub instruction: String,
    pub task_prompt: String,
    /// Transcripts are cut to this many bytes.
    pub max_text_bytes: usize,
    /// Landmark sequences are cut to this many symbols.
    pub max_landmarks: usize,
    pub lr_base: f64,
    pub lr_lora: f64,
    pub lr_ptune: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            lora_rank: 4,
            lora_alpha: 8.0,
            prompt_len: 8,
            instruction_version: "v1".into(),
            instruction: INSTRUCTION_V1.into(),
            task_prompt: TASK_PROMPT.into(),
            max_text_bytes: 192,
            max_landmarks: 64,
            lr_base: 3e-3,
            lr_lora: 3e-3,
            lr_ptune: 3e-3,
            seed: 0,
        }
    }
}

/// Which parameter group a training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmStage {
    Base,
    Crossmodal,
    Ptune,
    Frozen,
}

impl LmStage {
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            LmStage::Base => &["lm."],
            LmStage::Crossmodal => &["lora."],
            LmStage::Ptune => &["prompt.", "clf."],
            LmStage::Frozen => &[],
        }
    }
}

/// A transcript paired with its landmark symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub transcript: String,
    pub landmarks: Vec<Symbol>,
}

/// A classification input already turned into token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassExample {
    pub ids: Vec<usize>,
    pub labels: [bool; 3],
}

#[derive(Debug, Clone)]
pub struct TinyLm {
    pub cfg: LmConfig,
    pub store: ParamStore,
    tok_emb: ParamId,
    encoder: Encoder,
    final_ln: LayerNorm,
    lm_head: Linear,
    prompt: ParamId,
    clf: Linear,
}

impl TinyLm {
    pub fn new(cfg: LmConfig) -> Result<Self, LmError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        // a lookup is a one-hot product with fan-in 1, keeping token vectors
        // on the same scale as the position table
        let tok_emb = store.add_uniform("lm.tok_emb", VOCAB_SIZE, d, 1, &mut rng);
        let shape = EncoderShape {
            d_model: d,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            d_ff: cfg.d_ff,
            causal: true,
        };
        let encoder = Encoder::new(&mut store, "lm.blocks", shape, &mut rng)?;
        let final_ln = LayerNorm::new(&mut store, "lm.ln_f", d);
        let lm_head = Linear::new(&mut store, "lm.head", d, VOCAB_SIZE, true, &mut rng);
        let prompt = store.add_uniform("prompt.emb", cfg.prompt_len, d, 1, &mut rng);
        let clf = Linear::new(&mut store, "clf", d, 3, true, &mut rng);
        Ok(Self { cfg, store, tok_emb, encoder, final_ln, lm_head, prompt, clf })
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn has_lora(&self) -> bool {
        self.encoder.blocks.iter().any(|b| b.attn.q.lora.is_some())
    }

    /// Puts LoRA adapters on the query and value projections of every block.
    pub fn attach_lora(&mut self) -> Result<(), LmError> {
        if self.has_lora() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x4c4f5241);
        let (r, a) = (self.cfg.lora_rank, self.cfg.lora_alpha);
        for (l, block) in self.encoder.blocks.iter_mut().enumerate() {
            lora::attach(&mut self.store, &mut block.attn.q, &format!("lora.blocks.{l}.q"), r, a, &mut rng)?;
            lora::attach(&mut self.store, &mut block.attn.v, &format!("lora.blocks.{l}.v"), r, a, &mut rng)?;
        }
        Ok(())
    }

    /// Every adapted linear layer, for merge checks.
    pub fn adapted_layers(&self) -> Vec<&Linear> {
        self.encoder
            .blocks
            .iter()
            .flat_map(|b| [&b.attn.q, &b.attn.v])
            .filter(|l| l.lora.is_some())
            .collect()
    }

    pub fn set_stage(&mut self, stage: LmStage) {
        self.store.train_only(stage.prefixes());
    }

    fn hidden(&self, g: &mut Graph, ids: &[usize], with_prompt: bool) -> Result<Var, LmError> {
        if ids.is_empty() {
            return Err(LmError::EmptyInput);
        }
        let emb = g.param(&self.store, self.tok_emb);
        let mut x = g.select_rows(emb, ids);
        if with_prompt && self.cfg.prompt_len > 0 {
            let p = g.param(&self.store, self.prompt);
            x = g.concat_rows(&[p, x]);
        }
        let [n, d] = g.shape(x);
        let pe = g.constant(positional_encoding(n, d));
        let x = g.add(x, pe);
        Ok(self.encoder.forward(g, &self.store, x)?)
    }

    /// Next-token logits, one row per input position.
    pub fn lm_logits(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, LmError> {
        let h = self.hidden(g, ids, false)?;
        let h = self.final_ln.forward(g, &self.store, h);
        Ok(self.lm_head.forward(g, &self.store, h)?)
    }

    /// Three task logits from the prompt-prefixed sequence, `1 x 3`.
    pub fn class_logits(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, LmError> {
        let h = self.hidden(g, ids, true)?;
        let n = g.shape(h)[0];
        let last = g.select_rows(h, &[n - 1]);
        let last = self.final_ln.forward(g, &self.store, last);
        Ok(self.clf.forward(g, &self.store, last)?)
    }

    pub fn class_probs(&self, ids: &[usize]) -> Result<[f64; 3], LmError> {
        let mut g = Graph::inference();
        let z = self.class_logits(&mut g, ids)?;
        let p = g.sigmoid(z);
        let v = g.value(p).data();
        Ok([v[0], v[1], v[2]])
    }

    /// Last-block hidden state at the final position of the prompt-prefixed
    /// sequence.
    pub fn embed(&self, ids: &[usize]) -> Result<Vec<f64>, LmError> {
        let mut g = Graph::inference();
        let h = self.hidden(&mut g, ids, true)?;
        let n = g.shape(h)[0];
        Ok(g.value(h).row_slice(n - 1).to_vec())
    }

    fn text_ids(&self, text: &str) -> Vec<usize> {
        let mut ids = vocab::encode_text(text);
        ids.truncate(self.cfg.max_text_bytes);
        ids
    }

    fn landmark_ids(&self, lms: &[Symbol]) -> Vec<usize> {
        lms.iter().take(self.cfg.max_landmarks).map(|&s| vocab::landmark_id(s)).collect()
    }

    pub fn base_ids(&self, transcript: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.text_ids(transcript));
        ids.push(EOS);
        ids
    }

    /// `BOS instruction transcript SEP landmarks EOS` and the SEP position.
    pub fn crossmodal_ids(&self, pair: &AlignedPair) -> (Vec<usize>, usize) {
        let mut ids = vec![BOS];
        ids.extend(vocab::encode_text(&self.cfg.instruction));
        ids.extend(self.text_ids(&pair.transcript));
        let sep = ids.len();
        ids.push(SEP);
        ids.extend(self.landmark_ids(&pair.landmarks));
        ids.push(EOS);
        (ids, sep)
    }

    /// `task prompt, transcript[, SEP landmarks]`; the learned prompt is
    /// prepended inside the model.
    pub fn classification_ids(&self, transcript: &str, landmarks: Option<&[Symbol]>) -> Vec<usize> {
        let mut ids = vocab::encode_text(&self.cfg.task_prompt);
        ids.push(usize::from(b' '));
        ids.extend(self.text_ids(transcript));
        if let Some(lms) = landmarks {
            ids.push(SEP);
            ids.extend(self.landmark_ids(lms));
        }
        ids
    }

    fn order(&self, n: usize, epoch: usize, salt: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ salt ^ ((epoch as u64) << 32));
        idx.shuffle(&mut rng);
        idx
    }

    fn run_lm_epochs(
        &mut self,
        seqs: &[(Vec<usize>, Vec<Option<usize>>)],
        epochs: usize,
        lr: f64,
        salt: u64,
    ) -> Result<Vec<f64>, LmError> {
        let mut opt = Adam::new(lr);
        let mut losses = Vec::with_capacity(epochs);
        for e in 0..epochs {
            let mut total = 0.0;
            for i in self.order(seqs.len(), e, salt) {
                let (ids, targets) = &seqs[i];
                let mut g = Graph::new();
                let logits = self.lm_logits(&mut g, ids)?;
                let l = g.cross_entropy(logits, targets);
                total += g.value(l).item();
                g.backward(l)?;
                g.accumulate_param_grads(&mut self.store);
                opt.step(&mut self.store);
            }
            losses.push(total / seqs.len() as f64);
        }
        Ok(losses)
    }

    /// Next-token training of the base weights on plain transcripts.
    pub fn pretrain(&mut self, corpus: &[String], epochs: usize) -> Result<Vec<f64>, LmError> {
        if corpus.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        self.set_stage(LmStage::Base);
        let seqs: Vec<_> = corpus
            .iter()
            .map(|t| {
                let ids = self.base_ids(t);
                let targets = shifted_targets(&ids, 0);
                (ids, targets)
            })
            .collect();
        let lr = self.cfg.lr_base;
        self.run_lm_epochs(&seqs, epochs, lr, 0xba5e)
    }

    /// LoRA-only training to continue a transcript with its landmarks.
    pub fn crossmodal_finetune(&mut self, pairs: &[AlignedPair], epochs: usize) -> Result<Vec<f64>, LmError> {
        if pairs.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        if !self.has_lora() {
            return Err(LmError::NoAdapter);
        }
        self.set_stage(LmStage::Crossmodal);
        let seqs: Vec<_> = pairs
            .iter()
            .map(|p| {
                let (ids, sep) = self.crossmodal_ids(p);
                let targets = shifted_targets(&ids, sep);
                (ids, targets)
            })
            .collect();
        let lr = self.cfg.lr_lora;
        self.run_lm_epochs(&seqs, epochs, lr, 0x10a)
    }

    /// Share of landmark tokens after SEP predicted exactly by greedy argmax.
    pub fn landmark_accuracy(&self, pairs: &[AlignedPair]) -> Result<f64, LmError> {
        let (mut hit, mut total) = (0usize, 0usize);
        for p in pairs {
            let (ids, sep) = self.crossmodal_ids(p);
            let mut g = Graph::inference();
            let logits = self.lm_logits(&mut g, &ids)?;
            let t = g.value(logits);
            for i in sep..ids.len() - 1 {
                let target = ids[i + 1];
                if !vocab::is_landmark(target) {
                    continue;
                }
                let row = t.row_slice(i);
                let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("vocab");
                hit += usize::from(arg == target);
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }

    /// Trains the prompt and classifier with the multi-task loss.
    pub fn p_tune(&mut self, data: &[ClassExample], epochs: usize, loss: &MtlLossConfig) -> Result<Vec<f64>, LmError> {
        if data.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        self.set_stage(LmStage::Ptune);
        let mut opt = Adam::new(self.cfg.lr_ptune);
        let mut losses = Vec::with_capacity(epochs);
        for e in 0..epochs {
            let mut total = 0.0;
            for i in self.order(data.len(), e, 0x9701) {
                let ex = &data[i];
                let mut g = Graph::new();
                let z = self.class_logits(&mut g, &ex.ids)?;
                let p = g.sigmoid(z);
                let probs = [0, 1, 2].map(|k| g.slice_cols(p, k, 1));
                let l = mtl_loss(&mut g, probs, ex.labels, loss);
                total += g.value(l).item();
                g.backward(l)?;
                g.accumulate_param_grads(&mut self.store);
                opt.step(&mut self.store);
            }
            losses.push(total / data.len() as f64);
        }
        Ok(losses)
    }

    pub fn checkpoint(&self, stage: LmStage) -> Checkpoint {
        let prefixes = match stage {
            LmStage::Frozen => &[][..],
            s => s.prefixes(),
        };
        Checkpoint::from_store(&self.store, prefixes, serde_json::to_value(&self.cfg).expect("config serializes"))
    }

    pub fn save_stage(&self, stage: LmStage, path: &Path) -> Result<(), LmError> {
        Ok(self.checkpoint(stage).save(path)?)
    }

    /// Loads values from a stage checkpoint. LoRA checkpoints need adapters
    /// attached first.
    pub fn load_stage(&mut self, path: &Path) -> Result<Checkpoint, LmError> {
        let ck = Checkpoint::load(path)?;
        if ck.params.iter().any(|(n, _, _)| n.starts_with("lora.")) {
            self.attach_lora()?;
        }
        ck.apply(&mut self.store)?;
        Ok(ck)
    }

    /// Count of parameters a stage would train.
    pub fn stage_param_count(&self, stage: LmStage) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| stage.prefixes().iter().any(|x| p.name.starts_with(x)))
            .map(|(_, p)| p.value.len())
            .sum()
    }
}

/// Next-token targets for positions at or after `from`.
fn shifted_targets(ids: &[usize], from: usize) -> Vec<Option<usize>> {
    (0..ids.len())
        .map(|i| (i >= from && i + 1 < ids.len()).then(|| ids[i + 1]))
        .collect()
}
