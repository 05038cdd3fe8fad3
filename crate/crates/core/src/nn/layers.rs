use rand_chacha::ChaCha8Rng;

use super::{Graph, NnError, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Low-rank update `(alpha / rank) * x A B` added to a [`Linear`] output.
#[derive(Debug, Clone)]
pub struct LowRank {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LowRank {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `y = x W + b`, with `W` stored as `d_in x d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LowRank>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), d_in, d_out, d_in, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, d_out)));
        Self { w, b, d_in, d_out, lora: None }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let [_, c] = g.shape(x);
        if c != self.d_in {
            return Err(NnError::DimMismatch { expected: self.d_in, got: c });
        }
        let w = g.param(store, self.w);
        let mut y = g.matmul(x, w);
        if let Some(b) = self.b {
            let b = g.param(store, b);
            y = g.add_row(y, b);
        }
        if let Some(l) = &self.lora {
            let a = g.param(store, l.a);
            let bb = g.param(store, l.b);
            let xa = g.matmul(x, a);
            let delta = g.matmul(xa, bb);
            let delta = g.scale(delta, l.scaling());
            y = g.add(y, delta);
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(1, d, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, d)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub causal: bool,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        causal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(NnError::HeadSplit { d_model: d, n_heads });
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            n_heads,
            causal,
        })
    }

    fn head_dim(&self) -> usize {
        self.q.d_in / self.n_heads
    }

    /// Attention probabilities per head, each `n x n`.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Vec<Var>, NnError> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        (0..self.n_heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let kt = g.transpose(kh);
                let s = g.matmul(qh, kt);
                let s = g.scale(s, scale);
                Ok(g.softmax_rows(s, self.causal))
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let probs = self.weights(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let dh = self.head_dim();
        let heads: Vec<Var> = probs
            .into_iter()
            .enumerate()
            .map(|(h, p)| {
                let vh = g.slice_cols(v, h * dh, dh);
                g.matmul(p, vh)
            })
            .collect();
        let cat = g.concat_cols(&heads);
        self.o.forward(g, store, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm block: `x + attn(ln1(x))`, then `x + ff(ln2(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub causal: bool,
}

/// Stack of encoder blocks. With no blocks the output is the input.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub d_model: usize,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        shape: EncoderShape,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        let d = shape.d_model;
        let blocks = (0..shape.n_layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                Ok(EncoderBlock {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.attn"),
                        d,
                        shape.n_heads,
                        shape.causal,
                        rng,
                    )?,
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ff: FeedForward {
                        up: Linear::new(store, &format!("{p}.ff.up"), d, shape.d_ff, true, rng),
                        down: Linear::new(store, &format!("{p}.ff.down"), shape.d_ff, d, true, rng),
                    },
                })
            })
            .collect::<Result<_, NnError>>()?;
        Ok(Self { blocks, d_model: d })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let [n, c] = g.shape(x);
        if n == 0 {
            return Err(NnError::EmptySequence);
        }
        if c != self.d_model {
            return Err(NnError::DimMismatch { expected: self.d_model, got: c });
        }
        self.blocks.iter().try_fold(x, |x, b| {
            let h = b.ln1.forward(g, store, x);
            let h = b.attn.forward(g, store, h)?;
            let x = g.add(x, h);
            let h = b.ln2.forward(g, store, x);
            let h = b.ff.forward(g, store, h)?;
            Ok(g.add(x, h))
        })
    }
}

/// Sinusoidal position table, `n x d`.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(n, d, data)
}

/// Gated recurrent unit with input biases only.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wz: Linear,
    pub wr: Linear,
    pub wh: Linear,
    pub uz: Linear,
    pub ur: Linear,
    pub uh: Linear,
    pub d_in: usize,
    pub d_hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut lin = |n: &str, a: usize, bias: bool| {
            Linear::new(store, &format!("{name}.{n}"), a, d_hidden, bias, rng)
        };
        Self {
            wz: lin("wz", d_in, true),
            wr: lin("wr", d_in, true),
            wh: lin("wh", d_in, true),
            uz: lin("uz", d_hidden, false),
            ur: lin("ur", d_hidden, false),
            uh: lin("uh", d_hidden, false),
            d_in,
            d_hidden,
        }
    }

    /// One step: `h' = h + z * (h~ - h)`, i.e. `(1 - z) h + z h~`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, h: Var, x: Var) -> Result<Var, NnError> {
        let [_, hc] = g.shape(h);
        if hc != self.d_hidden {
            return Err(NnError::DimMismatch { expected: self.d_hidden, got: hc });
        }
        let wzx = self.wz.forward(g, store, x)?;
        let uzh = self.uz.forward(g, store, h)?;
        let z = g.add(wzx, uzh);
        let z = g.sigmoid(z);
        let wrx = self.wr.forward(g, store, x)?;
        let urh = self.ur.forward(g, store, h)?;
        let r = g.add(wrx, urh);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let whx = self.wh.forward(g, store, x)?;
        let uhrh = self.uh.forward(g, store, rh)?;
        let cand = g.add(whx, uhrh);
        let cand = g.tanh(cand);
        let diff = g.sub(cand, h);
        let upd = g.mul(z, diff);
        Ok(g.add(h, upd))
    }
}
