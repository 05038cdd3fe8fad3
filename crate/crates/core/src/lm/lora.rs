use rand_chacha::ChaCha8Rng;

use super::LmError;
use crate::nn::{Linear, LowRank, ParamStore, Tensor};

pub type LoraAdapter = LowRank;

/// Adds `A` (uniform init) and `B` (zeros) to `layer`. Rank 0 leaves the
/// layer untouched.
pub fn attach(
    store: &mut ParamStore,
    layer: &mut Linear,
    name: &str,
    rank: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(), LmError> {
    if rank == 0 {
        return Ok(());
    }
    if rank > layer.d_in.min(layer.d_out) {
        return Err(LmError::RankTooLarge { rank, d_in: layer.d_in, d_out: layer.d_out });
    }
    let a = store.add_uniform(format!("{name}.a"), layer.d_in, rank, layer.d_in, rng);
    let b = store.add(format!("{name}.b"), Tensor::zeros(rank, layer.d_out));
    layer.lora = Some(LowRank { a, b, rank, alpha });
    Ok(())
}

/// `W + (alpha / r) A B`, or `W` when no adapter is attached.
pub fn merged_weight(store: &ParamStore, layer: &Linear) -> Tensor {
    let w = store.value(layer.w).clone();
    let Some(l) = &layer.lora else { return w };
    let delta = store.value(l.a).matmul(store.value(l.b));
    let s = l.scaling();
    let data = w.data().iter().zip(delta.data()).map(|(a, d)| a + s * d).collect();
    Tensor::new(w.rows(), w.cols(), data)
}

/// Plain affine map `x W + b` for a row batch `x`.
pub fn plain_forward(store: &ParamStore, w: &Tensor, bias: Option<crate::nn::ParamId>, x: &Tensor) -> Tensor {
    let y = x.matmul(w);
    let Some(b) = bias else { return y };
    let b = store.value(b).data();
    let n = y.cols();
    let data = y.data().iter().enumerate().map(|(i, v)| v + b[i % n]).collect();
    Tensor::new(y.rows(), n, data)
}
