use crate::cohort::Task;
use crate::nn::{weighted_bce, Graph, Var};

/// Positive-weighted binary cross-entropy for one task on a probability.
pub fn task_loss(y: bool, p: f64, w_pos: f64) -> f64 {
    weighted_bce(p, f64::from(u8::from(y)), w_pos)
}

/// `L_M + lambda * (L_A0 + L_A1)`.
pub fn total_loss(l_main: f64, l_aux0: f64, l_aux1: f64, lambda: f64) -> f64 {
    l_main + lambda * (l_aux0 + l_aux1)
}

/// Per-task class weights and the auxiliary weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtlLossConfig {
    pub w_plus: [f64; 3],
    pub lambda_aux: f64,
}

impl MtlLossConfig {
    pub fn new(w_plus: [f64; 3], lambda_aux: f64) -> Self {
        Self { w_plus, lambda_aux }
    }
}

/// Recorded multi-task loss over three `1 x 1` probabilities ordered as
/// [`Task::ALL`]. Depression is the main task.
pub fn mtl_loss(g: &mut Graph, probs: [Var; 3], labels: [bool; 3], cfg: &MtlLossConfig) -> Var {
    let l = Task::ALL.map(|t| {
        let i = t.index();
        g.weighted_bce(probs[i], f64::from(u8::from(labels[i])), cfg.w_plus[i])
    });
    let aux = g.add(l[1], l[2]);
    let aux = g.scale(aux, cfg.lambda_aux);
    g.add(l[0], aux)
}

/// `N_neg / N_pos` per task, falling back to 1 when a task has a single class.
pub fn positive_weights<'a>(labels: impl IntoIterator<Item = &'a [bool; 3]>) -> ([f64; 3], Vec<Task>) {
    let mut pos = [0usize; 3];
    let mut n = 0usize;
    for l in labels {
        n += 1;
        for (p, &y) in pos.iter_mut().zip(l) {
            *p += usize::from(y);
        }
    }
    let mut single = Vec::new();
    let w = Task::ALL.map(|t| {
        let p = pos[t.index()];
        if p == 0 || p == n {
            single.push(t);
            1.0
        } else {
            (n - p) as f64 / p as f64
        }
    });
    (w, single)
}
