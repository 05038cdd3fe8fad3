use super::{Graph, NnError, ParamStore, Var};

/// Worst disagreement found by [`check_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares backprop gradients of every unfrozen parameter with central
/// differences of step `h`. Relative error is
/// `|a - n| / max(|a| + |n|, floor)`.
pub fn check_params<F>(store: &mut ParamStore, h: f64, floor: f64, loss: F) -> Result<GradReport, NnError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NnError>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    g.backward(l)?;
    store.zero_grad();
    g.accumulate_param_grads(store);
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    store.zero_grad();

    let eval = |s: &ParamStore| -> Result<f64, NnError> {
        let mut g = Graph::inference();
        let l = loss(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut report = GradReport { max_rel_err: 0.0, worst: String::new(), checked: 0 };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).frozen {
            continue;
        }
        for k in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let num = (up - down) / (2.0 * h);
            let a = analytic[id.index()][k];
            let rel = (a - num).abs() / (a.abs() + num.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{}[{k}] analytic {a:e} numeric {num:e}", store.get(id).name);
            }
        }
    }
    Ok(report)
}
