//! Central finite-difference checks of tape gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences for every entry of every parameter in `store` (or a strided
/// subset of at most `max_entries` entries per tensor).
pub fn check_gradients<F>(store: &mut ParamStore, eps: f64, max_entries: usize, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic: Vec<(ParamId, ndarray::Array2<f64>)> = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        let grads = g.backward(out);
        grads.params().map(|(id, m)| (id, m.clone())).collect()
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        g.scalar(out)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let zeros = ndarray::Array2::zeros(store.get(id).dim());
        let grad = analytic
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, m)| m)
            .unwrap_or(&zeros)
            .clone();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let cols = store.get(id).ncols();
        for k in (0..n).step_by(stride) {
            let ix = [k / cols, k % cols];
            let orig = store.get(id)[ix];
            store.get_mut(id)[ix] = orig + eps;
            let plus = eval(store);
            store.get_mut(id)[ix] = orig - eps;
            let minus = eval(store);
            store.get_mut(id)[ix] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[ix];
            let err = relative_error(a, numeric, 1e-6);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k, a, numeric));
            }
        }
    }
    report
}
