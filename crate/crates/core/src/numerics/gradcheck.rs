//! Central finite differences over a [`ParamStore`], independent of `backward`.

use crate::numerics::{Grads, ParamId, ParamStore};

/// Worst elementwise disagreement between two gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with an absolute floor so exact-zero gradients compare sanely.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// `(f(θ + h e_i) − f(θ − h e_i)) / 2h` for every scalar in `store`.
pub fn numeric_grads<F>(store: &ParamStore, h: f64, mut loss: F) -> Grads
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut probe = store.clone();
    let mut out = Grads::zeros_like(store);
    for id in store.ids() {
        for i in 0..store.get(id).len() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            out.get_mut(id)[i] = (up - down) / (2.0 * h);
        }
    }
    out
}

pub fn compare(store: &ParamStore, analytic: &Grads, numeric: &Grads, floor: f64) -> GradCheckReport {
    let mut rep = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in store.ids() {
        let (a, n) = (analytic.get(id), numeric.get(id));
        for i in 0..a.len() {
            rep.checked += 1;
            let e = relative_error(a[i], n[i], floor);
            if e > rep.max_rel_err || rep.worst_param.is_empty() {
                rep.max_rel_err = e;
                rep.worst_param = store.name(ParamId(id.0)).to_string();
                rep.worst_index = i;
                rep.analytic = a[i];
                rep.numeric = n[i];
            }
        }
    }
    rep
}
