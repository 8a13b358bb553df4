use super::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many (evenly spaced) entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_entries_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `f` against central finite differences
/// `(f(p + eps) - f(p - eps)) / 2 eps` for every non-frozen parameter in
/// `store`. `f` must be deterministic and build its loss on the given graph.
pub fn gradcheck<F>(store: &mut ParamStore, cfg: &GradcheckConfig, mut f: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let ids: Vec<ParamId> = store.ids().filter(|&id| !store.get(id).frozen).collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| match grads.param(id) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; store.get(id).tensor.len()],
        })
        .collect();
    drop(g);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, store)?;
        Ok(g.value(l).item())
    };

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        passed: true,
    };
    for (&id, an) in ids.iter().zip(&analytic) {
        let n = an.len();
        let picks: Vec<usize> = match cfg.max_entries_per_param {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + cfg.eps;
            let plus = eval(store);
            store.get_mut(id).tensor.data_mut()[i] = orig - cfg.eps;
            let minus = eval(store);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.eps);
            let a = an[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((store.get(id).name.clone(), i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_err <= cfg.tol;
    Ok(report)
}
