use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::{AutodiffError, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, for every element of every parameter in `store`.
///
/// Relative error per element is `|a - cd| / (|a| + |cd| + 1e-12)`.
pub fn grad_check<F>(f: F, store: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_with(f, store, eps, None)
}

/// Like [`grad_check`], but checks at most `per_param` evenly spaced
/// elements of each parameter.
pub fn grad_check_with<F>(
    f: F,
    store: &ParamStore,
    eps: f64,
    per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        scalar_of(&g, out)
    };
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    let analytic = g.backward(out)?.params();

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let n = store.get(&name).map(|t| t.numel()).unwrap_or(0);
        let step = match per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for i in (0..n).step_by(step) {
            let orig = store.get(&name).expect("present").data()[i];
            work.get_mut(&name).expect("present").data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig;
            let cd = (plus - minus) / (2.0 * eps);
            // parameters the output never touched have zero analytic gradient
            let a = analytic.get(&name).map(|t| t.data()[i]).unwrap_or(0.0);
            let rel = (a - cd).abs() / (a.abs() + cd.abs() + 1e-12);
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(AutodiffError::NonScalarOutput(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}
