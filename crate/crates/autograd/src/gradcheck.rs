//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Perturbation step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Entries probed per parameter; `None` probes every entry. The entry
    /// with the largest analytic gradient is always included.
    pub max_entries: Option<usize>,
    /// Lower bound on the denominator of the relative error, so entries whose
    /// true gradient is zero are judged on absolute error at this scale.
    pub abs_floor: f64,
    /// Additional floor as a fraction of the parameter's largest analytic
    /// gradient magnitude. Entries far below the tensor's gradient scale are
    /// dominated by round-off in the differenced loss.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_entries: None,
            abs_floor: 1e-6,
            scale_floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst entry with its analytic and numeric values.
    pub worst: (usize, f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub tol: f64,
    pub entries: Vec<ParamReport>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tol)
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamReport> {
        self.entries.iter().filter(|e| e.max_rel_err >= self.tol)
    }

    /// Aligned plain-text table, one row per parameter.
    pub fn table(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(9);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>8}  {:>12}  {:>12}  {:>12}  status\n",
            "parameter", "numel", "checked", "max_rel_err", "analytic", "numeric"
        );
        for e in &self.entries {
            let status = if e.max_rel_err < self.tol { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{:<width$}  {:>8}  {:>8}  {:>12.3e}  {:>12.4e}  {:>12.4e}  {status}\n",
                e.name, e.numel, e.checked, e.max_rel_err, e.worst.1, e.worst.2
            ));
        }
        out
    }
}

/// Relative error with a floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    Ok(tape.scalar(loss))
}

/// Compares analytic gradients of the scalar `f` with central differences
/// `(f(p+h) - f(p-h)) / 2h` for every trainable parameter. Frozen
/// parameters are not reported. Parameter values are restored exactly.
pub fn finite_difference_check<F>(store: &mut ParamStore, f: F, opts: &CheckOptions) -> Result<CheckReport>
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var>,
{
    if opts.h <= 0.0 {
        return Err(config_err("finite_difference_check", "h must be positive"));
    }
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let grads = tape.backward(loss)?;
        for (id, g) in grads.param_grads() {
            let slot = analytic[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
            slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();
    for id in store.trainable_ids() {
        let numel = store.get(id).tensor.numel();
        let grad = analytic[id.index()].take().unwrap_or_else(|| vec![0.0; numel]);
        let probe = probe_indices(&grad, opts.max_entries, &mut rng);
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let floor = opts.abs_floor.max(opts.scale_floor * gmax);
        let mut worst = (0, 0.0, 0.0);
        let mut max_rel_err: f64 = 0.0;
        for &i in &probe {
            let numeric = central_difference(store, id, i, opts.h, &f)?;
            let err = relative_error(grad[i], numeric, floor);
            if err > max_rel_err || probe.len() == 1 {
                max_rel_err = max_rel_err.max(err);
                worst = (i, grad[i], numeric);
            }
        }
        entries.push(ParamReport {
            name: store.get(id).name.clone(),
            numel,
            checked: probe.len(),
            max_rel_err,
            worst,
        });
    }
    Ok(CheckReport {
        tol: opts.tol,
        entries,
    })
}

fn probe_indices(grad: &[f64], max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = grad.len();
    match max {
        Some(k) if k < n => {
            let argmax = (0..n)
                .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                .unwrap_or(0);
            let mut picks: Vec<usize> = sample(rng, n, k).into_iter().collect();
            if !picks.contains(&argmax) {
                picks[0] = argmax;
            }
            picks.sort_unstable();
            picks
        }
        _ => (0..n).collect(),
    }
}

fn central_difference<F>(store: &mut ParamStore, id: ParamId, i: usize, h: f64, f: &F) -> Result<f64>
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var>,
{
    let orig = store.get(id).tensor.data()[i];
    store.get_mut(id).tensor.data_mut()[i] = orig + h;
    let plus = eval(store, f);
    store.get_mut(id).tensor.data_mut()[i] = orig - h;
    let minus = eval(store, f);
    store.get_mut(id).tensor.data_mut()[i] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}
