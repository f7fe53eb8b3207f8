//! Central-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::diff::graph::{Graph, Var};
use crate::diff::params::{ParamId, ParameterStore};
use crate::error::Result;
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub step: f64,
    pub tol: f64,
    /// Relative error is `|a - n| / max(|a|, |n|, abs_floor)`.
    pub abs_floor: f64,
    /// Check a seeded random subset of entries per parameter (all when `None`).
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
    /// Test hook: add 1.0 to the analytic gradient of parameters whose name
    /// starts with this prefix.
    pub corrupt: Option<String>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-3,
            abs_floor: 1e-6,
            max_entries_per_param: None,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose perturbation changed a recorded selection.
    pub skipped_ties: usize,
    pub max_rel_err: f64,
    /// Largest |analytic| seen, so dead parameters are visible.
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    pub params: Vec<ParamCheck>,
    /// Two evaluations at the same point disagreed.
    pub nondeterministic: bool,
    /// Frozen parameters that nevertheless received a gradient.
    pub frozen_with_grad: Vec<String>,
    pub tol: f64,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err >= self.tol).collect()
    }

    pub fn passed(&self) -> bool {
        !self.nondeterministic && self.frozen_with_grad.is_empty() && self.failures().is_empty()
    }

    /// Max relative error grouped by the first path segment of each name.
    pub fn by_module(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            let module = p.name.split('.').next().unwrap_or(&p.name).to_owned();
            let e = out.entry(module).or_insert(0.0f64);
            *e = e.max(p.max_rel_err);
        }
        out
    }
}

struct Probe {
    value: f64,
    decisions: Vec<usize>,
}

fn probe<T, F>(store: &ParameterStore<T>, f: &mut F) -> Result<Probe>
where
    T: Scalar,
    F: FnMut(&ParameterStore<T>, &mut Graph<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    Ok(Probe {
        value: g.item(loss).f64(),
        decisions: g.decisions().to_vec(),
    })
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences, parameter by parameter.
///
/// `f` must rebuild the loss from the store it is given; it is called many
/// times with one entry perturbed.
pub fn finite_diff_check<T, F>(
    store: &mut ParameterStore<T>,
    mut f: F,
    opts: &FdOptions,
) -> Result<FdReport>
where
    T: Scalar,
    F: FnMut(&ParameterStore<T>, &mut Graph<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    g.backward(loss)?;
    let base = Probe {
        value: g.item(loss).f64(),
        decisions: g.decisions().to_vec(),
    };

    let mut analytic: BTreeMap<ParamId, Matrix<T>> = BTreeMap::new();
    for (id, grad) in g.param_grads() {
        match analytic.get_mut(&id) {
            Some(acc) => acc.add_assign(grad),
            None => {
                analytic.insert(id, grad.clone());
            }
        }
    }

    let again = probe(store, &mut f)?;
    let mut report = FdReport {
        nondeterministic: again.value.to_bits() != base.value.to_bits()
            || again.decisions != base.decisions,
        tol: opts.tol,
        ..FdReport::default()
    };

    let mut rng = seeded(opts.seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let (name, trainable, len) = {
            let p = store.get(id);
            (p.name.clone(), p.trainable, p.value.len())
        };
        if !trainable {
            if analytic.contains_key(&id) {
                report.frozen_with_grad.push(name);
            }
            continue;
        }
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(cap) if cap < len => {
                let mut e = sample(&mut rng, len, cap).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..len).collect(),
        };
        let corrupt = opts
            .corrupt
            .as_deref()
            .is_some_and(|prefix| name.starts_with(prefix));
        let mut check = ParamCheck {
            name,
            checked: 0,
            skipped_ties: 0,
            max_rel_err: 0.0,
            max_abs_grad: 0.0,
        };
        for k in entries {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = T::of(orig.f64() + opts.step);
            let plus = probe(store, &mut f);
            store.get_mut(id).value.data_mut()[k] = T::of(orig.f64() - opts.step);
            let minus = probe(store, &mut f);
            store.get_mut(id).value.data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            if plus.decisions != base.decisions || minus.decisions != base.decisions {
                check.skipped_ties += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * opts.step);
            let mut a = analytic.get(&id).map_or(0.0, |m| m.data()[k].f64());
            if corrupt {
                a += 1.0;
            }
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            check.max_rel_err = check.max_rel_err.max((a - numeric).abs() / denom);
            check.max_abs_grad = check.max_abs_grad.max(a.abs());
            check.checked += 1;
        }
        report.params.push(check);
    }
    Ok(report)
}
