// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::{Graph, ParamId, ParamSet, Result, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Lower bound on the denominator of the relative error, so that entries
    /// whose true gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            floor: 1e-5,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn entries_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences `(f(θ+ε) - f(θ-ε)) / 2ε`, for every parameter.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(params: &ParamSet<f64>, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(TensorError::Config(format!("eps must be positive, got {}", opts.eps)));
    }
    let (analytic, used) = {
        let mut g = Graph::new(params);
        let out = f(&mut g)?;
        if !g.scalar(out).is_finite() {
            return Err(TensorError::NonFinite {
                context: "grad_check objective at the unperturbed point".into(),
            });
        }
        let used: Vec<ParamId> = params.ids().filter(|&id| g.uses_param(id)).collect();
        (g.backward(out)?, used)
    };
    let mut work = params.clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for id in used {
        let name = params.get(id).name.clone();
        let numel = params.value(id).numel();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < numel => sample(&mut rng, numel, m).into_vec(),
            _ => (0..numel).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            max_abs_error: 0.0,
            max_rel_error: 0.0,
        };
        for i in entries {
            let orig = work.value(id).data()[i];
            let eval = |delta: f64, work: &mut ParamSet<f64>| -> Result<f64> {
                work.value_mut(id).data_mut()[i] = orig + delta;
                let mut g = Graph::new(work);
                let out = f(&mut g)?;
                let v = g.scalar(out);
                if !v.is_finite() {
                    return Err(TensorError::NonFinite {
                        context: format!("grad_check objective while perturbing `{name}`"),
                    });
                }
                Ok(v)
            };
            let plus = eval(opts.eps, &mut work)?;
            let minus = eval(-opts.eps, &mut work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[i]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            check.checked += 1;
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(rel);
        }
        report.params.push(check);
    }
    Ok(report)
}
