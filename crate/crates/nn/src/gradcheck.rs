//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use crate::graph::Gradients;
use crate::params::ParamSet;
use crate::rng::stream;
use crate::{NnError, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step, must lie in `[1e-6, 1e-3]`.
    pub h: f64,
    /// Check at most this many randomly chosen entries of each tensor.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, max_entries_per_tensor: None, seed: 0, abs_floor: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    /// Worst relative error per parameter tensor, in parameter order.
    pub per_param: Vec<(String, f64)>,
}

/// Compares the gradients returned by `f` against central differences of its
/// loss, for every tensor in `params`.
///
/// `f` must be deterministic; it is evaluated twice at the unperturbed point
/// and a mismatch (for example from active dropout) is rejected.
pub fn grad_check<F>(mut f: F, params: &ParamSet, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(f64, Gradients)>,
{
    if !(1e-6..=1e-3).contains(&opts.h) {
        return Err(NnError::Invalid(format!("step h={} outside [1e-6, 1e-3]", opts.h)));
    }
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(NnError::NonFinite("grad_check loss"));
    }
    let (again, _) = f(params)?;
    if again.to_bits() != loss.to_bits() {
        return Err(NnError::NonDeterministic { first: loss, second: again });
    }
    let mut rng = stream(opts.seed, "grad_check", 0);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
        per_param: Vec::with_capacity(params.len()),
    };
    for i in 0..params.len() {
        let n = params.tensor(i).numel();
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(k) if k < n => {
                let mut e = sample(&mut rng, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut worst_here: f64 = 0.0;
        for e in entries {
            let orig = params.tensor(i).data()[e];
            probe.tensor_mut(i).data_mut()[e] = orig + opts.h;
            let (plus, _) = f(&probe)?;
            probe.tensor_mut(i).data_mut()[e] = orig - opts.h;
            let (minus, _) = f(&probe)?;
            probe.tensor_mut(i).data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NnError::NonFinite("grad_check loss"));
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[i].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            report.entries_checked += 1;
            worst_here = worst_here.max(rel);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.param(i).name.clone(), e));
            }
        }
        report.per_param.push((params.param(i).name.clone(), worst_here));
    }
    Ok(report)
}
