use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Parameters with more entries than this are checked on a seeded sample.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_coords_per_param: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares analytic gradients from `f` with central differences.
///
/// `f` evaluates the loss at the store's current values and returns the
/// parameter gradients. The relative error of one coordinate is
/// `|a − n| / max(1, |a|, |n|)`. Every perturbed entry is restored bit-exact.
pub fn grad_check<S, F>(
    store: &mut S,
    params: &[String],
    opts: &GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    S: ParamSet,
    F: FnMut(&S) -> Result<(f64, Gradients)>,
{
    let (_, analytic) = f(store)?;
    grad_check_against(store, params, opts, &analytic, |s| f(s).map(|(loss, _)| loss))
}

/// Like [`grad_check`] with precomputed analytic gradients and a
/// forward-only `loss` for the finite differences.
pub fn grad_check_against<S, L>(
    store: &mut S,
    params: &[String],
    opts: &GradCheckOptions,
    analytic: &Gradients,
    mut loss: L,
) -> Result<GradCheckReport>
where
    S: ParamSet,
    L: FnMut(&S) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for name in params {
        let numel = store.param(name)?.tensor.numel();
        let grad = analytic
            .get(name)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for `{name}`")))?;
        let coords: Vec<usize> = if numel <= opts.max_coords_per_param {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let original = store.param(name)?.tensor.data()[i];
            store.param_mut(name)?.tensor.data_mut()[i] = original + opts.epsilon;
            let plus = loss(store)?;
            store.param_mut(name)?.tensor.data_mut()[i] = original - opts.epsilon;
            let minus = loss(store)?;
            store.param_mut(name)?.tensor.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = grad[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst_param = Some(name.clone());
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
