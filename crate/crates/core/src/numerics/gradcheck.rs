use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;

use super::params::{Gradients, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Entries sampled per tensor; tensors at most this large are checked exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences on a sampled subset
/// of every parameter tensor.
///
/// `loss_fn` evaluates the scalar loss for the given parameters and, when handed
/// an accumulator, also runs the backward pass into it.
pub fn grad_check<F>(params: &ParamStore<f64>, mut loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, Option<&mut Gradients<f64>>) -> Result<f64>,
{
    let mut grads = Gradients::for_store(params);
    loss_fn(params, Some(&mut grads))?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        tolerance: opts.tolerance,
        max_rel_error: 0.0,
        worst: None,
    };
    for (id, name, tensor) in params.iter() {
        let indices: Vec<usize> = if tensor.len() <= opts.samples_per_tensor {
            (0..tensor.len()).collect()
        } else {
            let mut v = sample(&mut rng, tensor.len(), opts.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for idx in indices {
            let orig = tensor.data()[idx];
            probe.get_mut(id).data_mut()[idx] = orig + opts.epsilon;
            let plus = loss_fn(&probe, None)?;
            probe.get_mut(id).data_mut()[idx] = orig - opts.epsilon;
            let minus = loss_fn(&probe, None)?;
            probe.get_mut(id).data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[idx]);
            let rel = relative_error(analytic, numeric);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(GradCheckEntry {
                    param: name.to_string(),
                    index: idx,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
