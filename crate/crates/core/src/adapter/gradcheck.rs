//! Central finite-difference verification of [`super::backward`].

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backward::{backward, Gradients};
use super::forward::{forward, loss, Mode};
use super::params::AdapterModel;
use crate::error::Result;
use crate::par::{self, Exec};
use crate::windowing::WindowSample;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub per_tensor: Option<usize>,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, per_tensor: None, seed: 0, exec: Exec::default() }
    }
}

fn eval_loss(model: &AdapterModel, batch: &[WindowSample]) -> Result<f64> {
    let trace = forward(model, batch, Mode::Eval, Exec::Sequential)?;
    loss(&trace, batch)
}

/// Denominator floor. Central differences at `eps = 1e-5` carry roughly
/// `1e-16 * |loss| / eps` of rounding noise, so gradients much below this
/// floor cannot be resolved to a relative 1e-4.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`
/// over the sampled coordinates, with `grads` as the analytic side.
pub fn check_gradients(
    model: &AdapterModel,
    batch: &[WindowSample],
    grads: &Gradients,
    opts: &GradCheckOptions,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords = Vec::new();
    for (t, (_, _, vals)) in model.params().tensors().into_iter().enumerate() {
        match opts.per_tensor {
            Some(k) if k < vals.len() => {
                let mut picked = sample_indices(&mut rng, vals.len(), k).into_vec();
                picked.sort_unstable();
                coords.extend(picked.into_iter().map(|i| (t, i)));
            }
            _ => coords.extend((0..vals.len()).map(|i| (t, i))),
        }
    }
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, _, v)| v.to_vec()).collect();

    let errors = par::try_map(opts.exec, &coords, |&(t, i)| -> Result<f64> {
        let mut probe = model.clone();
        let base = probe.params().tensors()[t].2[i];
        probe.params_mut().tensors_mut()[t][i] = base + opts.eps;
        let up = eval_loss(&probe, batch)?;
        probe.params_mut().tensors_mut()[t][i] = base - opts.eps;
        let down = eval_loss(&probe, batch)?;
        let numeric = (up - down) / (2.0 * opts.eps);
        let a = analytic[t][i];
        Ok((a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR))
    })?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}

/// Analytic gradients from an eval-mode pass, checked against finite
/// differences. All arithmetic is `f64`.
pub fn grad_check(model: &AdapterModel, batch: &[WindowSample], opts: &GradCheckOptions) -> Result<f64> {
    let trace = forward(model, batch, Mode::Eval, opts.exec)?;
    let grads = backward(model, &trace, batch, opts.exec)?;
    check_gradients(model, batch, &grads, opts)
}
