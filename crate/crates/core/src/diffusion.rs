//! Forward corruption, the denoising training objective and ancestral
//! sampling, all driven by the per-timepoint noise schedule.

use crate::data::TrainingInstance;
use crate::denoiser::DenoiserNet;
use crate::noise::NoiseSchedule;
use crate::relations::HeadMaskSet;
use crate::tensor::{Adam, Rng, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;

/// Everything the denoiser is conditioned on for one window.
#[derive(Clone)]
pub struct ConditioningBundle {
    /// (N * P, L + horizon) with future positions zeroed.
    pub history: Tensor,
    /// Length L + horizon; nonzero marks future positions.
    pub future_mask: Vec<u8>,
    /// Start of the window on the schedule's time axis.
    pub t_offset: usize,
    pub head_masks: Option<HeadMaskSet>,
}

impl ConditioningBundle {
    pub fn from_instance(
        instance: &TrainingInstance,
        head_masks: Option<HeadMaskSet>,
    ) -> Result<ConditioningBundle> {
        let lp = instance.target_len();
        let history = Tensor::from_vec(vec![instance.n * instance.p, lp], instance.masked_target())?;
        Ok(ConditioningBundle {
            history,
            future_mask: instance.future_mask.clone(),
            t_offset: instance.start,
            head_masks,
        })
    }

    fn check(&self) -> Result<()> {
        let lp = self.future_mask.len();
        if self.history.shape()[1] != lp {
            return Err(TensorError::Contract {
                op: "conditioning_bundle",
                reason: format!(
                    "history has {} columns but the future mask covers {lp}",
                    self.history.shape()[1]
                ),
            });
        }
        let data = self.history.data();
        let rows = self.history.shape()[0];
        for (t, m) in self.future_mask.iter().enumerate() {
            if *m == 0 {
                continue;
            }
            for r in 0..rows {
                if data[r * lp + t] != 0.0 {
                    return Err(TensorError::Contract {
                        op: "conditioning_bundle",
                        reason: format!("history is nonzero at masked future position t={t}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Abstracts the noise predictor so the objective can be exercised with
/// stand-ins in tests.
pub trait DenoiserModel {
    fn predict_noise(
        &self,
        x_k: &Tensor,
        history: &Tensor,
        k: usize,
        masks: Option<&HeadMaskSet>,
    ) -> Result<Tensor>;
}

impl DenoiserModel for DenoiserNet {
    fn predict_noise(
        &self,
        x_k: &Tensor,
        history: &Tensor,
        k: usize,
        masks: Option<&HeadMaskSet>,
    ) -> Result<Tensor> {
        self.forward_with_masks(x_k, history, k, masks)
    }
}

/// Corrupts `x0` (rows x lp, row-major) to step `k` in closed form:
/// sqrt(abar) * x0 + sqrt(1 - abar) * eps, with abar taken per timepoint.
pub fn forward_diffuse(
    x0: &[f64],
    rows: usize,
    k: usize,
    schedule: &NoiseSchedule,
    t_offset: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    let lp = x0.len() / rows;
    if x0.len() != rows * lp || eps.len() != x0.len() {
        return Err(TensorError::Contract {
            op: "forward_diffuse",
            reason: format!("x0 len {} and eps len {} do not match", x0.len(), eps.len()),
        });
    }
    if t_offset + lp > schedule.t {
        return Err(TensorError::Contract {
            op: "forward_diffuse",
            reason: format!(
                "window [{t_offset}, {}) runs past the schedule's {} timepoints",
                t_offset + lp,
                schedule.t
            ),
        });
    }
    let mut out = vec![0.0; x0.len()];
    for r in 0..rows {
        for c in 0..lp {
            let ab = schedule.alpha_bar_at(k, t_offset + c);
            let i = r * lp + c;
            out[i] = ab.sqrt() * x0[i] + (1.0 - ab).sqrt() * eps[i];
        }
    }
    Ok(out)
}

/// The denoising objective for a fixed step and noise draw: mean squared
/// error between predicted and injected noise, optionally weighted per
/// timepoint.
pub fn training_loss_given(
    net: &dyn DenoiserModel,
    instance: &TrainingInstance,
    bundle: &ConditioningBundle,
    schedule: &NoiseSchedule,
    k: usize,
    eps: &[f64],
    weights: Option<&[f64]>,
) -> Result<Tensor> {
    bundle.check()?;
    let rows = instance.n * instance.p;
    let lp = instance.target_len();
    let x_k = forward_diffuse(&instance.target, rows, k, schedule, bundle.t_offset, eps)?;
    let x_k = Tensor::from_vec(vec![rows, lp], x_k)?;
    let eps_t = Tensor::from_vec(vec![rows, lp], eps.to_vec())?;
    let pred = net.predict_noise(&x_k, &bundle.history, k, bundle.head_masks.as_ref())?;
    let diff = pred.sub(&eps_t)?;
    let sq = diff.mul(&diff)?;
    match weights {
        None => sq.mean_all(),
        Some(w) => {
            if w.len() != lp {
                return Err(TensorError::Contract {
                    op: "training_loss",
                    reason: format!("{} weights for {lp} timepoints", w.len()),
                });
            }
            let mut grid = vec![0.0; rows * lp];
            for r in 0..rows {
                grid[r * lp..(r + 1) * lp].copy_from_slice(w);
            }
            let total: f64 = grid.iter().sum();
            let wt = Tensor::from_vec(vec![rows, lp], grid)?;
            sq.mul(&wt)?.sum_all()?.scale(1.0 / total)
        }
    }
}

pub struct StepOutcome {
    pub loss: f64,
    pub k: usize,
}

/// One optimisation step: draw a uniform diffusion step and a noise sample,
/// backpropagate the objective, apply the optimiser.
pub fn training_step(
    net: &DenoiserNet,
    opt: &mut Adam,
    instance: &TrainingInstance,
    bundle: &ConditioningBundle,
    schedule: &NoiseSchedule,
    weights: Option<&[f64]>,
    rng: &mut Rng,
) -> Result<StepOutcome> {
    let k = rng.diffusion_step(schedule.k);
    let mut eps = vec![0.0; instance.target.len()];
    rng.fill_normal(&mut eps);
    let loss = training_loss_given(net, instance, bundle, schedule, k, &eps, weights)?;
    let loss_val = loss.item();
    if !loss_val.is_finite() {
        return Err(TensorError::Contract {
            op: "training_step",
            reason: format!("loss became non-finite at k={k} (t_offset={})", bundle.t_offset),
        });
    }
    opt.zero_grad(net.named_params());
    loss.backward()?;
    opt.step(net.named_params());
    Ok(StepOutcome { loss: loss_val, k })
}

/// Ancestral sampling from pure noise down to a clean window. Consumes the
/// generator in a fixed order: the initial draw fills the whole buffer
/// row-major, then one full buffer per step from K down to 2.
pub fn sample(
    net: &dyn DenoiserModel,
    bundle: &ConditioningBundle,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    bundle.check()?;
    let rows = bundle.history.shape()[0];
    let lp = bundle.future_mask.len();
    if bundle.t_offset + lp > schedule.t {
        return Err(TensorError::Contract {
            op: "sample",
            reason: "window runs past the schedule".into(),
        });
    }
    let mut x = vec![0.0; rows * lp];
    rng.fill_normal(&mut x);
    let mut z = vec![0.0; rows * lp];
    for k in (1..=schedule.k).rev() {
        let xt = Tensor::from_vec(vec![rows, lp], x.clone())?;
        let eps_hat = net
            .predict_noise(&xt, &bundle.history, k, bundle.head_masks.as_ref())?
            .data();
        if k > 1 {
            rng.fill_normal(&mut z);
        }
        for r in 0..rows {
            for c in 0..lp {
                let t = bundle.t_offset + c;
                let beta = schedule.beta_at(k, t);
                let ab = schedule.alpha_bar_at(k, t);
                let i = r * lp + c;
                let mean = (x[i] - beta / (1.0 - ab).sqrt() * eps_hat[i]) / (1.0 - beta).sqrt();
                x[i] = if k > 1 {
                    let ab_prev = schedule.alpha_bar_at(k - 1, t);
                    let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
                    mean + var.sqrt() * z[i]
                } else {
                    mean
                };
                if !x[i].is_finite() {
                    return Err(TensorError::NonFinite { op: "sample" });
                }
            }
        }
    }
    Ok(x)
}

/// Draws `count` independent trajectories.
pub fn sample_many(
    net: &dyn DenoiserModel,
    bundle: &ConditioningBundle,
    schedule: &NoiseSchedule,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    (0..count).map(|_| sample(net, bundle, schedule, rng)).collect()
}

/// Per-element median across sample trajectories.
pub fn point_forecast(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = samples.first() else {
        return Err(TensorError::Contract {
            op: "point_forecast",
            reason: "no samples".into(),
        });
    };
    let len = first.len();
    let mut out = vec![0.0; len];
    let mut col = vec![0.0; samples.len()];
    for i in 0..len {
        for (s, sample) in samples.iter().enumerate() {
            col[s] = sample[i];
        }
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = col.len();
        out[i] = if m % 2 == 1 {
            col[m / 2]
        } else {
            0.5 * (col[m / 2 - 1] + col[m / 2])
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
