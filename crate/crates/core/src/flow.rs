//! Rectified-flow objective: the linear path `z_t = (1 − t)·z + t·ε`, the
//! velocity target `ε − z`, logit-normal timesteps and the MSE loss.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimestepSampler {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for TimestepSampler {
    fn default() -> Self {
        TimestepSampler { mu: 0.0, sigma: 1.0 }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl TimestepSampler {
    /// `sigmoid(n)` with `n ~ N(μ, σ²)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let n: f64 = rng.sample(StandardNormal);
        sigmoid(self.mu + self.sigma * n)
    }
}

pub fn sample_timesteps<R: Rng + ?Sized>(n: usize, sampler: &TimestepSampler, rng: &mut R) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one timestep".into()));
    }
    Ok((0..n).map(|_| sampler.sample(rng)).collect())
}

/// `(1 − t)·z_clean + t·ε`.
pub fn interpolate(z_clean: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    z_clean.zip_map(eps, |z, e| (1.0 - t) * z + t * e)
}

/// `ε − z_clean`.
pub fn velocity_target(z_clean: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.zip_map(z_clean, |e, z| e - z)
}

/// One training example on the flow path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub z_clean: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub z_t: Tensor,
    pub v_target: Tensor,
}

impl FlowSample {
    pub fn new(z_clean: Tensor, eps: Tensor, t: f64) -> Result<Self> {
        if !z_clean.is_finite() {
            return Err(Error::NonFinite("z_clean".into()));
        }
        let z_t = interpolate(&z_clean, &eps, t)?;
        let v_target = velocity_target(&z_clean, &eps)?;
        Ok(FlowSample {
            z_clean,
            eps,
            t,
            z_t,
            v_target,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub samples: Vec<FlowSample>,
}

/// Independent `t` and `ε` per sample.
pub fn make_batch<R: Rng + ?Sized>(
    z_clean: &[Tensor],
    sampler: &TimestepSampler,
    rng: &mut R,
) -> Result<FlowBatch> {
    let samples = z_clean
        .iter()
        .map(|z| {
            let t = sampler.sample(rng);
            let eps = Tensor::randn(z.shape(), 1.0, rng);
            FlowSample::new(z.clone(), eps, t)
        })
        .collect::<Result<_>>()?;
    Ok(FlowBatch { samples })
}

/// Mean squared error between a predicted velocity and a fixed target.
pub fn flow_loss(tape: &mut Tape, v_pred: Var, v_target: &Tensor) -> Result<Var> {
    let target = tape.constant(v_target.clone());
    let diff = tape.sub(v_pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.zip_map(b, |x, y| (x - y) * (x - y))?.mean())
}
