//! Guided Euler sampling from pure noise, conditioned on a degraded image.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{from_model_space, to_model_space};
use crate::lora::LoraAdapter;
use crate::model::FlowTransformer;
use crate::params::Bound;
use crate::rng::{rng_for, tag};
use crate::tensor::{Tape, Tensor};
use crate::text::TextEmbedder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    /// Empty means the unconditional (all-null) prompt.
    pub prompt: String,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 28,
            guidance: 2.5,
            seed: 0,
            prompt: String::new(),
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("sampling needs at least one step".into()));
        }
        if !(self.guidance >= 0.0) || !self.guidance.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "guidance must be finite and non-negative, got {}",
                self.guidance
            )));
        }
        Ok(())
    }
}

/// Integrates `dz/dt = v(z, t)` from `t = 1` to `t = 0` on the uniform grid
/// `t_k = k/N`, `k = N..1`.
pub fn euler(z: Tensor, steps: usize, mut v: impl FnMut(&Tensor, f64) -> Result<Tensor>) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidConfig("sampling needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z;
    for k in (1..=steps).rev() {
        let t = k as f64 / steps as f64;
        let vel = v(&z, t)?;
        if !vel.is_finite() {
            return Err(Error::NonFinite(format!(
                "velocity at step {} of {steps} (t = {t})",
                steps - k + 1
            )));
        }
        z = z.zip_map(&vel, |zi, vi| zi - dt * vi)?;
    }
    Ok(z)
}

/// `v_uncond + g·(v_cond − v_uncond)`.
pub fn combine_guidance(v_cond: &Tensor, v_uncond: &Tensor, g: f64) -> Result<Tensor> {
    v_cond.zip_map(v_uncond, |c, u| u + g * (c - u))
}

/// A model, its prompt embedder, and optionally an adapter to apply.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub model: FlowTransformer,
    pub text: TextEmbedder,
    pub adapter: Option<LoraAdapter>,
}

impl Pipeline {
    pub fn new(model: FlowTransformer, text: TextEmbedder, adapter: Option<LoraAdapter>) -> Result<Self> {
        if let Some(a) = &adapter {
            a.check_compatible(&model)?;
        }
        Ok(Pipeline { model, text, adapter })
    }

    /// Same outputs with the adapter folded into the base weights.
    pub fn merged(&self) -> Result<Pipeline> {
        let model = match &self.adapter {
            Some(a) => a.merged(&self.model)?,
            None => self.model.clone(),
        };
        Ok(Pipeline {
            model,
            text: self.text.clone(),
            adapter: None,
        })
    }

    /// Velocity for one token sequence, outside any training graph.
    pub fn velocity(&self, z: &Tensor, context: &Tensor, ids: &[usize], t: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut bound = Bound::new();
        self.model.bind(&mut tape, false, &mut bound);
        self.text.params.bind(&mut tape, false, &mut bound);
        if let Some(a) = &self.adapter {
            a.bind(&mut tape, false, &mut bound);
        }
        let txt = self.text.embed(&mut tape, &bound, ids)?;
        let v = self.model.forward(&mut tape, &bound, z, context, txt, t)?;
        Ok(tape.value(v).clone())
    }

    /// Classifier-free guided velocity. The unconditional pass uses the
    /// null prompt with the same context. `g = 0` and `g = 1` run only the
    /// pass they select.
    pub fn guided_velocity(&self, z: &Tensor, context: &Tensor, ids: &[usize], t: f64, g: f64) -> Result<Tensor> {
        let null = self.text.vocab.null_prompt();
        if g == 1.0 || ids == null.as_slice() {
            return self.velocity(z, context, ids, t);
        }
        let v_uncond = self.velocity(z, context, &null, t)?;
        if g == 0.0 {
            return Ok(v_uncond);
        }
        let v_cond = self.velocity(z, context, ids, t)?;
        combine_guidance(&v_cond, &v_uncond, g)
    }

    /// Restores an `[H, W, 3]` image in `[0, 1]` of any size.
    pub fn restore(&self, degraded: &Tensor, cfg: &SampleConfig) -> Result<Tensor> {
        cfg.validate()?;
        if degraded.rank() != 3 || degraded.shape()[2] != 3 {
            return Err(Error::InvalidImage(format!("expected [H, W, 3], got {:?}", degraded.shape())));
        }
        let (h, w) = (degraded.shape()[0], degraded.shape()[1]);
        let s = self.model.config.image_size;
        let ids = self.text.vocab.tokenize(&cfg.prompt)?;
        let context = to_model_space(&resize(degraded, s, s)?);
        let mut rng: ChaCha8Rng = rng_for(cfg.seed, &[tag::SAMPLE]);
        let eps = Tensor::randn(&self.model.config.image_shape(), 1.0, &mut rng);
        let z = euler(eps, cfg.steps, |z, t| {
            self.guided_velocity(z, &context, &ids, t, cfg.guidance)
        })?;
        resize(&from_model_space(&z), h, w)
    }
}

/// Separable bilinear resize of an `[H, W, C]` image, half-pixel centres
/// (align-corners = false) with edge clamping.
pub fn resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if img.rank() != 3 {
        return Err(Error::InvalidImage(format!("expected [H, W, C], got {:?}", img.shape())));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidImage("resize extents must be positive".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let d = img.data();
    let at = |y: usize, x: usize, ch: usize| d[(y * w + x) * c + ch];
    Ok(Tensor::from_fn(&[out_h, out_w, c], |i| {
        let ch = i % c;
        let (y0, y1, fy) = ty[i / c / out_w];
        let (x0, x1, fx) = tx[(i / c) % out_w];
        let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
        let bot = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
        top * (1.0 - fy) + bot * fy
    }))
}
