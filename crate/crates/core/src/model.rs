//! Velocity-prediction transformer.
//!
//! Noisy-image patches and context-image patches share one patch embedding
//! and one learned 2-D positional table (initialized to a sin/cos code), so a
//! noisy token and the context token at the same location start from matching
//! positional codes. Context tokens also
//! carry a learned stream marker. The image stream (noisy + context) and the
//! text stream have their own projections in the dual-stream blocks and attend
//! jointly; the single-stream blocks run shared projections over the
//! concatenated `[text, image]` sequence. Every block is modulated (shift,
//! scale, gate) from the timestep embedding. The output head reads the noisy
//! token rows only.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub n_double_blocks: usize,
    pub n_single_blocks: usize,
    pub text_len: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            d_model: 64,
            heads: 4,
            n_double_blocks: 2,
            n_single_blocks: 2,
            text_len: 8,
            mlp_ratio: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 2 != 0 {
            return bad("d_model must be even".into());
        }
        if self.channels == 0 || self.text_len == 0 || self.mlp_ratio == 0 {
            return bad("channels, text_len and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.d_model
    }

    /// Total attention sequence length: noisy + context + text tokens.
    pub fn seq_len(&self) -> usize {
        2 * self.n_patches() + self.text_len
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, self.channels]
    }
}

/// Index map taking an `[S, S, C]` image to `[(S/p)², C·p²]` patch rows:
/// `patches[i] = image[index[i]]`.
pub fn patch_index(size: usize, patch: usize, channels: usize) -> Vec<usize> {
    let grid = size / patch;
    let mut index = Vec::with_capacity(size * size * channels);
    for gy in 0..grid {
        for gx in 0..grid {
            for dy in 0..patch {
                for dx in 0..patch {
                    for c in 0..channels {
                        index.push(((gy * patch + dy) * size + gx * patch + dx) * channels + c);
                    }
                }
            }
        }
    }
    index
}

fn inverse(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (o, &i) in index.iter().enumerate() {
        inv[i] = o;
    }
    inv
}

fn check_image(cfg: &ModelConfig, image: &Tensor) -> Result<()> {
    if image.shape() != cfg.image_shape() {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: image.shape().to_vec(),
            rhs: cfg.image_shape().to_vec(),
        });
    }
    Ok(())
}

/// Lossless rearrangement of an `[S, S, C]` image into patch rows.
pub fn patchify(cfg: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    check_image(cfg, image)?;
    let index = patch_index(cfg.image_size, cfg.patch_size, cfg.channels);
    let data = index.iter().map(|&i| image.data()[i]).collect();
    Tensor::new(vec![cfg.n_patches(), cfg.patch_dim()], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(cfg: &ModelConfig, patches: &Tensor) -> Result<Tensor> {
    let inv = inverse(&patch_index(cfg.image_size, cfg.patch_size, cfg.channels));
    if patches.numel() != inv.len() {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![cfg.n_patches(), cfg.patch_dim()],
        });
    }
    let data = inv.iter().map(|&i| patches.data()[i]).collect();
    Tensor::new(cfg.image_shape().to_vec(), data)
}

/// Initial value of a learned positional table: row codes fill the first
/// half of the channels and column codes the second, so `pos_row + pos_col`
/// is a 2-D sin/cos code with unit amplitude.
fn sincos_table(g: usize, d: usize, offset: usize) -> Tensor {
    let half = d / 2;
    let pairs = (half / 2).max(1) as f64;
    Tensor::from_fn(&[g, d], |i| {
        let (p, j) = (i / d, i % d);
        if j < offset || j >= offset + half {
            return 0.0;
        }
        let k = j - offset;
        let x = p as f64 / 100f64.powf((k / 2) as f64 / pairs);
        if k % 2 == 0 {
            x.sin()
        } else {
            x.cos()
        }
    })
}

/// Sinusoidal features of `t ∈ [0, 1]`: `[cos(1000·t·f_i), sin(1000·t·f_i)]`
/// with `f_i = 10000^(-i/half)`.
pub fn timestep_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    Tensor::new(vec![1, dim], out).expect("feature shape")
}

/// Scaled dot-product attention over `heads` column groups of `q`, `k`, `v`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = tape.shape(q)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidShape {
            shape: tape.shape(q).to_vec(),
            reason: format!("width not divisible into {heads} heads"),
        });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Names of the projection sites inside attention, in model order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectionSite {
    pub name: String,
    /// `q`, `k`, `v` or `o`.
    pub kind: char,
    /// `img`, `txt` or `joint` (single-stream).
    pub stream: &'static str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTransformer {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// Shift/scale/gate rows produced by a modulation layer.
struct Modulation {
    chunks: Vec<Var>,
}

impl Modulation {
    fn shift(&self, i: usize) -> Var {
        self.chunks[3 * i]
    }
    fn scale(&self, i: usize) -> Var {
        self.chunks[3 * i + 1]
    }
    fn gate(&self, i: usize) -> Var {
        self.chunks[3 * i + 2]
    }
}

impl FlowTransformer {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let p = config.patch_dim();
        let h = config.mlp_hidden();
        let g = config.grid();
        let mut params = ParamSet::new();
        let linear = |params: &mut ParamSet, name: &str, out: usize, inp: usize, zero: bool, rng: &mut R| {
            let w = if zero {
                Tensor::zeros(&[out, inp])
            } else {
                Tensor::trunc_normal(&[out, inp], INIT_STD, rng)
            };
            params.insert(format!("{name}.weight"), w);
            params.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
        };
        linear(&mut params, "img_in", d, p, false, rng);
        params.insert("pos_row", sincos_table(g, d, 0));
        params.insert("pos_col", sincos_table(g, d, d / 2));
        params.insert("ctx_marker", Tensor::trunc_normal(&[d], INIT_STD, rng));
        linear(&mut params, "time_in.fc1", d, d, false, rng);
        linear(&mut params, "time_in.fc2", d, d, false, rng);
        for i in 0..config.n_double_blocks {
            for s in ["img", "txt"] {
                let pre = format!("double_blocks.{i}.{s}");
                linear(&mut params, &format!("{pre}_mod"), 6 * d, d, true, rng);
                for proj in ["q", "k", "v", "o"] {
                    linear(&mut params, &format!("{pre}_{proj}"), d, d, false, rng);
                }
                linear(&mut params, &format!("{pre}_mlp.fc1"), h, d, false, rng);
                linear(&mut params, &format!("{pre}_mlp.fc2"), d, h, false, rng);
            }
        }
        for i in 0..config.n_single_blocks {
            let pre = format!("single_blocks.{i}");
            linear(&mut params, &format!("{pre}.mod"), 6 * d, d, true, rng);
            for proj in ["q", "k", "v", "o"] {
                linear(&mut params, &format!("{pre}.{proj}"), d, d, false, rng);
            }
            linear(&mut params, &format!("{pre}.mlp.fc1"), h, d, false, rng);
            linear(&mut params, &format!("{pre}.mlp.fc2"), d, h, false, rng);
        }
        linear(&mut params, "final_mod", 2 * d, d, true, rng);
        linear(&mut params, "head", p, d, true, rng);
        Ok(FlowTransformer { config, params })
    }

    /// Every attention projection site, e.g. `double_blocks.0.img_q`.
    pub fn projection_sites(&self) -> Vec<ProjectionSite> {
        let mut sites = Vec::new();
        for i in 0..self.config.n_double_blocks {
            for stream in ["img", "txt"] {
                for kind in ['q', 'k', 'v', 'o'] {
                    sites.push(ProjectionSite {
                        name: format!("double_blocks.{i}.{stream}_{kind}"),
                        kind,
                        stream,
                    });
                }
            }
        }
        for i in 0..self.config.n_single_blocks {
            for kind in ['q', 'k', 'v', 'o'] {
                sites.push(ProjectionSite {
                    name: format!("single_blocks.{i}.{kind}"),
                    kind,
                    stream: "joint",
                });
            }
        }
        sites
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool, into: &mut Bound) {
        self.params.bind(tape, requires_grad, into);
    }

    fn linear(&self, tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = b.get(&format!("{name}.weight"))?;
        let bias = b.get(&format!("{name}.bias"))?;
        tape.linear(x, w, Some(bias))
    }

    /// Linear projection plus its low-rank branch `scale · B(Ax)` when an
    /// adapter is bound at this site.
    fn projection(&self, tape: &mut Tape, b: &Bound, site: &str, x: Var) -> Result<Var> {
        let y = self.linear(tape, b, site, x)?;
        match b.lora(site) {
            Some(l) => {
                let ax = tape.matmul_nt(x, l.a)?;
                let bax = tape.matmul_nt(ax, l.b)?;
                let delta = tape.scale(bax, l.scale);
                tape.add(y, delta)
            }
            None => Ok(y),
        }
    }

    fn modulation(&self, tape: &mut Tape, b: &Bound, name: &str, cond: Var, groups: usize) -> Result<Modulation> {
        let d = self.config.d_model;
        let m = self.linear(tape, b, name, cond)?;
        let chunks = (0..3 * groups)
            .map(|i| tape.slice_cols(m, i * d, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Modulation { chunks })
    }

    fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = tape.layernorm(x, None, None, LN_EPS)?;
        let s = tape.add_scalar(scale, 1.0);
        let y = tape.mul(n, s)?;
        tape.add(y, shift)
    }

    fn gated_residual(tape: &mut Tape, x: Var, gate: Var, h: Var) -> Result<Var> {
        let g = tape.mul(h, gate)?;
        tape.add(x, g)
    }

    fn mlp(&self, tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, b, &format!("{name}.fc1"), x)?;
        let h = tape.gelu(h);
        self.linear(tape, b, &format!("{name}.fc2"), h)
    }

    fn double_block(
        &self,
        tape: &mut Tape,
        b: &Bound,
        i: usize,
        img: Var,
        txt: Var,
        cond: Var,
    ) -> Result<(Var, Var)> {
        let pre = format!("double_blocks.{i}");
        let n_txt = tape.shape(txt)[0];
        let n_img = tape.shape(img)[0];
        let mut mods = Vec::with_capacity(2);
        let mut qkv = Vec::with_capacity(2);
        for (s, x) in [("txt", txt), ("img", img)] {
            let m = self.modulation(tape, b, &format!("{pre}.{s}_mod"), cond, 2)?;
            let h = Self::modulate(tape, x, m.shift(0), m.scale(0))?;
            let q = self.projection(tape, b, &format!("{pre}.{s}_q"), h)?;
            let k = self.projection(tape, b, &format!("{pre}.{s}_k"), h)?;
            let v = self.projection(tape, b, &format!("{pre}.{s}_v"), h)?;
            mods.push(m);
            qkv.push((q, k, v));
        }
        let q = tape.concat_rows(&[qkv[0].0, qkv[1].0])?;
        let k = tape.concat_rows(&[qkv[0].1, qkv[1].1])?;
        let v = tape.concat_rows(&[qkv[0].2, qkv[1].2])?;
        let attn = attention(tape, q, k, v, self.config.heads)?;
        let parts = [
            tape.slice_rows(attn, 0, n_txt)?,
            tape.slice_rows(attn, n_txt, n_img)?,
        ];
        let mut outs = Vec::with_capacity(2);
        for (idx, (s, x)) in [("txt", txt), ("img", img)].into_iter().enumerate() {
            let m = &mods[idx];
            let o = self.projection(tape, b, &format!("{pre}.{s}_o"), parts[idx])?;
            let x = Self::gated_residual(tape, x, m.gate(0), o)?;
            let h = Self::modulate(tape, x, m.shift(1), m.scale(1))?;
            let h = self.mlp(tape, b, &format!("{pre}.{s}_mlp"), h)?;
            outs.push(Self::gated_residual(tape, x, m.gate(1), h)?);
        }
        Ok((outs[1], outs[0]))
    }

    fn single_block(&self, tape: &mut Tape, b: &Bound, i: usize, x: Var, cond: Var) -> Result<Var> {
        let pre = format!("single_blocks.{i}");
        let m = self.modulation(tape, b, &format!("{pre}.mod"), cond, 2)?;
        let h = Self::modulate(tape, x, m.shift(0), m.scale(0))?;
        let q = self.projection(tape, b, &format!("{pre}.q"), h)?;
        let k = self.projection(tape, b, &format!("{pre}.k"), h)?;
        let v = self.projection(tape, b, &format!("{pre}.v"), h)?;
        let a = attention(tape, q, k, v, self.config.heads)?;
        let o = self.projection(tape, b, &format!("{pre}.o"), a)?;
        let x = Self::gated_residual(tape, x, m.gate(0), o)?;
        let h = Self::modulate(tape, x, m.shift(1), m.scale(1))?;
        let h = self.mlp(tape, b, &format!("{pre}.mlp"), h)?;
        Self::gated_residual(tape, x, m.gate(1), h)
    }

    /// Predicted velocity for noisy image `z_t` at time `t`, conditioned on
    /// the `context` image and `[text_len, d_model]` prompt embeddings.
    /// Images are `[S, S, C]` in the model's working space.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        z_t: &Tensor,
        context: &Tensor,
        text: Var,
        t: f64,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = cfg.n_patches();
        let g = cfg.grid();
        let expected_text = [cfg.text_len, cfg.d_model];
        if tape.shape(text) != expected_text {
            return Err(Error::ShapeMismatch {
                op: "forward(text)",
                lhs: tape.shape(text).to_vec(),
                rhs: expected_text.to_vec(),
            });
        }
        let pz = tape.constant(patchify(cfg, z_t)?);
        let pc = tape.constant(patchify(cfg, context)?);

        let rows: Vec<usize> = (0..n).map(|i| i / g).collect();
        let cols: Vec<usize> = (0..n).map(|i| i % g).collect();
        let pr = tape.gather_rows(b.get("pos_row")?, &rows)?;
        let pcol = tape.gather_rows(b.get("pos_col")?, &cols)?;
        let pos = tape.add(pr, pcol)?;

        let xz = self.linear(tape, b, "img_in", pz)?;
        let xz = tape.add(xz, pos)?;
        let xc = self.linear(tape, b, "img_in", pc)?;
        let xc = tape.add(xc, pos)?;
        let xc = tape.add(xc, b.get("ctx_marker")?)?;
        let mut img = tape.concat_rows(&[xz, xc])?;

        let feats = tape.constant(timestep_features(t, cfg.d_model));
        let temb = self.linear(tape, b, "time_in.fc1", feats)?;
        let temb = tape.silu(temb);
        let temb = self.linear(tape, b, "time_in.fc2", temb)?;
        let cond = tape.silu(temb);

        let mut txt = text;
        for i in 0..cfg.n_double_blocks {
            (img, txt) = self.double_block(tape, b, i, img, txt, cond)?;
        }
        let mut x = tape.concat_rows(&[txt, img])?;
        for i in 0..cfg.n_single_blocks {
            x = self.single_block(tape, b, i, x, cond)?;
        }
        let noisy = tape.slice_rows(x, cfg.text_len, n)?;

        let m = self.modulation_pair(tape, b, cond)?;
        let h = Self::modulate(tape, noisy, m.0, m.1)?;
        let out = self.linear(tape, b, "head", h)?;
        let inv = Arc::new(inverse(&patch_index(cfg.image_size, cfg.patch_size, cfg.channels)));
        tape.permute(out, inv, &cfg.image_shape())
    }

    fn modulation_pair(&self, tape: &mut Tape, b: &Bound, cond: Var) -> Result<(Var, Var)> {
        let d = self.config.d_model;
        let m = self.linear(tape, b, "final_mod", cond)?;
        Ok((tape.slice_cols(m, 0, d)?, tape.slice_cols(m, d, d)?))
    }
}
