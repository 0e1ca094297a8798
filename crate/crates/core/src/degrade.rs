//! Procedural clean images, synthetic degradations and few-shot paired sets.
//!
//! Images are `[H, W, 3]` tensors with values in `[0, 1]`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, tag};
use crate::tensor::Tensor;
use crate::text::prompt_for;

/// Noise levels on the 0–255 scale used for the denoising task.
pub const NOISE_SIGMAS: [f64; 3] = [15.0, 25.0, 50.0];

/// Per-task pair counts of the few-shot grid.
pub const SWEEP_PAIR_COUNTS: [usize; 4] = [16, 32, 64, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Noise,
    Rain,
    Haze,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Noise, Task::Rain, Task::Haze];

    pub fn name(self) -> &'static str {
        match self {
            Task::Noise => "noise",
            Task::Rain => "rain",
            Task::Haze => "haze",
        }
    }

    pub fn prompt(self) -> String {
        prompt_for(self.name())
    }

    pub fn index(self) -> u64 {
        match self {
            Task::Noise => 0,
            Task::Rain => 1,
            Task::Haze => 2,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Task::Noise),
            "rain" => Ok(Task::Rain),
            "haze" => Ok(Task::Haze),
            _ => Err(Error::InvalidConfig(format!(
                "unknown task {s:?}; expected one of noise, rain, haze"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainParams {
    pub streaks: usize,
    /// Streak length in pixels.
    pub length: f64,
    /// Global streak angle in degrees from the +x axis.
    pub angle_deg: f64,
    /// Per-streak angle jitter bound in degrees.
    pub jitter_deg: f64,
    pub intensity: f64,
}

/// One corruption, including the seed of its random realization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DegradationSpec {
    Noise {
        /// Standard deviation on the 0–255 scale.
        sigma: f64,
        seed: u64,
    },
    Rain {
        #[serde(flatten)]
        params: RainParams,
        seed: u64,
    },
    Haze {
        beta: f64,
        airlight: f64,
        depth_seed: u64,
    },
}

impl DegradationSpec {
    pub fn task(&self) -> Task {
        match self {
            DegradationSpec::Noise { .. } => Task::Noise,
            DegradationSpec::Rain { .. } => Task::Rain,
            DegradationSpec::Haze { .. } => Task::Haze,
        }
    }

    pub fn sigma(&self) -> Option<f64> {
        match self {
            DegradationSpec::Noise { sigma, .. } => Some(*sigma),
            _ => None,
        }
    }

    /// Draws parameters for `task`. Noise uses `sigma` when given.
    pub fn sample<R: Rng + ?Sized>(task: Task, sigma: Option<f64>, rng: &mut R) -> Self {
        match task {
            Task::Noise => DegradationSpec::Noise {
                sigma: sigma.unwrap_or_else(|| NOISE_SIGMAS[rng.random_range(0..3)]),
                seed: rng.random(),
            },
            Task::Rain => DegradationSpec::Rain {
                params: RainParams {
                    streaks: rng.random_range(12..=28),
                    length: rng.random_range(5.0..12.0),
                    angle_deg: rng.random_range(70.0..110.0),
                    jitter_deg: 5.0,
                    intensity: rng.random_range(0.4..0.8),
                },
                seed: rng.random(),
            },
            Task::Haze => DegradationSpec::Haze {
                beta: rng.random_range(0.3..0.9),
                airlight: rng.random_range(0.7..1.0),
                depth_seed: rng.random(),
            },
        }
    }

    pub fn apply(&self, clean: &Tensor) -> Result<Tensor> {
        check_image(clean)?;
        Ok(match self {
            DegradationSpec::Noise { sigma, seed } => {
                degrade_noise(clean, *sigma, &mut rng_for(*seed, &[]))
            }
            DegradationSpec::Rain { params, seed } => {
                degrade_rain(clean, params, &mut rng_for(*seed, &[]))
            }
            DegradationSpec::Haze {
                beta,
                airlight,
                depth_seed,
            } => {
                let (h, w) = (clean.shape()[0], clean.shape()[1]);
                let depth = depth_map(h, w, &mut rng_for(*depth_seed, &[]));
                degrade_haze(clean, *beta, *airlight, &depth)?
            }
        })
    }
}

fn check_image(img: &Tensor) -> Result<()> {
    if img.rank() != 3 || img.shape()[2] != 3 {
        return Err(Error::InvalidImage(format!(
            "expected [H, W, 3], got {:?}",
            img.shape()
        )));
    }
    Ok(())
}

/// Adds `N(0, (σ/255)²)` per value and clamps to `[0, 1]`.
pub fn degrade_noise<R: Rng + ?Sized>(clean: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    let s = sigma / 255.0;
    clean.map(|x| {
        let n: f64 = rng.sample(StandardNormal);
        (x + s * n).clamp(0.0, 1.0)
    })
}

/// Atmospheric scattering: `I = J·τ + A·(1 − τ)` with `τ = exp(−β·depth)`.
/// `depth` is `[H, W]`.
pub fn degrade_haze(clean: &Tensor, beta: f64, airlight: f64, depth: &Tensor) -> Result<Tensor> {
    let (h, w) = (clean.shape()[0], clean.shape()[1]);
    if depth.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "degrade_haze",
            lhs: clean.shape().to_vec(),
            rhs: depth.shape().to_vec(),
        });
    }
    if depth.data().iter().any(|&d| d < 0.0) {
        return Err(Error::InvalidConfig("haze depth must be non-negative".into()));
    }
    let c = clean.shape()[2];
    Ok(Tensor::from_fn(clean.shape(), |i| {
        let tau = (-beta * depth.data()[i / c]).exp();
        (clean.data()[i] * tau + airlight * (1.0 - tau)).clamp(0.0, 1.0)
    }))
}

/// Smooth positive depth field in `[0, 3]`: a vertical ramp plus a few
/// broad Gaussian bumps, min-max normalized.
pub fn depth_map<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor {
    let ramp = rng.random_range(0.5..1.5);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.15..0.5),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let mut field = Tensor::from_fn(&[h, w], |i| {
        let y = (i / w) as f64 / h.max(2) as f64;
        let x = (i % w) as f64 / w.max(2) as f64;
        let mut v = ramp * (1.0 - y);
        for &(cx, cy, s, a) in &bumps {
            let r2 = (x - cx).powi(2) + (y - cy).powi(2);
            v += a * (-r2 / (2.0 * s * s)).exp();
        }
        v
    });
    let lo = field.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    field.data_mut().iter_mut().for_each(|v| *v = 3.0 * (*v - lo) / span);
    field
}

/// Bright streaks screen-blended over the image. Each streak is a segment
/// at the global angle plus jitter whose brightness falls off as a Gaussian
/// along its axis.
pub fn degrade_rain<R: Rng + ?Sized>(clean: &Tensor, p: &RainParams, rng: &mut R) -> Tensor {
    let (h, w) = (clean.shape()[0], clean.shape()[1]);
    let mut layer = vec![0.0; h * w];
    let step = 0.25;
    for _ in 0..p.streaks {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let jitter = if p.jitter_deg > 0.0 {
            rng.random_range(-p.jitter_deg..=p.jitter_deg)
        } else {
            0.0
        };
        let theta = (p.angle_deg + jitter).to_radians();
        let (dx, dy) = (theta.cos(), theta.sin());
        let sd = (p.length / 4.0).max(0.25);
        let n = (p.length / step).ceil() as i64;
        for k in -n / 2..=n / 2 {
            let s = k as f64 * step;
            let weight = step * p.intensity * (-s * s / (2.0 * sd * sd)).exp();
            splat(&mut layer, h, w, cx + s * dx, cy + s * dy, weight);
        }
    }
    let c = clean.shape()[2];
    Tensor::from_fn(clean.shape(), |i| {
        let l = layer[i / c].min(1.0);
        let x = clean.data()[i];
        (x + l * (1.0 - x)).clamp(0.0, 1.0)
    })
}

fn splat(layer: &mut [f64], h: usize, w: usize, x: f64, y: f64, weight: f64) {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (px, py) = (x0 as i64 + ox, y0 as i64 + oy);
            if px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h {
                layer[py as usize * w + px as usize] += weight * wx * wy;
            }
        }
    }
}

fn smoothstep(edge: f64, x: f64) -> f64 {
    // 1 inside, 0 outside, linear over one pixel around the edge
    (0.5 - (x - edge)).clamp(0.0, 1.0)
}

/// Procedural clean image: a two-colour linear gradient, one to three
/// anti-aliased discs or rectangles, and a faint smooth texture.
pub fn clean_image<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor {
    let colour = |rng: &mut R| -> [f64; 3] { std::array::from_fn(|_| rng.random_range(0.05..0.95)) };
    let c0 = colour(rng);
    let c1 = colour(rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ux, uy) = (angle.cos(), angle.sin());

    enum Shape {
        Disc { cx: f64, cy: f64, r: f64 },
        Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    }
    let s = size as f64;
    let shapes: Vec<(Shape, [f64; 3])> = (0..rng.random_range(1..=3))
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                Shape::Disc {
                    cx: rng.random_range(0.1..0.9) * s,
                    cy: rng.random_range(0.1..0.9) * s,
                    r: rng.random_range(0.1..0.3) * s,
                }
            } else {
                let (x0, y0) = (rng.random_range(0.0..0.7) * s, rng.random_range(0.0..0.7) * s);
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.random_range(0.15..0.4) * s,
                    y1: y0 + rng.random_range(0.15..0.4) * s,
                }
            };
            (shape, colour(rng))
        })
        .collect();

    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.01..0.03),
            )
        })
        .collect();

    Tensor::from_fn(&[size, size, 3], |i| {
        let c = i % 3;
        let px = (i / 3) % size;
        let py = i / 3 / size;
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        let proj = ((x / s - 0.5) * ux + (y / s - 0.5) * uy) / std::f64::consts::SQRT_2 + 0.5;
        let mut v = c0[c] + (c1[c] - c0[c]) * proj.clamp(0.0, 1.0);
        for (shape, col) in &shapes {
            let cover = match *shape {
                Shape::Disc { cx, cy, r } => {
                    smoothstep(r, ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
                }
                Shape::Rect { x0, y0, x1, y1 } => {
                    let dx = (x0 - x).max(x - x1);
                    let dy = (y0 - y).max(y - y1);
                    smoothstep(0.0, dx.max(dy))
                }
            };
            v = v * (1.0 - cover) + col[c] * cover;
        }
        for &(fx, fy, phase, amp) in &waves {
            v += amp * (std::f64::consts::TAU * (fx * x / s + fy * y / s) + phase).sin();
        }
        v.clamp(0.0, 1.0)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    /// Generic corpus for pre-training the base model, disjoint from both.
    Pretrain,
}

impl Split {
    fn clean_tag(self) -> u64 {
        match self {
            Split::Train => tag::CLEAN_TRAIN,
            Split::Eval => tag::CLEAN_EVAL,
            Split::Pretrain => tag::CLEAN_PRETRAIN,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub clean: Tensor,
    pub degraded: Tensor,
    pub prompt: String,
    pub task: Task,
    pub spec: DegradationSpec,
    /// Seed of the clean image; equal ids mean the same clean source.
    pub source_id: u64,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedDataset {
    pub records: Vec<PairRecord>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, task: Task) -> usize {
        self.records.iter().filter(|r| r.task == task).count()
    }

    pub fn filter(&self, pred: impl Fn(&PairRecord) -> bool) -> PairedDataset {
        PairedDataset {
            records: self.records.iter().filter(|r| pred(r)).cloned().collect(),
        }
    }

    pub fn split(&self, split: Split) -> PairedDataset {
        self.filter(|r| r.split == split)
    }

    pub fn tasks(&self) -> Vec<Task> {
        let mut t: Vec<Task> = self.records.iter().map(|r| r.task).collect();
        t.sort();
        t.dedup();
        t
    }

    pub fn source_ids(&self) -> HashSet<u64> {
        self.records.iter().map(|r| r.source_id).collect()
    }
}

/// Whether a per-task count is one of the few-shot grid values.
pub fn is_sweep_count(n: usize) -> bool {
    SWEEP_PAIR_COUNTS.contains(&n)
}

/// `n_per_task` pairs for each task, records shuffled. Noise levels cycle
/// through [`NOISE_SIGMAS`] so their counts differ by at most one.
pub fn build_split(
    n_per_task: usize,
    tasks: &[Task],
    seed: u64,
    size: usize,
    split: Split,
) -> Result<PairedDataset> {
    let mut records = Vec::with_capacity(n_per_task * tasks.len());
    for &task in tasks {
        for i in 0..n_per_task {
            let source_id = derive_seed(seed, &[split.clean_tag(), task.index(), i as u64]);
            let clean = clean_image(size, &mut rng_for(source_id, &[]));
            let mut drng = rng_for(source_id, &[tag::DEGRADE]);
            let sigma = (task == Task::Noise).then(|| NOISE_SIGMAS[i % NOISE_SIGMAS.len()]);
            let spec = DegradationSpec::sample(task, sigma, &mut drng);
            let degraded = spec.apply(&clean)?;
            records.push(PairRecord {
                clean,
                degraded,
                prompt: task.prompt(),
                task,
                spec,
                source_id,
                split,
            });
        }
    }
    let mut srng = rng_for(seed, &[tag::SHUFFLE, split.clean_tag()]);
    records.shuffle(&mut srng);
    Ok(PairedDataset { records })
}

/// Training split of `n_per_task` pairs per task.
pub fn build_dataset(n_per_task: usize, tasks: &[Task], seed: u64, size: usize) -> Result<PairedDataset> {
    build_split(n_per_task, tasks, seed, size, Split::Train)
}
