//! Pixel metrics (PSNR, SSIM) and distribution distances (Fréchet, RBF MMD)
//! over a frozen random convolutional feature extractor.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::write_file;
use crate::degrade::{PairRecord, Task};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, tag};
use crate::sampler::{Pipeline, SampleConfig};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const FEATURE_DIM: usize = 64;
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed;

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = a.zip_map(b, |x, y| (x - y) * (x - y))?.mean();
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn grayscale(img: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    if img.rank() != 3 {
        return Err(Error::InvalidImage(format!("expected [H, W, C], got {:?}", img.shape())));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let g = img
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().sum::<f64>() / c as f64)
        .collect();
    Ok((h, w, g))
}

/// Mean SSIM over every 8×8 window (stride 1) of the channel-mean images,
/// with population window statistics.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (h, w, ga) = grayscale(a)?;
    let (_, _, gb) = grayscale(b)?;
    let win = SSIM_WINDOW.min(h).min(w);
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + win {
                for x in x0..x0 + win {
                    let (p, q) = (ga[y * w + x], gb[y * w + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Three stride-2 3×3 convolutions (3→16→32→64 channels, zero padding,
/// tanh) followed by a global mean pool. Weights are drawn once from the
/// seed and never change.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub seed: u64,
    layers: Vec<ConvLayer>,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    c_in: usize,
    c_out: usize,
    /// `[c_out, 3, 3, c_in]`
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    fn forward(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; oh * ow * self.c_out];
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..self.c_out {
                    let mut acc = self.bias[co];
                    for ky in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = &x[(iy as usize * w + ix as usize) * self.c_in..][..self.c_in];
                            let wt = &self.weight[((co * 3 + ky) * 3 + kx) * self.c_in..][..self.c_in];
                            acc += src.iter().zip(wt).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    out[(oy * ow + ox) * self.c_out + co] = acc.tanh();
                }
            }
        }
        (out, oh, ow)
    }
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_for(seed, &[tag::EXTRACTOR]);
        let layers = [(3, 16), (16, 32), (32, FEATURE_DIM)]
            .into_iter()
            .map(|(c_in, c_out)| {
                let std = 1.0 / ((9 * c_in) as f64).sqrt();
                ConvLayer {
                    c_in,
                    c_out,
                    weight: Tensor::randn(&[c_out * 9 * c_in], std, &mut rng).into_data(),
                    bias: Tensor::randn(&[c_out], 0.1, &mut rng).into_data(),
                }
            })
            .collect();
        FeatureExtractor { seed, layers }
    }

    pub fn dim(&self) -> usize {
        FEATURE_DIM
    }

    /// Feature vector of an `[H, W, 3]` image in `[0, 1]`.
    pub fn extract(&self, img: &Tensor) -> Result<Vec<f64>> {
        if img.rank() != 3 || img.shape()[2] != 3 {
            return Err(Error::InvalidImage(format!("expected [H, W, 3], got {:?}", img.shape())));
        }
        let (mut h, mut w) = (img.shape()[0], img.shape()[1]);
        let mut x: Vec<f64> = img.data().iter().map(|v| 2.0 * v - 1.0).collect();
        for layer in &self.layers {
            (x, h, w) = layer.forward(&x, h, w);
        }
        let mut feat = vec![0.0; FEATURE_DIM];
        for px in x.chunks_exact(FEATURE_DIM) {
            for (f, v) in feat.iter_mut().zip(px) {
                *f += v;
            }
        }
        let n = (h * w) as f64;
        feat.iter_mut().for_each(|f| *f /= n);
        Ok(feat)
    }

    pub fn extract_all(&self, imgs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        imgs.par_iter().map(|i| self.extract(i)).collect()
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_EXTRACTOR_SEED)
    }
}

fn as_matrix(feats: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = feats.len();
    let d = feats.first().map_or(0, Vec::len);
    if n == 0 || d == 0 || feats.iter().any(|f| f.len() != d) {
        return Err(Error::InvalidShape {
            shape: vec![n, d],
            reason: "feature sets must be non-empty with equal dimensions".into(),
        });
    }
    Ok(DMatrix::from_fn(n, d, |i, j| feats[i][j]))
}

/// Sample mean and unbiased covariance of the rows.
pub fn moments(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let x = as_matrix(feats)?;
    let n = x.nrows();
    let mu = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n as f64);
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.transpose() * &centered / denom;
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})` from given moments. The trace
/// of the square root comes from the eigenvalues of the symmetric matrix
/// `Σa^{1/2} Σb Σa^{1/2}`, with negative eigenvalues clipped to zero.
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::ShapeMismatch {
            op: "frechet_distance",
            lhs: vec![d, cov_a.nrows(), cov_a.ncols()],
            rhs: vec![mu_b.len(), cov_b.nrows(), cov_b.ncols()],
        });
    }
    let root_a = psd_sqrt(cov_a);
    let inner = &root_a * cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = (mu_a - mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0))
}

pub fn frechet_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = moments(feats_a)?;
    let (mb, cb) = moments(feats_b)?;
    frechet_from_moments(&ma, &ca, &mb, &cb)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the pooled sets, or 1 when all
/// points coincide.
pub fn median_bandwidth(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = feats_a.iter().chain(feats_b).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    d.retain(|&x| x > 0.0);
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

fn mean_kernel(x: &[Vec<f64>], y: &[Vec<f64>], gamma: f64) -> f64 {
    let mut acc = 0.0;
    for a in x {
        for b in y {
            acc += (-gamma * sq_dist(a, b)).exp();
        }
    }
    acc / (x.len() * y.len()) as f64
}

/// Biased (V-statistic) MMD² with kernel `exp(−‖x−y‖²/(2·bw²))`.
pub fn mmd_rbf(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    as_matrix(feats_a)?;
    as_matrix(feats_b)?;
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let v = mean_kernel(feats_a, feats_a, gamma) + mean_kernel(feats_b, feats_b, gamma)
        - 2.0 * mean_kernel(feats_a, feats_b, gamma);
    Ok(v.max(0.0))
}

/// One report line: a task, optionally restricted to one noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub config: String,
    pub task: Task,
    pub sigma: Option<f64>,
    pub n: usize,
    pub fid: f64,
    pub mmd: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub bandwidth: f64,
}

pub const REPORT_HEADER: &str = "config,task,sigma,n,fid,mmd,psnr,ssim";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    extractor_seed: u64,
    feature_dim: usize,
    extractor: &'static str,
    fid_sqrt: &'static str,
    mmd_estimator: &'static str,
    mmd_bandwidth_rule: &'static str,
    ssim: &'static str,
    psnr_cap_db: f64,
    bandwidths: Vec<(&'a str, String, String, f64)>,
}

impl MetricReport {
    pub fn extend(&mut self, rows: impl IntoIterator<Item = MetricRow>) {
        self.rows.extend(rows);
    }

    pub fn row(&self, config: &str, task: Task, sigma: Option<f64>) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.config == config && r.task == task && r.sigma == sigma)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let sigma = r.sigma.map_or("all".to_string(), |s| s.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.4},{:.4}",
                r.config, r.task, sigma, r.n, r.fid, r.mmd, r.psnr, r.ssim
            );
        }
        out
    }

    pub fn sidecar_json(&self, extractor_seed: u64) -> String {
        let side = Sidecar {
            extractor_seed,
            feature_dim: FEATURE_DIM,
            extractor: "3x conv3x3 stride 2 (3-16-32-64), tanh, global mean pool",
            fid_sqrt: "eigendecomposition of sqrt(Sa) Sb sqrt(Sa), negative eigenvalues clipped",
            mmd_estimator: "biased V-statistic",
            mmd_bandwidth_rule: "median pairwise distance of pooled features",
            ssim: "8x8 sliding window, stride 1, channel-mean grayscale, C1=0.01^2, C2=0.03^2",
            psnr_cap_db: PSNR_CAP,
            bandwidths: self
                .rows
                .iter()
                .map(|r| {
                    (
                        r.config.as_str(),
                        r.task.to_string(),
                        r.sigma.map_or("all".into(), |s| s.to_string()),
                        r.bandwidth,
                    )
                })
                .collect(),
        };
        serde_json::to_string_pretty(&side).expect("sidecar serializes")
    }

    /// Writes the CSV and a `.json` sidecar next to it.
    pub fn write(&self, path: &Path, extractor_seed: u64) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())?;
        write_file(&path.with_extension("json"), self.sidecar_json(extractor_seed).as_bytes())
    }
}

/// An output image scored against its ground truth.
#[derive(Clone, Debug)]
pub struct Scored<'a> {
    pub task: Task,
    pub sigma: Option<f64>,
    pub clean: &'a Tensor,
    pub output: &'a Tensor,
}

fn score_group(config: &str, task: Task, sigma: Option<f64>, items: &[&Scored], fx: &FeatureExtractor) -> Result<MetricRow> {
    let clean: Vec<Tensor> = items.iter().map(|s| s.clean.clone()).collect();
    let out: Vec<Tensor> = items.iter().map(|s| s.output.clone()).collect();
    let fc = fx.extract_all(&clean)?;
    let fo = fx.extract_all(&out)?;
    let bandwidth = median_bandwidth(&fo, &fc);
    let n = items.len() as f64;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for s in items {
        psnr_sum += psnr(s.output, s.clean)?;
        ssim_sum += ssim(s.output, s.clean)?;
    }
    Ok(MetricRow {
        config: config.to_string(),
        task,
        sigma,
        n: items.len(),
        fid: frechet_distance(&fo, &fc)?,
        mmd: mmd_rbf(&fo, &fc, bandwidth)?,
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        bandwidth,
    })
}

/// One row per task present, plus one per noise level for the noise task.
pub fn score(config: &str, items: &[Scored], fx: &FeatureExtractor) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for task in Task::ALL {
        let group: Vec<&Scored> = items.iter().filter(|s| s.task == task).collect();
        if group.is_empty() {
            continue;
        }
        rows.push(score_group(config, task, None, &group, fx)?);
        if task == Task::Noise {
            let mut sigmas: Vec<f64> = group.iter().filter_map(|s| s.sigma).collect();
            sigmas.sort_by(f64::total_cmp);
            sigmas.dedup();
            for sigma in sigmas {
                let sub: Vec<&Scored> = group.iter().copied().filter(|s| s.sigma == Some(sigma)).collect();
                rows.push(score_group(config, task, Some(sigma), &sub, fx)?);
            }
        }
    }
    Ok(rows)
}

/// Scores arbitrary outputs aligned with `records`.
pub fn score_outputs(config: &str, records: &[PairRecord], outputs: &[Tensor], fx: &FeatureExtractor) -> Result<Vec<MetricRow>> {
    if records.len() != outputs.len() {
        return Err(Error::InvalidShape {
            shape: vec![records.len(), outputs.len()],
            reason: "one output per record".into(),
        });
    }
    let items: Vec<Scored> = records
        .iter()
        .zip(outputs)
        .map(|(r, o)| Scored {
            task: r.task,
            sigma: r.spec.sigma(),
            clean: &r.clean,
            output: o,
        })
        .collect();
    score(config, &items, fx)
}

/// The no-restoration floor: degraded inputs scored against ground truth.
pub fn degraded_floor(config: &str, records: &[PairRecord], fx: &FeatureExtractor) -> Result<Vec<MetricRow>> {
    let outs: Vec<Tensor> = records.iter().map(|r| r.degraded.clone()).collect();
    score_outputs(config, records, &outs, fx)
}

/// How evaluation drives the sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    /// Restore with the null prompt instead of each record's prompt.
    pub prompt_free: bool,
    pub extractor_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = SampleConfig::default();
        EvalConfig {
            steps: s.steps,
            guidance: s.guidance,
            seed: 0,
            prompt_free: false,
            extractor_seed: DEFAULT_EXTRACTOR_SEED,
        }
    }
}

/// Restores every record, each with its own derived sampling seed.
pub fn restore_all(pipeline: &Pipeline, records: &[PairRecord], cfg: &EvalConfig) -> Result<Vec<Tensor>> {
    let pipeline = pipeline.merged()?;
    records
        .par_iter()
        .map(|r| {
            let sc = SampleConfig {
                steps: cfg.steps,
                guidance: cfg.guidance,
                seed: derive_seed(cfg.seed, &[r.source_id]),
                prompt: if cfg.prompt_free { String::new() } else { r.prompt.clone() },
            };
            pipeline.restore(&r.degraded, &sc)
        })
        .collect()
}

/// Restores and scores an evaluation split.
pub fn evaluate(config: &str, pipeline: &Pipeline, records: &[PairRecord], cfg: &EvalConfig) -> Result<Vec<MetricRow>> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("evaluation split is empty".into()));
    }
    let outs = restore_all(pipeline, records, cfg)?;
    score_outputs(config, records, &outs, &FeatureExtractor::new(cfg.extractor_seed))
}
