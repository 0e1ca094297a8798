//! Training loop: with-replacement batches from the few-shot pool, prompt
//! dropout, flow-matching loss, global-norm clipping and two-group AdamW
//! (adapter or transformer group, prompt-embedder group), with checkpoints
//! that resume bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{encode, read_file, write_file, Decoded};
use crate::degrade::{PairedDataset, Task};
use crate::error::{Error, Result};
use crate::flow::{flow_loss, FlowSample, TimestepSampler};
use crate::image::to_model_space;
use crate::lora::{inject, LoraAdapter, LoraFactors, LoraSpec, SiteFilter, TaskTag};
use crate::model::{FlowTransformer, ModelConfig};
use crate::params::{Bound, ParamSet};
use crate::rng::{rng_for, tag};
use crate::tensor::{Tape, Tensor};
use crate::text::{PromptVocab, TextEmbedder};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"E2RC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Unified,
    PerTask,
}

/// What the transformer-side optimizer group holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Low-rank factors only; base weights frozen.
    Lora,
    /// Every transformer weight (used to pre-train a base model).
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_lora: f64,
    pub lr_text: f64,
    pub wd_lora: f64,
    pub wd_text: f64,
    pub warmup_steps: usize,
    pub rank: usize,
    /// Defaults to `rank`, giving unit scale.
    pub alpha: Option<f64>,
    pub sites: SiteFilter,
    pub regime: Regime,
    /// Required for the per-task regime.
    pub task: Option<Task>,
    pub text_encoder_trainable: bool,
    pub prompt_dropout: f64,
    pub timesteps: TimestepSampler,
    pub clip_norm: f64,
    pub checkpoint_every: usize,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1920,
            batch_size: 4,
            lr_lora: 1e-4,
            lr_text: 5e-6,
            wd_lora: 1e-4,
            wd_text: 1e-3,
            warmup_steps: 500,
            rank: 64,
            alpha: None,
            sites: SiteFilter::default(),
            regime: Regime::Unified,
            task: None,
            text_encoder_trainable: false,
            prompt_dropout: 0.10,
            timesteps: TimestepSampler::default(),
            clip_norm: 1.0,
            checkpoint_every: 100,
            mode: TrainMode::Lora,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch_size must be positive".into());
        }
        if self.warmup_steps > self.iterations {
            return bad(format!(
                "warmup_steps {} exceeds iterations {}",
                self.warmup_steps, self.iterations
            ));
        }
        for (name, v) in [("lr_lora", self.lr_lora), ("lr_text", self.lr_text)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("wd_lora", self.wd_lora), ("wd_text", self.wd_text)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return bad(format!("prompt_dropout must be in [0, 1], got {}", self.prompt_dropout));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        if self.mode == TrainMode::Lora && self.rank == 0 {
            return bad("rank must be positive".into());
        }
        if self.regime == Regime::PerTask && self.task.is_none() {
            return bad("the per-task regime needs a task".into());
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    pub fn task_tag(&self) -> TaskTag {
        match (self.regime, self.task) {
            (Regime::PerTask, Some(t)) => t.into(),
            _ => TaskTag::Unified,
        }
    }
}

/// Linear warmup to `base_lr` over `warmup` steps, then constant.
pub fn lr_at(step: usize, warmup: usize, base_lr: f64) -> f64 {
    if warmup == 0 || step >= warmup {
        base_lr
    } else {
        base_lr * step as f64 / warmup as f64
    }
}

/// First and second moment buffers for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

impl Moments {
    pub fn zeros(shape: &[usize]) -> Self {
        Moments {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }
}

/// One AdamW update at 1-based `step`: decoupled decay `θ ← θ·(1 − lr·wd)`
/// first, then the bias-corrected Adam step.
pub fn adamw_step(param: &mut Tensor, grad: &Tensor, state: &mut Moments, step: usize, lr: f64, wd: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    let decay = 1.0 - lr * wd;
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *p *= decay;
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr_lora: f64,
    pub lr_text: f64,
    pub clipped: bool,
}

pub const LOG_HEADER: &str = "iteration,loss,lr_lora,lr_text,clipped";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration, r.loss, r.lr_lora, r.lr_text, r.clipped as u8
        );
    }
    out
}

struct PoolItem {
    clean: Tensor,
    context: Tensor,
    ids: Vec<usize>,
    source_id: u64,
    task: Task,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: FlowTransformer,
    pub text: TextEmbedder,
    pub adapter: Option<LoraAdapter>,
    pub moments: IndexMap<String, Moments>,
    /// Completed iterations.
    pub iteration: usize,
    pub log: Vec<LogRow>,
    pool: Vec<PoolItem>,
}

impl Trainer {
    /// Prepares a run. In LoRA mode a fresh adapter is injected from the
    /// run seed; the base transformer is never modified.
    pub fn new(model: FlowTransformer, mut text: TextEmbedder, data: &PairedDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        text.trainable = config.text_encoder_trainable;
        let adapter = match config.mode {
            TrainMode::Lora => {
                let spec = LoraSpec {
                    rank: config.rank,
                    alpha: config.alpha(),
                    sites: config.sites.clone(),
                };
                let mut rng = rng_for(config.seed, &[tag::INIT]);
                Some(inject(&model, &spec, config.task_tag(), &mut rng)?)
            }
            TrainMode::Full => None,
        };
        Self::assemble(config, model, text, adapter, IndexMap::new(), 0, Vec::new(), data)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        model: FlowTransformer,
        text: TextEmbedder,
        adapter: Option<LoraAdapter>,
        moments: IndexMap<String, Moments>,
        iteration: usize,
        log: Vec<LogRow>,
        data: &PairedDataset,
    ) -> Result<Self> {
        let s = model.config.image_size;
        let pool = data
            .records
            .iter()
            .filter(|r| config.regime == Regime::Unified || Some(r.task) == config.task)
            .map(|r| {
                if r.clean.shape() != [s, s, 3] || r.degraded.shape() != [s, s, 3] {
                    return Err(Error::InvalidImage(format!(
                        "training pairs must be {s}x{s}x3, got {:?}",
                        r.clean.shape()
                    )));
                }
                Ok(PoolItem {
                    clean: to_model_space(&r.clean),
                    context: to_model_space(&r.degraded),
                    ids: text.vocab.tokenize(&r.prompt)?,
                    source_id: r.source_id,
                    task: r.task,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if pool.is_empty() {
            return Err(Error::InvalidConfig(match config.task {
                Some(t) if config.regime == Regime::PerTask => format!("dataset has no {t} records"),
                _ => "dataset is empty".into(),
            }));
        }
        let mut trainer = Trainer {
            config,
            model,
            text,
            adapter,
            moments,
            iteration,
            log,
            pool,
        };
        if trainer.moments.is_empty() {
            trainer.moments = trainer
                .trainable()
                .into_iter()
                .map(|(n, shape)| (n, Moments::zeros(&shape)))
                .collect();
        }
        Ok(trainer)
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    /// Iteration accounting for the log header.
    pub fn summary(&self) -> String {
        let per_epoch = self.pool.len() as f64 / self.config.batch_size as f64;
        let mut tasks: Vec<Task> = self.pool.iter().map(|p| p.task).collect();
        tasks.sort_by_key(|t| t.index());
        tasks.dedup();
        format!(
            "records: {}, batch size: {}, iterations per epoch: {}, epochs: {:.1}, iterations per task: {:.0}, text-embedder: {}",
            self.pool.len(),
            self.config.batch_size,
            per_epoch,
            self.config.iterations as f64 / per_epoch,
            self.config.iterations as f64 / tasks.len() as f64,
            if self.text.trainable { "trainable" } else { "frozen" }
        )
    }

    /// Names and shapes of the trainable tensors, in update order.
    fn trainable(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = match &self.adapter {
            Some(a) => a
                .named_factors()
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec()))
                .collect(),
            None => self
                .model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect(),
        };
        if self.text.trainable {
            out.extend(self.text.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())));
        }
        out
    }

    fn is_text(name: &str) -> bool {
        name.starts_with("text.")
    }

    /// Runs one iteration and returns its log row.
    pub fn step(&mut self) -> Result<LogRow> {
        let it = self.iteration + 1;
        let cfg = &self.config;
        let mut rng = rng_for(cfg.seed, &[tag::ITERATION, it as u64]);
        let names = self.trainable();
        let mut grads: Vec<Tensor> = names.iter().map(|(_, s)| Tensor::zeros(s)).collect();
        let null = self.text.vocab.null_prompt();
        let inv_b = 1.0 / cfg.batch_size as f64;
        let mut loss_sum = 0.0;
        let mut manifest = Vec::with_capacity(cfg.batch_size);
        let full = cfg.mode == TrainMode::Full;

        for _ in 0..cfg.batch_size {
            let item = &self.pool[rng.random_range(0..self.pool.len())];
            let dropped = rng.random::<f64>() < cfg.prompt_dropout;
            let t = cfg.timesteps.sample(&mut rng);
            let eps = Tensor::randn(item.clean.shape(), 1.0, &mut rng);
            let sample = FlowSample::new(item.clean.clone(), eps, t)?;
            manifest.push(format!("source {} t={t:.4}", item.source_id));

            let mut tape = Tape::new();
            let mut bound = Bound::new();
            self.model.bind(&mut tape, full, &mut bound);
            self.text.bind(&mut tape, &mut bound);
            if let Some(a) = &self.adapter {
                a.bind(&mut tape, true, &mut bound);
            }
            let ids = if dropped { &null } else { &item.ids };
            let txt = self.text.embed(&mut tape, &bound, ids)?;
            let v = self.model.forward(&mut tape, &bound, &sample.z_t, &item.context, txt, t)?;
            let loss = flow_loss(&mut tape, v, &sample.v_target)?;
            loss_sum += tape.value(loss).data()[0];
            let scaled = tape.scale(loss, inv_b);
            tape.backward(scaled)?;
            for ((name, _), g) in names.iter().zip(grads.iter_mut()) {
                if let Some(d) = tape.grad(bound.get(name)?) {
                    for (a, b) in g.data_mut().iter_mut().zip(d.data()) {
                        *a += b;
                    }
                }
            }
        }
        let loss = loss_sum * inv_b;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss at iteration {it} (batch: {})",
                manifest.join("; ")
            )));
        }

        let norm = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let clipped = norm > cfg.clip_norm;
        if clipped {
            let s = cfg.clip_norm / norm;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }

        let lr_main = lr_at(it, cfg.warmup_steps, cfg.lr_lora);
        let lr_text = lr_at(it, cfg.warmup_steps, cfg.lr_text);
        let (wd_main, wd_text) = (cfg.wd_lora, cfg.wd_text);
        let mut grads: IndexMap<String, Tensor> = names.into_iter().map(|(n, _)| n).zip(grads).collect();
        let moments = &mut self.moments;
        let mut update = |name: &str, p: &mut Tensor| -> Result<()> {
            if let Some(g) = grads.swap_remove(name) {
                let (lr, wd) = if Self::is_text(name) { (lr_text, wd_text) } else { (lr_main, wd_main) };
                let state = moments
                    .get_mut(name)
                    .ok_or_else(|| Error::UnknownParameter(format!("optimizer state for {name}")))?;
                adamw_step(p, &g, state, it, lr, wd)?;
            }
            Ok(())
        };
        match &mut self.adapter {
            Some(a) => {
                for (n, p) in a.named_factors_mut() {
                    update(&n, p)?;
                }
            }
            None => {
                for (n, p) in self.model.params.iter_mut() {
                    update(n, p)?;
                }
            }
        }
        if self.text.trainable {
            for (n, p) in self.text.params.iter_mut() {
                update(n, p)?;
            }
        }

        let row = LogRow {
            iteration: it,
            loss,
            lr_lora: lr_main,
            lr_text: if self.text.trainable { lr_text } else { 0.0 },
            clipped,
        };
        self.iteration = it;
        self.log.push(row.clone());
        Ok(row)
    }

    /// Runs until `config.iterations`. With a checkpoint path, saves every
    /// `checkpoint_every` iterations and at the end.
    pub fn run(&mut self, checkpoint: Option<&Path>, mut on_step: impl FnMut(&LogRow)) -> Result<()> {
        while self.iteration < self.config.iterations {
            let row = self.step()?;
            on_step(&row);
            if let Some(path) = checkpoint {
                let every = self.config.checkpoint_every;
                if (every > 0 && self.iteration % every == 0) || self.iteration == self.config.iterations {
                    self.save_checkpoint(path)?;
                }
            }
        }
        Ok(())
    }

    pub fn log_csv(&self) -> String {
        log_csv(&self.log)
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            train_config: self.config.clone(),
            model: self.model.clone(),
            text: self.text.clone(),
            adapter: self.adapter.clone(),
            moments: self.moments.clone(),
            iteration: self.iteration,
            rng: RngState {
                seed: self.config.seed,
                next_iteration: self.iteration + 1,
            },
            log: self.log.clone(),
        }
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        self.checkpoint().to_bytes()
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_file(path, &self.checkpoint_bytes())
    }

    /// Rebuilds a trainer from a checkpoint. The dataset must be the one
    /// the run started with; continuing reproduces the uninterrupted run.
    pub fn resume(checkpoint: &Checkpoint, data: &PairedDataset) -> Result<Self> {
        Self::assemble(
            checkpoint.train_config.clone(),
            checkpoint.model.clone(),
            checkpoint.text.clone(),
            checkpoint.adapter.clone(),
            checkpoint.moments.clone(),
            checkpoint.iteration,
            checkpoint.log.clone(),
            data,
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub next_iteration: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterMeta {
    rank: usize,
    alpha: f64,
    task_tag: TaskTag,
    sites: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    train_config: TrainConfig,
    model_config: ModelConfig,
    vocab: PromptVocab,
    iteration: usize,
    rng: RngState,
    adapter: Option<AdapterMeta>,
    tensors: Vec<TensorEntry>,
    log_len: usize,
}

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub model: FlowTransformer,
    pub text: TextEmbedder,
    pub adapter: Option<LoraAdapter>,
    pub moments: IndexMap<String, Moments>,
    pub iteration: usize,
    pub rng: RngState,
    pub log: Vec<LogRow>,
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoded::parse(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
        let h: CheckpointHeader = d.header_json()?;
        h.model_config.validate()?;
        let mut model_params = ParamSet::new();
        let mut text_params = ParamSet::new();
        let mut factors: IndexMap<String, Tensor> = IndexMap::new();
        let mut m_bufs: IndexMap<String, Tensor> = IndexMap::new();
        let mut moments = IndexMap::new();
        for e in &h.tensors {
            let n: usize = e.shape.iter().product();
            let t = Tensor::new(e.shape.clone(), d.take(n)?)?;
            match e.group.as_str() {
                "model" => model_params.insert(e.name.clone(), t),
                "text" => text_params.insert(e.name.clone(), t),
                "adapter" => {
                    factors.insert(e.name.clone(), t);
                }
                "adam_m" => {
                    m_bufs.insert(e.name.clone(), t);
                }
                "adam_v" => {
                    let m = m_bufs.swap_remove(&e.name).ok_or_else(|| Error::CorruptFile {
                        offset: 12,
                        reason: format!("second moment for {} precedes its first moment", e.name),
                    })?;
                    moments.insert(e.name.clone(), Moments { m, v: t });
                }
                other => {
                    return Err(Error::CorruptFile {
                        offset: 12,
                        reason: format!("unknown tensor group {other:?}"),
                    })
                }
            }
        }
        let cols: Vec<Vec<f64>> = (0..4).map(|_| d.take(h.log_len)).collect::<Result<_>>()?;
        d.finish()?;
        let log = (0..h.log_len)
            .map(|i| LogRow {
                iteration: i + 1,
                loss: cols[0][i],
                lr_lora: cols[1][i],
                lr_text: cols[2][i],
                clipped: cols[3][i] != 0.0,
            })
            .collect();

        let model = FlowTransformer {
            config: h.model_config,
            params: model_params,
        };
        let adapter = match h.adapter {
            Some(meta) => {
                let mut sites = IndexMap::new();
                for s in meta.sites {
                    let mut take = |f: char| {
                        let key = format!("lora.{s}.{f}");
                        factors.swap_remove(&key).ok_or_else(|| Error::CorruptFile {
                            offset: 12,
                            reason: format!("missing adapter factor {key}"),
                        })
                    };
                    let a = take('a')?;
                    let b = take('b')?;
                    sites.insert(s, LoraFactors { a, b });
                }
                let adapter = LoraAdapter {
                    rank: meta.rank,
                    alpha: meta.alpha,
                    task_tag: meta.task_tag,
                    sites,
                };
                adapter.check_compatible(&model)?;
                Some(adapter)
            }
            None => None,
        };
        let text = TextEmbedder {
            vocab: h.vocab,
            params: text_params,
            trainable: h.train_config.text_encoder_trainable,
        };
        Ok(Checkpoint {
            train_config: h.train_config,
            model,
            text,
            adapter,
            moments,
            iteration: h.iteration,
            rng: h.rng,
            log,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(&str, String, &Tensor)> = Vec::new();
        entries.extend(self.model.params.iter().map(|(n, t)| ("model", n.to_string(), t)));
        entries.extend(self.text.params.iter().map(|(n, t)| ("text", n.to_string(), t)));
        if let Some(a) = &self.adapter {
            entries.extend(a.named_factors().into_iter().map(|(n, t)| ("adapter", n, t)));
        }
        for (n, m) in &self.moments {
            entries.push(("adam_m", n.clone(), &m.m));
            entries.push(("adam_v", n.clone(), &m.v));
        }
        let tensors: Vec<TensorEntry> = entries
            .iter()
            .map(|(g, n, t)| TensorEntry {
                group: g.to_string(),
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let mut payloads: Vec<&[f64]> = entries.iter().map(|(_, _, t)| t.data()).collect();
        let log_cols: [Vec<f64>; 4] = [
            self.log.iter().map(|r| r.loss).collect(),
            self.log.iter().map(|r| r.lr_lora).collect(),
            self.log.iter().map(|r| r.lr_text).collect(),
            self.log.iter().map(|r| r.clipped as u8 as f64).collect(),
        ];
        payloads.extend(log_cols.iter().map(Vec::as_slice));
        let header = CheckpointHeader {
            train_config: self.train_config.clone(),
            model_config: self.model.config.clone(),
            vocab: self.text.vocab.clone(),
            iteration: self.iteration,
            rng: self.rng.clone(),
            adapter: self.adapter.as_ref().map(|a| AdapterMeta {
                rank: a.rank,
                alpha: a.alpha,
                task_tag: a.task_tag,
                sites: a.sites.keys().cloned().collect(),
            }),
            tensors,
            log_len: self.log.len(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &json, &payloads)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
