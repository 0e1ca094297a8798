//! Low-rank adapters on attention projections.
//!
//! A site with frozen weight `W₀ (d × k)` gets factors `A (r × k)` and
//! `B (d × r)`; the adapted projection computes `W₀x + (α/r)·B(Ax)`.
//! `B` starts at zero so a fresh adapter leaves the model unchanged.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Decoded};
use crate::degrade::Task;
use crate::error::{Error, Result};
use crate::model::FlowTransformer;
use crate::params::{Bound, BoundLora};
use crate::tensor::{Tape, Tensor, Var};

pub const ADAPTER_MAGIC: &[u8; 4] = b"E2RA";
pub const ADAPTER_VERSION: u32 = 1;
pub const LORA_INIT_STD: f64 = 0.02;

/// Which degradation an adapter was trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    Noise,
    Rain,
    Haze,
    Unified,
}

impl From<Task> for TaskTag {
    fn from(t: Task) -> Self {
        match t {
            Task::Noise => TaskTag::Noise,
            Task::Rain => TaskTag::Rain,
            Task::Haze => TaskTag::Haze,
        }
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskTag::Noise => "noise",
            TaskTag::Rain => "rain",
            TaskTag::Haze => "haze",
            TaskTag::Unified => "unified",
        })
    }
}

impl FromStr for TaskTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(TaskTag::Noise),
            "rain" => Ok(TaskTag::Rain),
            "haze" => Ok(TaskTag::Haze),
            "unified" => Ok(TaskTag::Unified),
            _ => Err(Error::InvalidConfig(format!(
                "unknown task tag {s:?} (expected noise, rain, haze or unified)"
            ))),
        }
    }
}

/// Selects projection sites by kind and stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiteFilter {
    pub query: bool,
    pub key: bool,
    pub value: bool,
    pub output: bool,
    pub image_stream: bool,
    pub text_stream: bool,
    pub joint_stream: bool,
}

impl Default for SiteFilter {
    fn default() -> Self {
        SiteFilter {
            query: true,
            key: true,
            value: true,
            output: false,
            image_stream: true,
            text_stream: true,
            joint_stream: true,
        }
    }
}

impl SiteFilter {
    pub fn select(&self, model: &FlowTransformer) -> Vec<String> {
        model
            .projection_sites()
            .into_iter()
            .filter(|s| match s.kind {
                'q' => self.query,
                'k' => self.key,
                'v' => self.value,
                _ => self.output,
            })
            .filter(|s| match s.stream {
                "img" => self.image_stream,
                "txt" => self.text_stream,
                _ => self.joint_stream,
            })
            .map(|s| s.name)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub sites: SiteFilter,
}

impl LoraSpec {
    /// Rank `r` with `α = r`, i.e. unit scale, on all Q/K/V projections.
    pub fn with_rank(rank: usize) -> Self {
        LoraSpec {
            rank,
            alpha: rank as f64,
            sites: SiteFilter::default(),
        }
    }
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self::with_rank(64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    /// `r × k`
    pub a: Tensor,
    /// `d × r`
    pub b: Tensor,
}

impl LoraFactors {
    /// `BA`, the unscaled weight delta.
    pub fn delta(&self) -> Tensor {
        self.b.matmul(&self.a).expect("factor shapes checked at construction")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub task_tag: TaskTag,
    pub sites: IndexMap<String, LoraFactors>,
}

fn weight_name(site: &str) -> String {
    format!("{site}.weight")
}

fn lora_name(site: &str, factor: char) -> String {
    format!("lora.{site}.{factor}")
}

/// Creates an adapter on every site the filter selects.
pub fn inject<R: Rng + ?Sized>(
    model: &FlowTransformer,
    spec: &LoraSpec,
    task_tag: TaskTag,
    rng: &mut R,
) -> Result<LoraAdapter> {
    let sites = spec.sites.select(model);
    inject_sites(model, &sites, spec.rank, spec.alpha, task_tag, rng)
}

/// Creates an adapter on explicitly named sites.
pub fn inject_sites<R: Rng + ?Sized>(
    model: &FlowTransformer,
    sites: &[String],
    rank: usize,
    alpha: f64,
    task_tag: TaskTag,
    rng: &mut R,
) -> Result<LoraAdapter> {
    if rank == 0 {
        return Err(Error::InvalidConfig("LoRA rank must be positive".into()));
    }
    let known = model.projection_sites();
    let mut out = IndexMap::new();
    for site in sites {
        if !known.iter().any(|s| &s.name == site) {
            return Err(Error::UnknownSite(site.clone()));
        }
        let (d, k) = model.params.get(&weight_name(site))?.dims2()?;
        if rank > d.min(k) {
            return Err(Error::RankTooLarge {
                site: site.clone(),
                rank,
                limit: d.min(k),
            });
        }
        out.insert(
            site.clone(),
            LoraFactors {
                a: Tensor::randn(&[rank, k], LORA_INIT_STD, rng),
                b: Tensor::zeros(&[d, rank]),
            },
        );
    }
    Ok(LoraAdapter {
        rank,
        alpha,
        task_tag,
        sites: out,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterHeader {
    rank: usize,
    alpha: f64,
    task_tag: TaskTag,
    sites: Vec<SiteHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SiteHeader {
    name: String,
    a_shape: [usize; 2],
    b_shape: [usize; 2],
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Number of trainable scalars, `Σ r·(d + k)` over sites.
    pub fn numel(&self) -> usize {
        self.sites.values().map(|f| f.a.numel() + f.b.numel()).sum()
    }

    /// Errors unless every site exists in `model` with matching dimensions.
    pub fn check_compatible(&self, model: &FlowTransformer) -> Result<()> {
        for (site, f) in &self.sites {
            let w = model
                .params
                .get(&weight_name(site))
                .map_err(|_| Error::UnknownSite(site.clone()))?;
            let (d, k) = w.dims2()?;
            if f.a.shape() != [self.rank, k] || f.b.shape() != [d, self.rank] {
                return Err(Error::DimensionMismatch {
                    name: site.clone(),
                    expected: vec![d, k],
                    found: vec![f.b.shape()[0], f.a.shape()[1]],
                });
            }
        }
        Ok(())
    }

    /// Binds the factors onto `tape` and registers them with the bound
    /// parameter map as `lora.<site>.a` / `lora.<site>.b`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool, into: &mut Bound) {
        let scale = self.scale();
        for (site, f) in &self.sites {
            let a = tape.leaf(f.a.clone(), requires_grad);
            let b = tape.leaf(f.b.clone(), requires_grad);
            into.insert(lora_name(site, 'a'), a);
            into.insert(lora_name(site, 'b'), b);
            into.insert_lora(site.clone(), BoundLora { a, b, scale });
        }
    }

    /// Flat `(name, tensor)` view of the factors, in payload order.
    pub fn named_factors(&self) -> Vec<(String, &Tensor)> {
        self.sites
            .iter()
            .flat_map(|(s, f)| [(lora_name(s, 'a'), &f.a), (lora_name(s, 'b'), &f.b)])
            .collect()
    }

    pub fn named_factors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.sites
            .iter_mut()
            .flat_map(|(s, f)| [(lora_name(s, 'a'), &mut f.a), (lora_name(s, 'b'), &mut f.b)])
            .collect()
    }

    /// Variables bound by [`LoraAdapter::bind`], in payload order.
    pub fn bound_vars(&self, bound: &Bound) -> Result<Vec<Var>> {
        self.named_factors()
            .iter()
            .map(|(n, _)| bound.get(n))
            .collect()
    }

    fn apply(&self, model: &mut FlowTransformer, sign: f64) -> Result<()> {
        self.check_compatible(model)?;
        let s = sign * self.scale();
        for (site, f) in &self.sites {
            let delta = f.delta();
            let w = model.params.get_mut(&weight_name(site))?;
            for (x, dx) in w.data_mut().iter_mut().zip(delta.data()) {
                *x += s * dx;
            }
        }
        Ok(())
    }

    /// Folds `(α/r)·BA` into the base weights.
    pub fn merge(&self, model: &mut FlowTransformer) -> Result<()> {
        self.apply(model, 1.0)
    }

    /// Subtracts a previously merged delta.
    pub fn unmerge(&self, model: &mut FlowTransformer) -> Result<()> {
        self.apply(model, -1.0)
    }

    pub fn merged(&self, model: &FlowTransformer) -> Result<FlowTransformer> {
        let mut m = model.clone();
        self.merge(&mut m)?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = AdapterHeader {
            rank: self.rank,
            alpha: self.alpha,
            task_tag: self.task_tag,
            sites: self
                .sites
                .iter()
                .map(|(name, f)| SiteHeader {
                    name: name.clone(),
                    a_shape: [f.a.shape()[0], f.a.shape()[1]],
                    b_shape: [f.b.shape()[0], f.b.shape()[1]],
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("adapter header serializes");
        let payloads: Vec<&[f64]> = self
            .sites
            .values()
            .flat_map(|f| [f.a.data(), f.b.data()])
            .collect();
        container::encode(ADAPTER_MAGIC, ADAPTER_VERSION, &header, &payloads)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoded::parse(bytes, ADAPTER_MAGIC, ADAPTER_VERSION, "adapter")?;
        let header: AdapterHeader = dec.header_json()?;
        let mut sites = IndexMap::new();
        for s in header.sites {
            if s.a_shape[0] != header.rank || s.b_shape[1] != header.rank {
                return Err(Error::CorruptFile {
                    offset: 12,
                    reason: format!("site {} factor shapes disagree with rank {}", s.name, header.rank),
                });
            }
            let a = Tensor::new(s.a_shape.to_vec(), dec.take(s.a_shape[0] * s.a_shape[1])?)?;
            let b = Tensor::new(s.b_shape.to_vec(), dec.take(s.b_shape[0] * s.b_shape[1])?)?;
            sites.insert(s.name, LoraFactors { a, b });
        }
        dec.finish()?;
        Ok(LoraAdapter {
            rank: header.rank,
            alpha: header.alpha,
            task_tag: header.task_tag,
            sites,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}
