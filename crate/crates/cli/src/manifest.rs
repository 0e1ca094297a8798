//! Dataset directories: `clean/`, `degraded/` and `manifest.json`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowfix_core::degrade::{build_split, DegradationSpec, PairRecord, PairedDataset, Split, Task};
use flowfix_core::image::{read_ppm, write_ppm};
use flowfix_core::DataConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub task: Task,
    pub prompt: String,
    pub source_id: u64,
    pub spec: DegradationSpec,
    pub clean: String,
    pub degraded: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub image_size: usize,
    pub data: DataConfig,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }
}

/// Generates the train and eval splits and writes them under `out`.
pub fn write_dataset(out: &Path, data: &DataConfig, image_size: usize) -> Result<Manifest> {
    write_splits(out, data, image_size, Split::Train)
}

/// Like [`write_dataset`], with the training split drawn from the
/// pre-training corpus.
pub fn write_pretrain(out: &Path, data: &DataConfig, image_size: usize) -> Result<Manifest> {
    write_splits(out, data, image_size, Split::Pretrain)
}

fn write_splits(out: &Path, data: &DataConfig, image_size: usize, train: Split) -> Result<Manifest> {
    data.validate()?;
    let mut records = Vec::new();
    let splits = [(train, data.n_per_task), (Split::Eval, data.eval_per_task)];
    for (split, n) in splits {
        if n == 0 {
            continue;
        }
        let ds = build_split(n, &data.tasks, data.seed, image_size, split)?;
        for (i, r) in ds.records.iter().enumerate() {
            let id = format!("{}-{i:04}", split_name(split));
            let clean = format!("clean/{id}.ppm");
            let degraded = format!("degraded/{id}.ppm");
            write_ppm(&out.join(&clean), &r.clean)?;
            write_ppm(&out.join(&degraded), &r.degraded)?;
            records.push(ManifestRecord {
                id,
                split,
                task: r.task,
                prompt: r.prompt.clone(),
                source_id: r.source_id,
                spec: r.spec.clone(),
                clean,
                degraded,
            });
        }
    }
    let manifest = Manifest {
        image_size,
        data: data.clone(),
        records,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out.join(MANIFEST), json + "\n").with_context(|| format!("writing {}", out.join(MANIFEST).display()))?;
    Ok(manifest)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Eval => "eval",
        Split::Pretrain => "pretrain",
    }
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    if dir.is_file() {
        dir.to_path_buf()
    } else {
        dir.join(MANIFEST)
    }
}

pub fn read_manifest(dir: &Path) -> Result<(PathBuf, Manifest)> {
    let path = manifest_path(dir);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading manifest {}", path.display()))?;
    let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((root, m))
}

/// Loads one split's images.
pub fn load_split(dir: &Path, split: Split) -> Result<PairedDataset> {
    let (root, m) = read_manifest(dir)?;
    let records = m
        .records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            Ok(PairRecord {
                clean: read_ppm(&root.join(&r.clean))?,
                degraded: read_ppm(&root.join(&r.degraded))?,
                prompt: r.prompt.clone(),
                task: r.task,
                spec: r.spec.clone(),
                source_id: r.source_id,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        bail!(crate::DataError(format!("{} has no {} records", root.display(), split_name(split))));
    }
    Ok(PairedDataset { records })
}
