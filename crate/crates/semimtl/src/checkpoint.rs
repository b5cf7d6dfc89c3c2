//! Checkpoint directories.
//!
//! ```text
//! manifest.json                 config, config hash, iteration, batch-iterator state,
//!                               parameter names, optimizer step counters
//! generator/NNN.bin             generator parameters, in store order
//! sgd/NNN.bin                   SGD momentum buffers that exist
//! disc_<task>/params/NNN.bin    discriminator parameters
//! disc_<task>/u/NNN.bin         spectral-norm singular-vector estimates
//! disc_<task>/adam_m/NNN.bin    Adam first moments that exist
//! disc_<task>/adam_v/NNN.bin    Adam second moments that exist
//! ```
//!
//! Datasets are not stored; they are re-rendered from the specs in the config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synscene::{BatchIterator, Task};
use tensorcore::io::{load_tensor, save_tensor};
use tensorcore::{SpectralState, Tensor};

use crate::error::{Error, Result};
use crate::nets::ParamStore;
use crate::trainer::{TrainConfig, Trainer};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SlotManifest {
    steps: u64,
    /// Whether slot i holds a buffer.
    present: Vec<bool>,
    /// Per-slot update counts (Adam only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    t: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DiscManifest {
    params: Vec<String>,
    spectral_iterations: Vec<u64>,
    adam: SlotManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    config_hash: String,
    iteration: u64,
    config: TrainConfig,
    batches: BatchIterator,
    generator: Vec<String>,
    sgd: SlotManifest,
    discriminators: BTreeMap<Task, DiscManifest>,
}

/// Hex SHA-256 of the canonical config JSON.
pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    let digest = Sha256::digest(cfg.to_canonical_json()?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn slot(i: usize) -> String {
    format!("{i:03}.bin")
}

fn vec_tensor(v: &[f64]) -> Result<Tensor> {
    Ok(Tensor::new(&[v.len()], v.to_vec())?)
}

fn save_store(store: &ParamStore, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for (i, p) in store.params().iter().enumerate() {
        save_tensor(&dir.join(slot(i)), &p.value)?;
        names.push(p.name.clone());
    }
    Ok(names)
}

fn save_slots(slots: &[Option<Vec<f64>>], dir: &Path) -> Result<Vec<bool>> {
    fs::create_dir_all(dir)?;
    for (i, s) in slots.iter().enumerate() {
        if let Some(buf) = s {
            save_tensor(&dir.join(slot(i)), &vec_tensor(buf)?)?;
        }
    }
    Ok(slots.iter().map(Option::is_some).collect())
}

fn load_slots(present: &[bool], dir: &Path) -> Result<Vec<Option<Vec<f64>>>> {
    present
        .iter()
        .enumerate()
        .map(|(i, &p)| if p { Ok(Some(load_tensor(&dir.join(slot(i)))?.into_data())) } else { Ok(None) })
        .collect()
}

fn load_store(store: &mut ParamStore, names: &[String], dir: &Path) -> Result<()> {
    let expected: Vec<&str> = store.params().iter().map(|p| p.name.as_str()).collect();
    if !names.iter().map(String::as_str).eq(expected.iter().copied()) {
        return Err(Error::Checkpoint(format!("parameter list mismatch in {}", dir.display())));
    }
    let values = (0..names.len()).map(|i| load_tensor(&dir.join(slot(i)))).collect::<tensorcore::Result<_>>()?;
    store.load_values(values)
}

/// Writes the trainer state into `dir`, which must not hold unrelated files.
pub fn save(trainer: &Trainer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let generator = save_store(trainer.gen.store(), &dir.join("generator"))?;
    let sgd = SlotManifest {
        steps: trainer.sgd.steps,
        present: save_slots(&trainer.sgd.velocity, &dir.join("sgd"))?,
        t: Vec::new(),
    };
    let mut discriminators = BTreeMap::new();
    for (task, d) in &trainer.discs {
        let base = dir.join(format!("disc_{task}"));
        let params = save_store(d.store(), &base.join("params"))?;
        fs::create_dir_all(base.join("u"))?;
        for (i, s) in d.spectral_states().iter().enumerate() {
            save_tensor(&base.join("u").join(slot(i)), &vec_tensor(&s.u)?)?;
        }
        let adam = &trainer.adams[task];
        let present = save_slots(&adam.m, &base.join("adam_m"))?;
        save_slots(&adam.v, &base.join("adam_v"))?;
        discriminators.insert(
            *task,
            DiscManifest {
                params,
                spectral_iterations: d.spectral_states().iter().map(|s| s.iterations).collect(),
                adam: SlotManifest { steps: adam.steps, present, t: adam.t.clone() },
            },
        );
    }
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config_hash: config_hash(&trainer.cfg)?,
        iteration: trainer.iteration,
        config: trainer.cfg.clone(),
        batches: trainer.batches.clone(),
        generator,
        sgd,
        discriminators,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Saves into a sibling temporary directory, then swaps it in, so a failed
/// write leaves the previous checkpoint intact.
pub fn save_atomic(trainer: &Trainer, dir: &Path) -> Result<()> {
    let name = dir.file_name().ok_or_else(|| Error::Checkpoint(format!("bad path {}", dir.display())))?;
    let tmp = dir.with_file_name(format!("{}.tmp", name.to_string_lossy()));
    let old = dir.with_file_name(format!("{}.old", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    save(trainer, &tmp)?;
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(dir, &old)?;
    }
    fs::rename(&tmp, dir)?;
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    Ok(())
}

/// Rebuilds a trainer from `dir`.
pub fn load(dir: &Path) -> Result<Trainer> {
    let m: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if m.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!("unsupported schema_version {}", m.schema_version)));
    }
    if config_hash(&m.config)? != m.config_hash {
        return Err(Error::Checkpoint("config hash does not match the stored config".into()));
    }
    let mut t = Trainer::new(m.config)?;
    if m.iteration > t.cfg.iterations {
        return Err(Error::Checkpoint(format!("iteration {} beyond configured {}", m.iteration, t.cfg.iterations)));
    }
    t.iteration = m.iteration;
    t.batches = m.batches;
    load_store(t.gen.store_mut(), &m.generator, &dir.join("generator"))?;
    t.sgd.steps = m.sgd.steps;
    t.sgd.velocity = load_slots(&m.sgd.present, &dir.join("sgd"))?;
    if m.discriminators.keys().ne(t.discs.keys()) {
        return Err(Error::Checkpoint("discriminator set does not match the mode".into()));
    }
    for (task, dm) in m.discriminators {
        let base = dir.join(format!("disc_{task}"));
        let d = t.discs.get_mut(&task).expect("keys checked");
        load_store(d.store_mut(), &dm.params, &base.join("params"))?;
        let states = dm
            .spectral_iterations
            .iter()
            .enumerate()
            .map(|(i, &iterations)| {
                Ok(SpectralState { u: load_tensor(&base.join("u").join(slot(i)))?.into_data(), iterations })
            })
            .collect::<Result<Vec<_>>>()?;
        d.set_spectral_states(states)?;
        let adam = t.adams.get_mut(&task).expect("one Adam state per discriminator");
        adam.steps = dm.adam.steps;
        adam.m = load_slots(&dm.adam.present, &base.join("adam_m"))?;
        adam.v = load_slots(&dm.adam.present, &base.join("adam_v"))?;
        if dm.adam.t.len() != dm.adam.present.len() {
            return Err(Error::Checkpoint("Adam counters and buffers disagree".into()));
        }
        adam.t = dm.adam.t;
    }
    Ok(t)
}
