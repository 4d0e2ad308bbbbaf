//! Single-file checkpoints: named `f64` tensors plus a JSON manifest stored in
//! the safetensors header metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{TranslationStats, TsdConfig, TsdModel};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::skeleton::Skeleton;
use crate::style_embedding::{StageOneConfig, StageOneModel};

const MANIFEST_KEY: &str = "manifest";
const STAGE1_PREFIX: &str = "stage1.";
const TSD_PREFIX: &str = "tsd.";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageOneManifest {
    pub channels: usize,
    pub canonical_joints: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub seed: u64,
    pub style_norm: f64,
    pub config: StageOneConfig,
    pub skeleton: Skeleton,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TsdManifest {
    pub stage1: StageOneManifest,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub steps: usize,
    pub seed: u64,
    pub config: TsdConfig,
    pub skeleton: Skeleton,
    pub translation: TranslationStats,
    /// Frame count of the training source, the default sample length.
    pub source_frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Manifest {
    Stage1(StageOneManifest),
    Tsd(TsdManifest),
}

fn stage1_manifest(model: &StageOneModel) -> StageOneManifest {
    let cfg = model.config();
    StageOneManifest {
        channels: cfg.channels,
        canonical_joints: model.canonical_joints(),
        encoder_layers: cfg.encoder_layers,
        decoder_layers: cfg.decoder_layers,
        seed: cfg.seed,
        style_norm: model.style_norm(),
        config: cfg.clone(),
        skeleton: model.skeleton().clone(),
    }
}

/// Re-run skeleton validation on a deserialized value.
fn revalidate(s: Skeleton) -> Result<Skeleton> {
    let mut out = Skeleton::new(s.joint_names().to_vec(), s.parents().to_vec(), s.offsets().to_vec())?;
    if let Some(parts) = s.part_map() {
        out = out.with_part_map(parts.to_vec())?;
    }
    out.with_end_sites(s.end_sites().to_vec())
}

fn write(path: &Path, manifest: &Manifest, tensors: BTreeMap<String, Tensor>) -> Result<()> {
    let info = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(manifest)?)]);
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn manifest_from(bytes: &[u8], path: &Path) -> Result<Manifest> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} has no manifest", path.display())))?;
    Ok(serde_json::from_str(text)?)
}

fn read(path: &Path) -> Result<(Manifest, HashMap<String, Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest = manifest_from(&bytes, path)?;
    Ok((manifest, candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    manifest_from(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}

fn prefixed(store: &ParamStore, prefix: &str) -> BTreeMap<String, Tensor> {
    store.tensors().into_iter().map(|(k, v)| (format!("{prefix}{k}"), v)).collect()
}

fn strip(tensors: &HashMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
        .collect()
}

fn check_complete(expected: &BTreeMap<String, Tensor>, store: &ParamStore, what: &str) -> Result<()> {
    let built: Vec<&String> = store.named_vars().keys().collect();
    let stored: Vec<&String> = expected.keys().collect();
    if built != stored {
        return Err(Error::Checkpoint(format!(
            "{what} parameters do not match the architecture ({} stored, {} expected)",
            stored.len(),
            built.len()
        )));
    }
    Ok(())
}

fn stage1_from(manifest: &StageOneManifest, tensors: BTreeMap<String, Tensor>, trainable: bool) -> Result<StageOneModel> {
    let skeleton = revalidate(manifest.skeleton.clone())?;
    let store = ParamStore::from_tensors(tensors.clone(), trainable)?;
    let model = StageOneModel::from_store(manifest.config.clone(), skeleton, store, manifest.style_norm)?;
    check_complete(&tensors, model.store(), "stage-one")?;
    Ok(model)
}

pub fn save_stage1(model: &StageOneModel, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &Manifest::Stage1(stage1_manifest(model)), prefixed(model.store(), STAGE1_PREFIX))
}

/// Load a trainable stage-one model.
pub fn load_stage1(path: impl AsRef<Path>) -> Result<StageOneModel> {
    let (manifest, tensors) = read(path.as_ref())?;
    match manifest {
        Manifest::Stage1(m) => stage1_from(&m, strip(&tensors, STAGE1_PREFIX), true),
        Manifest::Tsd(m) => stage1_from(&m.stage1, strip(&tensors, STAGE1_PREFIX), true),
    }
}

pub fn save_tsd(model: &TsdModel, source_frames: usize, path: impl AsRef<Path>) -> Result<()> {
    let cfg = model.config();
    let manifest = Manifest::Tsd(TsdManifest {
        stage1: stage1_manifest(model.stage1()),
        encoder_layers: cfg.encoder_layers,
        decoder_layers: cfg.decoder_layers,
        steps: cfg.steps,
        seed: cfg.seed,
        config: cfg.clone(),
        skeleton: model.skeleton().clone(),
        translation: model.translation_stats(),
        source_frames,
    });
    let mut tensors = prefixed(model.stage1().store(), STAGE1_PREFIX);
    tensors.extend(prefixed(model.store(), TSD_PREFIX));
    write(path.as_ref(), &manifest, tensors)
}

/// Load a TSD model (trainable) with its frozen stage-one model; also returns the manifest.
pub fn load_tsd(path: impl AsRef<Path>) -> Result<(TsdModel, TsdManifest)> {
    let (manifest, tensors) = read(path.as_ref())?;
    let Manifest::Tsd(m) = manifest else {
        return Err(Error::Checkpoint(format!("{} is a stage-one checkpoint", path.as_ref().display())));
    };
    let stage1 = stage1_from(&m.stage1, strip(&tensors, STAGE1_PREFIX), false)?;
    let own = strip(&tensors, TSD_PREFIX);
    let store = ParamStore::from_tensors(own.clone(), true)?;
    let model = TsdModel::from_store(m.config.clone(), stage1, revalidate(m.skeleton.clone())?, store, m.translation)?;
    check_complete(&own, model.store(), "TSD")?;
    Ok((model, m))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
