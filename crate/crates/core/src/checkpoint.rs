//! Checkpoint archives: a safetensors file of named little-endian f32
//! tensors plus a sidecar JSON manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::model::{DecoderModel, ModelSpec};
use crate::multimodal::{TrainableScope, VisionBundle, VisionSpec};
use crate::params::Parameters;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Target,
    Surrogate,
    /// A vision bundle: encoder and adapter travel together.
    Encoder,
    Adapter,
}

/// Where a surrogate came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurgeryRecord {
    pub first_replaced: usize,
    pub last_replaced: usize,
    pub target_layers: usize,
    pub control_variant: bool,
}

/// One completed training stage in a checkpoint's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: String,
    pub steps: usize,
    pub data_fraction: f64,
    pub seed: u64,
    pub config_digest: String,
    /// Checksum of the decoder the stage trained with, when one was involved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_checksum: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vision: Option<VisionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<TrainableScope>,
    /// Checksum of the stored parameters.
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_checksum: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surgery: Option<SurgeryRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trainable_keys: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<StageRecord>,
    pub created_by: String,
}

impl Manifest {
    pub fn new(role: Role) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            role,
            spec: None,
            vision: None,
            scope: None,
            checksum: String::new(),
            parent_checksum: None,
            surgery: None,
            trainable_keys: Vec::new(),
            provenance: Vec::new(),
            created_by: format!("forge-core {}", env!("CARGO_PKG_VERSION")),
        }
    }

    pub fn for_decoder(role: Role, model: &DecoderModel) -> Self {
        let mut m = Self::new(role);
        m.spec = Some(model.spec.clone());
        m
    }

    pub fn for_bundle(bundle: &VisionBundle) -> Self {
        let mut m = Self::new(Role::Encoder);
        m.vision = Some(bundle.spec.clone());
        m.scope = Some(bundle.scope);
        m
    }

    /// Name of the most recent stage, if any.
    pub fn last_stage(&self) -> Option<&str> {
        self.provenance.last().map(|r| r.stage.as_str())
    }
}

/// `foo.safetensors` → `foo.json`
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn to_le_bytes(t: &ArrayViewD<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes named tensors to a safetensors file (no header metadata, so the
/// bytes depend only on names, shapes and values).
pub fn save_tensors(path: &Path, tensors: &[(String, ArrayViewD<f32>)]) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(n, t)| (n.clone(), to_le_bytes(t), t.shape().to_vec()))
        .collect();
    let views: Vec<(String, TensorView)> = bytes
        .iter()
        .map(|(n, b, s)| {
            let v = TensorView::new(Dtype::F32, s.clone(), b).map_err(|e| ForgeError::load(n.clone(), e.to_string()))?;
            Ok((n.clone(), v))
        })
        .collect::<Result<_>>()?;
    let out = safetensors::serialize(views, &None).map_err(|e| ForgeError::Data(e.to_string()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| ForgeError::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| ForgeError::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let bytes = fs::read(path).map_err(|e| ForgeError::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ForgeError::load("<archive>", e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(ForgeError::load(name, format!("dtype {:?}, expected F32", view.dtype())));
        }
        let vals: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), vals).map_err(|e| ForgeError::load(name.clone(), e.to_string()))?;
        out.insert(name, arr);
    }
    Ok(out)
}

/// Saves `params` and its manifest; the manifest's checksum is filled in.
pub fn save_checkpoint<P: Parameters>(path: &Path, params: &P, mut manifest: Manifest) -> Result<Manifest> {
    manifest.checksum = params.checksum();
    save_tensors(path, &params.named_params())?;
    let mpath = manifest_path(path);
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&mpath, json).map_err(|e| ForgeError::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mpath = manifest_path(path);
    let bytes = fs::read(&mpath).map_err(|e| ForgeError::io(&mpath, e))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| ForgeError::load("<manifest>", e.to_string()))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(ForgeError::load(
            "format_version",
            format!("found {version:?}, this build reads version {FORMAT_VERSION}"),
        ));
    }
    serde_json::from_value(raw).map_err(|e| ForgeError::load("<manifest>", e.to_string()))
}

/// Fills `skeleton` from the archive at `path`. Every skeleton key must be
/// present with the same shape and no extra keys may remain.
pub fn load_into<P: Parameters>(path: &Path, skeleton: &mut P) -> Result<Manifest> {
    let manifest = read_manifest(path)?;
    let mut tensors = load_tensors(path)?;
    for (name, mut slot) in skeleton.named_params_mut() {
        let t = tensors.remove(&name).ok_or_else(|| ForgeError::load(name.clone(), "missing from archive"))?;
        if t.shape() != slot.shape() {
            return Err(ForgeError::load(
                name,
                format!("shape {:?} in archive, {:?} expected", t.shape(), slot.shape()),
            ));
        }
        slot.assign(&t);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(ForgeError::load(extra.clone(), "not expected by the manifest"));
    }
    if skeleton.checksum() != manifest.checksum {
        return Err(ForgeError::load("checksum", "stored parameters do not match the manifest checksum"));
    }
    Ok(manifest)
}

pub fn load_decoder(path: &Path) -> Result<(DecoderModel, Manifest)> {
    let m = read_manifest(path)?;
    let spec = m
        .spec
        .clone()
        .ok_or_else(|| ForgeError::load("spec", "decoder manifest carries no model spec"))?;
    let mut model = DecoderModel::zeros(&spec)?;
    let m = load_into(path, &mut model)?;
    Ok((model, m))
}

pub fn load_bundle(path: &Path) -> Result<(VisionBundle, Manifest)> {
    let m = read_manifest(path)?;
    let spec = m
        .vision
        .clone()
        .ok_or_else(|| ForgeError::load("vision", "bundle manifest carries no vision spec"))?;
    let scope = m.scope.unwrap_or(TrainableScope::FullEncoder);
    let mut bundle = VisionBundle::zeros(&spec, scope)?;
    let m = load_into(path, &mut bundle)?;
    Ok((bundle, m))
}

/// Keys of `params` that are not listed as trainable.
pub fn frozen_keys<P: Parameters>(params: &P, trainable: &BTreeSet<String>) -> Vec<String> {
    params.param_names().into_iter().filter(|n| !trainable.contains(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::multimodal::init_bundle;

    #[test]
    fn decoder_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = init_model(&ModelSpec::toy(72), 7).unwrap();
        let p = dir.path().join("target.safetensors");
        save_checkpoint(&p, &m, Manifest::for_decoder(Role::Target, &m)).unwrap();
        let (back, man) = load_decoder(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(man.checksum, m.checksum());
        let bytes1 = fs::read(&p).unwrap();
        save_checkpoint(&p, &m, Manifest::for_decoder(Role::Target, &m)).unwrap();
        assert_eq!(bytes1, fs::read(&p).unwrap());
    }

    #[test]
    fn layer_count_mismatch_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ModelSpec::toy(72);
        spec.n_layers = 11;
        let m = init_model(&spec, 1).unwrap();
        let p = dir.path().join("m.safetensors");
        let mut man = Manifest::for_decoder(Role::Target, &m);
        man.spec.as_mut().unwrap().n_layers = 12;
        save_checkpoint(&p, &m, man).unwrap();
        match load_decoder(&p) {
            Err(ForgeError::Load { key, .. }) => assert_eq!(key, "layers.11.attn_norm"),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = init_model(&ModelSpec::toy(72), 1).unwrap();
        let p = dir.path().join("m.safetensors");
        let mut man = Manifest::for_decoder(Role::Target, &m);
        man.format_version = 99;
        save_checkpoint(&p, &m, man).unwrap();
        assert!(matches!(load_decoder(&p), Err(ForgeError::Load { key, .. }) if key == "format_version"));
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = init_bundle(&VisionSpec::toy(64), TrainableScope::LastKLayers(2), 3).unwrap();
        let p = dir.path().join("enc.safetensors");
        save_checkpoint(&p, &b, Manifest::for_bundle(&b)).unwrap();
        let (back, _) = load_bundle(&p).unwrap();
        assert_eq!(back, b);
    }
}
