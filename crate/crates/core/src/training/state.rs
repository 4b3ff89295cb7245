//! Resumable training state: parameters of every trained component, Adam
//! moments and the step counter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD};
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use crate::checkpoint::{load_tensors, manifest_path, save_tensors};
use crate::error::{ForgeError, Result};
use crate::params::Parameters;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateMeta {
    pub stage: String,
    pub config_digest: String,
    /// Steps completed when the state was written.
    pub step: usize,
    pub total_steps: usize,
}

pub(super) fn save_state(
    path: &Path,
    meta: &StateMeta,
    parts: &[(&str, &dyn Parameters)],
    opt: &AdamW,
) -> Result<()> {
    let mut tensors: Vec<(String, ArrayViewD<f32>)> = Vec::new();
    for (part, p) in parts {
        for (name, t) in p.named_params() {
            tensors.push((format!("{part}.{name}"), t));
        }
    }
    for (k, t) in &opt.m {
        tensors.push((format!("adam.m.{k}"), t.view()));
    }
    for (k, t) in &opt.v {
        tensors.push((format!("adam.v.{k}"), t.view()));
    }
    save_tensors(path, &tensors)?;
    let mpath = manifest_path(path);
    fs::write(&mpath, serde_json::to_vec_pretty(meta)?).map_err(|e| ForgeError::io(&mpath, e))
}

pub fn read_state_meta(path: &Path) -> Result<StateMeta> {
    let mpath = manifest_path(path);
    let bytes = fs::read(&mpath).map_err(|e| ForgeError::io(&mpath, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Restores parameters and moments in place. Every key of the optimizer and
/// of each part must be present with matching shape.
pub(super) fn load_state(path: &Path, parts: &mut [(&str, &mut dyn Parameters)], opt: &mut AdamW) -> Result<StateMeta> {
    let meta = read_state_meta(path)?;
    let mut tensors = load_tensors(path)?;
    let mut take = |key: String, shape: &[usize]| -> Result<ArrayD<f32>> {
        let t = tensors
            .remove(&key)
            .ok_or_else(|| ForgeError::load(key.clone(), "missing from training state"))?;
        if t.shape() != shape {
            return Err(ForgeError::load(key, format!("shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    for (part, p) in parts.iter_mut() {
        for (name, mut slot) in p.named_params_mut() {
            let shape = slot.shape().to_vec();
            slot.assign(&take(format!("{part}.{name}"), &shape)?);
        }
    }
    let restore = |moments: &mut BTreeMap<String, ArrayD<f32>>, prefix: &str, take: &mut dyn FnMut(String, &[usize]) -> Result<ArrayD<f32>>| -> Result<()> {
        for (k, t) in moments.iter_mut() {
            let shape = t.shape().to_vec();
            *t = take(format!("{prefix}{k}"), &shape)?;
        }
        Ok(())
    };
    restore(&mut opt.m, "adam.m.", &mut take)?;
    restore(&mut opt.v, "adam.v.", &mut take)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(ForgeError::load(extra.clone(), "unexpected key in training state"));
    }
    opt.step = meta.step;
    Ok(meta)
}
