//! Layer surgery: surrogates that replace a run of layers with one
//! translator block, control variants, and grafting a vision bundle onto a
//! decoder.

use std::collections::BTreeSet;

use ndarray::ArrayViewD;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Manifest, Role, SurgeryRecord};
use crate::error::{ForgeError, Result};
use crate::model::{layer_prefix, DecoderModel, EmbeddingOverride, Generation, HiddenTrace, ModelSpec};
use crate::multimodal::{assemble_sequence, ChatTemplate, MultimodalSequence, VisionBundle};
use crate::params::{digest_params, Parameters};
use crate::synth_data::tokenizer::EOT;
use crate::synth_data::{Raster, Tokenizer};

/// Replace target layers `first_replaced..=last_replaced` with one
/// translator initialised from `first_replaced`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurgeryPlan {
    pub first_replaced: usize,
    pub last_replaced: usize,
    pub translator_init_layer: usize,
}

impl SurgeryPlan {
    pub fn replaced(&self) -> usize {
        self.last_replaced - self.first_replaced + 1
    }

    pub fn surrogate_layers(&self, target_layers: usize) -> usize {
        target_layers - self.replaced() + 1
    }

    /// Surrogate parameter count over target parameter count.
    pub fn param_fraction(&self, spec: &ModelSpec) -> f64 {
        let (v, d, h) = (spec.vocab_size, spec.d_model, spec.mlp_hidden());
        let block = 4 * d * d + 3 * d * h + 2 * d;
        let fixed = 2 * v * d + d;
        let total = |layers: usize| (fixed + layers * block) as f64;
        total(self.surrogate_layers(spec.n_layers)) / total(spec.n_layers)
    }

    /// Target layer each surrogate layer was copied from. The translator maps
    /// to `None`.
    pub fn layer_origin(&self, target_layers: usize) -> Vec<Option<usize>> {
        let a = self.first_replaced;
        (0..self.surrogate_layers(target_layers))
            .map(|j| match j.cmp(&a) {
                std::cmp::Ordering::Less => Some(j),
                std::cmp::Ordering::Equal => None,
                std::cmp::Ordering::Greater => Some(j + self.replaced() - 1),
            })
            .collect()
    }
}

pub fn plan_surgery(spec: &ModelSpec, first_replaced: usize, last_replaced: usize) -> Result<SurgeryPlan> {
    spec.validate()?;
    let l = spec.n_layers;
    if first_replaced == 0 {
        return Err(ForgeError::Plan("layer 0 must be preserved".into()));
    }
    if last_replaced >= l - 1 {
        return Err(ForgeError::Plan(format!("the last layer ({}) must be preserved", l - 1)));
    }
    if first_replaced > last_replaced {
        return Err(ForgeError::Plan(format!(
            "inverted range: first {first_replaced} > last {last_replaced}"
        )));
    }
    Ok(SurgeryPlan {
        first_replaced,
        last_replaced,
        translator_init_layer: first_replaced,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub model: DecoderModel,
    pub trainable_mask: BTreeSet<String>,
    pub parent_checksum: String,
    pub plan: SurgeryPlan,
    pub target_layers: usize,
    pub control_variant: bool,
}

fn block_names(model: &DecoderModel, layer: usize) -> impl Iterator<Item = String> + '_ {
    let p = format!("{}.", layer_prefix(layer));
    model.param_names().into_iter().filter(move |n| n.starts_with(&p))
}

fn check_plan(target: &DecoderModel, plan: &SurgeryPlan) -> Result<()> {
    let l = target.n_layers();
    let ok = plan.first_replaced >= 1
        && plan.first_replaced <= plan.last_replaced
        && plan.last_replaced + 2 <= l
        && plan.translator_init_layer == plan.first_replaced;
    if !ok {
        return Err(ForgeError::Surgery(format!(
            "plan ({}, {}) does not fit a {l}-layer target",
            plan.first_replaced, plan.last_replaced
        )));
    }
    Ok(())
}

pub fn build_surrogate(target: &DecoderModel, plan: &SurgeryPlan) -> Result<SurrogateModel> {
    check_plan(target, plan)?;
    let l = target.n_layers();
    let origin = plan.layer_origin(l);
    let layers = origin
        .iter()
        .map(|o| target.layers[o.unwrap_or(plan.translator_init_layer)].clone())
        .collect::<Vec<_>>();
    let mut spec = target.spec.clone();
    spec.n_layers = layers.len();
    let model = DecoderModel::from_parts(
        spec,
        target.token_embedding.clone(),
        layers,
        target.final_norm.clone(),
        target.unembedding.clone(),
    )?;
    let trainable_mask = block_names(&model, plan.first_replaced).collect();
    Ok(SurrogateModel {
        model,
        trainable_mask,
        parent_checksum: target.checksum(),
        plan: *plan,
        target_layers: l,
        control_variant: false,
    })
}

/// Surrogate whose mask also opens every other layer below the translator:
/// `a − 2, a − 4, …` down to 0.
pub fn build_control_variant(target: &DecoderModel, plan: &SurgeryPlan) -> Result<SurrogateModel> {
    let mut s = build_surrogate(target, plan)?;
    let mut extra = Vec::new();
    let mut j = plan.first_replaced as isize - 2;
    while j >= 0 {
        extra.extend(block_names(&s.model, j as usize));
        j -= 2;
    }
    s.trainable_mask.extend(extra);
    s.control_variant = true;
    Ok(s)
}

impl SurrogateModel {
    /// Name of the target parameter a surrogate parameter was copied from;
    /// `None` for translator parameters.
    pub fn parent_name(&self, name: &str) -> Option<String> {
        let Some(rest) = name.strip_prefix("layers.") else {
            return Some(name.to_string());
        };
        let (idx, field) = rest.split_once('.')?;
        let j: usize = idx.parse().ok()?;
        let origin = self.plan.layer_origin(self.target_layers);
        origin.get(j).copied().flatten().map(|o| format!("{}.{field}", layer_prefix(o)))
    }

    /// Surrogate layers that hold copies of target layers, with their origin.
    pub fn layer_origin(&self) -> Vec<Option<usize>> {
        self.plan.layer_origin(self.target_layers)
    }

    pub fn translator_index(&self) -> usize {
        self.plan.first_replaced
    }

    /// Digest of every frozen surrogate parameter under its parent's name.
    pub fn frozen_digest(&self) -> String {
        let named: Vec<(String, ArrayViewD<f32>)> = self
            .model
            .named_params()
            .into_iter()
            .filter(|(n, _)| !self.trainable_mask.contains(n))
            .filter_map(|(n, t)| self.parent_name(&n).map(|p| (p, t)))
            .collect();
        digest_params(named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// The same digest computed from the parent itself.
    pub fn expected_frozen_digest(&self, target: &DecoderModel) -> Result<String> {
        if target.checksum() != self.parent_checksum {
            return Err(ForgeError::Surgery("target does not match the recorded parent checksum".into()));
        }
        let wanted: Vec<String> = self
            .model
            .param_names()
            .into_iter()
            .filter(|n| !self.trainable_mask.contains(n))
            .filter_map(|n| self.parent_name(&n))
            .collect();
        let params = target.named_params();
        let named: Vec<(&str, &ArrayViewD<f32>)> = wanted
            .iter()
            .map(|w| {
                params
                    .iter()
                    .find(|(n, _)| n == w)
                    .map(|(n, t)| (n.as_str(), t))
                    .ok_or_else(|| ForgeError::Surgery(format!("parent has no parameter {w}")))
            })
            .collect::<Result<_>>()?;
        Ok(digest_params(named.into_iter()))
    }

    /// Frozen parameters still equal the parent's, bit for bit.
    pub fn frozen_intact(&self, target: &DecoderModel) -> Result<bool> {
        Ok(self.frozen_digest() == self.expected_frozen_digest(target)?)
    }

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::for_decoder(Role::Surrogate, &self.model);
        m.parent_checksum = Some(self.parent_checksum.clone());
        m.trainable_keys = self.trainable_mask.iter().cloned().collect();
        m.surgery = Some(SurgeryRecord {
            first_replaced: self.plan.first_replaced,
            last_replaced: self.plan.last_replaced,
            target_layers: self.target_layers,
            control_variant: self.control_variant,
        });
        m
    }

    /// Rebuild from a loaded archive and its manifest.
    pub fn from_archive(model: DecoderModel, manifest: &Manifest) -> Result<Self> {
        let rec = manifest
            .surgery
            .as_ref()
            .ok_or_else(|| ForgeError::load("surgery", "surrogate manifest has no surgery record"))?;
        let parent_checksum = manifest
            .parent_checksum
            .clone()
            .ok_or_else(|| ForgeError::load("parent_checksum", "missing"))?;
        let plan = SurgeryPlan {
            first_replaced: rec.first_replaced,
            last_replaced: rec.last_replaced,
            translator_init_layer: rec.first_replaced,
        };
        if plan.surrogate_layers(rec.target_layers) != model.n_layers() {
            return Err(ForgeError::load("surgery", "layer count does not follow from the recorded plan"));
        }
        Ok(Self {
            model,
            trainable_mask: manifest.trainable_keys.iter().cloned().collect(),
            parent_checksum,
            plan,
            target_layers: rec.target_layers,
            control_variant: rec.control_variant,
        })
    }
}

/// A vision bundle composed with a decoder for inference. Both sides are
/// borrowed immutably.
#[derive(Debug, Clone, Copy)]
pub struct VlmAssembly<'a> {
    pub bundle: &'a VisionBundle,
    pub decoder: &'a DecoderModel,
}

pub fn graft<'a>(bundle: &'a VisionBundle, decoder: &'a DecoderModel) -> Result<VlmAssembly<'a>> {
    let out = bundle.adapter.w2.ncols();
    if out != decoder.spec.d_model {
        return Err(ForgeError::Graft(format!(
            "adapter emits width {out}, decoder expects {}",
            decoder.spec.d_model
        )));
    }
    Ok(VlmAssembly { bundle, decoder })
}

impl VlmAssembly<'_> {
    pub fn template(&self) -> ChatTemplate {
        ChatTemplate {
            n_patches: self.bundle.spec.n_patches(),
        }
    }

    pub fn image_overrides(&self, seq: &MultimodalSequence) -> Result<Vec<EmbeddingOverride>> {
        match (seq.image_span, &seq.image) {
            (Some((start, len)), Some(img)) => {
                let rows = self.bundle.embed_image(img)?;
                if rows.nrows() != len {
                    return Err(ForgeError::Input(format!("image span of {len} for {} patches", rows.nrows())));
                }
                Ok(vec![EmbeddingOverride { start, rows }])
            }
            (None, None) => Ok(Vec::new()),
            _ => Err(ForgeError::Input("image span and image must come together".into())),
        }
    }

    pub fn forward(&self, seq: &MultimodalSequence) -> Result<HiddenTrace> {
        let o = self.image_overrides(seq)?;
        self.decoder.forward_with_hidden(&seq.token_ids, &o)
    }

    /// Greedy answer to one question; stops at end-of-turn.
    pub fn answer(
        &self,
        tokenizer: &Tokenizer,
        image: Option<&Raster>,
        question: &str,
        max_new: usize,
    ) -> Result<Generation> {
        let seq = assemble_sequence(&self.template(), image, question, None, tokenizer)?;
        let o = self.image_overrides(&seq)?;
        self.decoder
            .generate_greedy(&seq.token_ids, &o, max_new, Some(tokenizer.special_id(EOT)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::multimodal::{init_bundle, TrainableScope, VisionSpec};

    fn target() -> DecoderModel {
        init_model(&ModelSpec::toy(72), 7).unwrap()
    }

    #[test]
    fn large_target_plans() {
        let mut spec = ModelSpec::toy(72);
        spec.n_layers = 28;
        let p = plan_surgery(&spec, 16, 26).unwrap();
        let origin = p.layer_origin(28);
        assert_eq!(origin.len(), 18);
        assert_eq!(origin[..16], (0..16).map(Some).collect::<Vec<_>>()[..]);
        assert_eq!(origin[16], None);
        assert_eq!(origin[17], Some(27));
        spec.n_layers = 80;
        let p = plan_surgery(&spec, 40, 78).unwrap();
        assert_eq!(p.layer_origin(80).last(), Some(&Some(79)));
        assert_eq!(p.surrogate_layers(80), 42);
        assert!(matches!(plan_surgery(&ModelSpec::toy(72), 0, 5), Err(ForgeError::Plan(_))));
        assert!(plan_surgery(&ModelSpec::toy(72), 3, 11).is_err());
        assert!(plan_surgery(&ModelSpec::toy(72), 6, 5).is_err());
    }

    #[test]
    fn surrogate_structure() {
        let t = target();
        let plan = plan_surgery(&t.spec, 6, 10).unwrap();
        let s = build_surrogate(&t, &plan).unwrap();
        // 0..=5, translator, 11
        assert_eq!(s.model.n_layers(), 8);
        for j in 0..6 {
            assert_eq!(s.model.layers[j], t.layers[j]);
        }
        assert_eq!(s.model.layers[6], t.layers[6]);
        assert_eq!(s.model.layers.last(), t.layers.last());
        let block = 4 * 64 * 64 + 3 * 64 * 256 + 2 * 64;
        assert_eq!(t.param_count() - s.model.param_count(), 4 * block);
        assert!(s.trainable_mask.iter().all(|n| n.starts_with("layers.6.")));
        assert_eq!(s.trainable_mask.len(), 9);
        assert!(s.frozen_intact(&t).unwrap());
        assert_eq!(s.parent_name("layers.6.wq"), None);
        assert_eq!(s.parent_name("layers.7.wq"), Some("layers.11.wq".into()));
        assert_eq!(s.parent_name("unembedding"), Some("unembedding".into()));
    }

    #[test]
    fn control_variant_masks() {
        let t = target();
        let plan = plan_surgery(&t.spec, 6, 10).unwrap();
        let c = build_control_variant(&t, &plan).unwrap();
        let layers: BTreeSet<&str> = c.trainable_mask.iter().map(|n| n.split('.').nth(1).unwrap()).collect();
        assert_eq!(layers, ["0", "2", "4", "6"].into_iter().collect());
        assert_eq!(c.model, build_surrogate(&t, &plan).unwrap().model);
        let edge = build_control_variant(&t, &plan_surgery(&t.spec, 1, 10).unwrap()).unwrap();
        assert!(edge.trainable_mask.iter().all(|n| n.starts_with("layers.1.")));
    }

    #[test]
    fn graft_checks_width() {
        let t = target();
        let mut vs = VisionSpec::toy(48);
        vs.adapter_hidden = 48;
        let b = init_bundle(&vs, TrainableScope::FullEncoder, 1).unwrap();
        assert!(matches!(graft(&b, &t), Err(ForgeError::Graft(_))));
        let b = init_bundle(&VisionSpec::toy(64), TrainableScope::FullEncoder, 1).unwrap();
        assert!(graft(&b, &t).is_ok());
    }
}
