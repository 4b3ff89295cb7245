//! Staged training: text pretraining of the target, adapter + translator
//! pretraining, encoder training on a frozen decoder, and full-decoder
//! fine-tuning.

pub mod data;
mod loss;
mod optim;
mod state;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use data::{mix_half_and_half, text_sequences, vqa_sequences, BatchOrder};
pub use loss::{batch_targets, dynamic_loss_weights, loss_and_grad, masked_weighted_loss, Targets};
pub use optim::{clip_scale, make_optimizer_and_schedule, AdamW, Part, Schedule, StepStats, BETA1, BETA2, EPS};
pub use state::{read_state_meta, StateMeta};

use crate::checkpoint::StageRecord;
use crate::error::{ForgeError, Result};
use crate::model::{DecoderModel, GradPlan};
use crate::multimodal::{MultimodalSequence, TrainableScope, VisionBundle};
use crate::nn::Layout;
use crate::params::{zeros_like, Parameters};
use crate::surgery::SurrogateModel;

/// Fractions of the stage budget at which stage 3 is evaluated.
pub const STAGE3_EVAL_GRID: [f64; 5] = [0.1, 0.2, 0.3, 0.6, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Text-only language-model training of the target itself.
    TargetLm,
    S1AdapterTranslator,
    S2Encoder,
    S3Decoder,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TargetLm => "target_lm",
            Stage::S1AdapterTranslator => "s1_adapter_translator",
            Stage::S2Encoder => "s2_encoder",
            Stage::S3Decoder => "s3_decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: f64,
    pub warmup_ratio: f64,
    pub data_fraction: f64,
    pub weight_ord: f64,
    pub use_dynamic_weights: bool,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl StageConfig {
    /// Toy defaults for `stage`: batch 32, 3% warmup, clip 1.0.
    pub fn toy(stage: Stage) -> Self {
        let learning_rate = match stage {
            Stage::TargetLm => 2e-3,
            Stage::S1AdapterTranslator => 1e-3,
            Stage::S2Encoder => 5e-4,
            Stage::S3Decoder => 2e-4,
        };
        Self {
            stage,
            learning_rate,
            batch_size: 32,
            epochs: 1.0,
            warmup_ratio: 0.03,
            data_fraction: 1.0,
            weight_ord: 0.5,
            use_dynamic_weights: false,
            grad_clip_norm: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ForgeError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.epochs.is_finite() && self.epochs >= 0.0) {
            return bad(format!("epochs must be non-negative, got {}", self.epochs));
        }
        if !(0.0..=0.5).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} outside [0, 0.5]", self.warmup_ratio));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!("data_fraction {} outside (0, 1]", self.data_fraction));
        }
        if !(self.weight_ord.is_finite() && self.weight_ord >= 0.0) {
            return bad(format!("weight_ord must be non-negative, got {}", self.weight_ord));
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm >= 0.0) {
            return bad(format!("grad_clip_norm must be non-negative, got {}", self.grad_clip_norm));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }

    fn ord(&self) -> Option<f64> {
        self.use_dynamic_weights.then_some(self.weight_ord)
    }

    /// `⌊epochs · ⌊⌊fraction·n⌋ / batch⌋⌋`
    pub fn total_steps(&self, n_items: usize) -> Result<usize> {
        let order = BatchOrder::new(n_items, self.data_fraction, self.batch_size, self.seed)?;
        Ok((self.epochs * order.steps_per_epoch() as f64).floor() as usize)
    }

    pub fn stage_record(&self, steps: usize, decoder_checksum: Option<String>) -> StageRecord {
        StageRecord {
            stage: self.stage.name().to_string(),
            steps,
            data_fraction: self.data_fraction,
            seed: self.seed,
            config_digest: self.digest(),
            decoder_checksum,
        }
    }

    fn expect(&self, stage: Stage) -> Result<()> {
        self.validate()?;
        if self.stage != stage {
            return Err(ForgeError::Config(format!(
                "config is for stage {}, runner expects {}",
                self.stage.name(),
                stage.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// 1-based count of completed steps.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub grad_norms: BTreeMap<String, f64>,
    /// Seconds since the start of this run (excluded from determinism checks).
    pub elapsed: f64,
}

impl TrainRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_numbers(&self, other: &Self) -> bool {
        self.step == other.step
            && self.loss.to_bits() == other.loss.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
            && self.grad_norms == other.grad_norms
    }
}

pub fn write_records(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| ForgeError::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| ForgeError::io(path, e))?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<TrainRecord>> {
    let text = fs::read_to_string(path).map_err(|e| ForgeError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Loss and gradients of one packed batch.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub loss: f64,
    pub n_targets: usize,
    /// Present when the decoder has trainable parameters.
    pub decoder: Option<DecoderModel>,
    /// Present when a bundle is being trained; all zeros for batches without
    /// images.
    pub bundle: Option<VisionBundle>,
}

/// Forward and backward over `seqs` packed into one batch. Image rows come
/// from `bundle`; bundle gradients are produced when `train_bundle` is set.
pub fn batch_gradients(
    decoder: &DecoderModel,
    decoder_trainable: &BTreeSet<String>,
    bundle: Option<&VisionBundle>,
    train_bundle: bool,
    seqs: &[&MultimodalSequence],
    weight_ord: Option<f64>,
) -> Result<BatchGrads> {
    let layout = Layout::from_lengths(seqs.iter().map(|s| s.len()));
    let tokens: Vec<u32> = seqs.iter().flat_map(|s| s.token_ids.iter().copied()).collect();
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= decoder.spec.vocab_size) {
        return Err(ForgeError::Input(format!("token id {t} outside the vocabulary")));
    }
    let mut x0 = decoder.embed(&tokens);
    let mut skip = vec![false; tokens.len()];
    let mut spans = Vec::new();
    let mut images = Vec::new();
    let mut offset = 0;
    for s in seqs {
        match (s.image_span, &s.image) {
            (Some((start, len)), Some(img)) => {
                spans.push((offset + start, len));
                images.push(img);
                skip[offset + start..offset + start + len].fill(true);
            }
            (None, None) => {}
            _ => return Err(ForgeError::Input("image span and image must come together".into())),
        }
        offset += s.len();
    }
    let vision = if images.is_empty() {
        None
    } else {
        let b = bundle.ok_or_else(|| ForgeError::Input("batch has images but no vision bundle".into()))?;
        let (rows, cache) = b.forward_train(&images)?;
        let mut r = 0;
        for &(start, len) in &spans {
            if rows.ncols() != x0.ncols() || len != b.spec.n_patches() {
                return Err(ForgeError::Input("image rows do not fit the sequence".into()));
            }
            x0.slice_mut(s![start..start + len, ..]).assign(&rows.slice(s![r..r + len, ..]));
            r += len;
        }
        Some((b, cache))
    };

    let (logits, cache) = decoder.forward_train(x0, &layout);
    let targets = batch_targets(seqs, weight_ord)?;
    let (loss, dlogits) = loss_and_grad(&logits.view(), &targets, true)?;
    let dlogits = dlogits.expect("gradient requested");

    let need_input = train_bundle && vision.is_some();
    let plan = GradPlan::from_trainable(decoder, decoder_trainable, need_input);
    let mut dgrads = zeros_like(decoder);
    let dx0 = decoder.backward_train(&cache, &dlogits, &mut dgrads, &plan);
    if plan.token_embedding {
        let dx0 = dx0.as_ref().expect("input gradient for embedding training");
        DecoderModel::accumulate_embedding_grad(&mut dgrads, &tokens, dx0, &skip);
    }
    let bgrads = match (train_bundle, bundle) {
        (true, Some(b)) => {
            let mut g = zeros_like(b);
            if let (Some((b, vcache)), Some(dx0)) = (&vision, &dx0) {
                let n = b.spec.n_patches();
                let mut dout = Array2::zeros((spans.len() * n, dx0.ncols()));
                for (i, &(start, len)) in spans.iter().enumerate() {
                    dout.slice_mut(s![i * n..(i + 1) * n, ..]).assign(&dx0.slice(s![start..start + len, ..]));
                }
                b.backward_train(vcache, &dout, &mut g);
            }
            Some(g)
        }
        (true, None) => return Err(ForgeError::Input("bundle training requested without a bundle".into())),
        _ => None,
    };
    Ok(BatchGrads {
        loss,
        n_targets: targets.len(),
        decoder: (!decoder_trainable.is_empty()).then_some(dgrads),
        bundle: bgrads,
    })
}

/// Mutable access for a component that trains, shared access otherwise.
pub enum Slot<'a, T> {
    Frozen(&'a T),
    Train { params: &'a mut T, trainable: BTreeSet<String> },
}

impl<T> Slot<'_, T> {
    fn get(&self) -> &T {
        match self {
            Slot::Frozen(p) => p,
            Slot::Train { params, .. } => params,
        }
    }

    fn trainable(&self) -> Option<&BTreeSet<String>> {
        match self {
            Slot::Frozen(_) => None,
            Slot::Train { trainable, .. } => Some(trainable),
        }
    }
}

/// Snapshot callback: `(steps_done, decoder, bundle)`.
pub type EvalHook<'h> = dyn FnMut(usize, &DecoderModel, Option<&VisionBundle>) -> Result<()> + 'h;

#[derive(Default)]
pub struct RunHooks<'h> {
    /// Step counts after which `on_eval` runs.
    pub eval_at: Vec<usize>,
    pub on_eval: Option<&'h mut EvalHook<'h>>,
    /// Training-state file, written every `save_every` steps, on a
    /// non-finite loss and on early stop.
    pub state_path: Option<PathBuf>,
    pub save_every: usize,
    /// Restore this state before the first step.
    pub resume_from: Option<PathBuf>,
    /// Stop after this many completed steps (simulated interruption).
    pub stop_after: Option<usize>,
}

impl RunHooks<'_> {
    /// Evaluation at `fractions` of a `total`-step budget.
    pub fn eval_steps(fractions: &[f64], total: usize) -> Vec<usize> {
        let mut v: Vec<usize> = fractions.iter().map(|f| (f * total as f64).round() as usize).collect();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub records: Vec<TrainRecord>,
    pub total_steps: usize,
    /// Completed steps, counting those done before a resume.
    pub steps_done: usize,
}

const DECODER_PART: &str = "decoder";
const BUNDLE_PART: &str = "bundle";

/// The shared loop behind every stage runner.
pub fn train_loop(
    mut decoder: Slot<DecoderModel>,
    mut bundle: Option<Slot<VisionBundle>>,
    data: &[MultimodalSequence],
    cfg: &StageConfig,
    mut hooks: RunHooks,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let order = BatchOrder::new(data.len(), cfg.data_fraction, cfg.batch_size, cfg.seed)?;
    let total = cfg.total_steps(data.len())?;
    let dec_trainable = decoder.trainable().cloned().unwrap_or_default();
    let bun_trainable = bundle.as_ref().and_then(|b| b.trainable().cloned());
    let mut opt = {
        let mut parts: Vec<(&str, &dyn Parameters, &BTreeSet<String>)> = Vec::new();
        if !dec_trainable.is_empty() {
            parts.push((DECODER_PART, decoder.get(), &dec_trainable));
        }
        if let (Some(b), Some(t)) = (&bundle, &bun_trainable) {
            parts.push((BUNDLE_PART, b.get(), t));
        }
        make_optimizer_and_schedule(cfg.learning_rate, cfg.warmup_ratio, cfg.grad_clip_norm, total, &parts)?
    };
    let meta_at = |step: usize| StateMeta {
        stage: cfg.stage.name().to_string(),
        config_digest: cfg.digest(),
        step,
        total_steps: total,
    };
    let state_path = hooks.state_path.clone();
    let save = |decoder: &Slot<DecoderModel>, bundle: &Option<Slot<VisionBundle>>, opt: &AdamW, step: usize| -> Result<()> {
        let Some(path) = &state_path else {
            return Ok(());
        };
        let mut parts: Vec<(&str, &dyn Parameters)> = Vec::new();
        if decoder.trainable().is_some() {
            parts.push((DECODER_PART, decoder.get()));
        }
        if let Some(b) = bundle.as_ref().filter(|b| b.trainable().is_some()) {
            parts.push((BUNDLE_PART, b.get()));
        }
        state::save_state(path, &meta_at(step), &parts, opt)
    };

    let mut start = 0;
    if let Some(path) = &hooks.resume_from {
        let meta = read_state_meta(path)?;
        if meta.config_digest != cfg.digest() || meta.total_steps != total {
            return Err(ForgeError::Protocol(format!(
                "training state {} was written by a different stage configuration",
                path.display()
            )));
        }
        let mut parts: Vec<(&str, &mut dyn Parameters)> = Vec::new();
        if let Slot::Train { params, .. } = &mut decoder {
            parts.push((DECODER_PART, &mut **params));
        }
        if let Some(Slot::Train { params, .. }) = &mut bundle {
            parts.push((BUNDLE_PART, &mut **params));
        }
        start = state::load_state(path, &mut parts, &mut opt)?.step;
    }

    let ord = cfg.ord();
    let train_bundle = bun_trainable.is_some();
    let clock = Instant::now();
    let mut records = Vec::new();
    let end = hooks.stop_after.map_or(total, |s| s.min(total));
    for step in start..end {
        let batch: Vec<&MultimodalSequence> = order.batch(step).into_iter().map(|i| &data[i]).collect();
        let g = batch_gradients(
            decoder.get(),
            &dec_trainable,
            bundle.as_ref().map(|b| b.get()),
            train_bundle,
            &batch,
            ord,
        )?;
        if !g.loss.is_finite() {
            save(&decoder, &bundle, &opt, step)?;
            return Err(ForgeError::NonFinite { step });
        }
        let lr = opt.schedule.lr(step);
        let stats = {
            let mut parts = Vec::new();
            if let (Slot::Train { params, trainable }, Some(grads)) = (&mut decoder, &g.decoder) {
                parts.push(Part {
                    name: DECODER_PART,
                    params: &mut **params,
                    grads,
                    trainable,
                });
            }
            if let (Some(Slot::Train { params, trainable }), Some(grads)) = (&mut bundle, &g.bundle) {
                parts.push(Part {
                    name: BUNDLE_PART,
                    params: &mut **params,
                    grads,
                    trainable,
                });
            }
            opt.step(&mut parts)
        };
        records.push(TrainRecord {
            step: step + 1,
            loss: g.loss,
            lr,
            grad_norm: stats.grad_norm,
            grad_norms: stats.part_norms,
            elapsed: clock.elapsed().as_secs_f64(),
        });
        log::debug!("{} step {}/{} loss {:.4}", cfg.stage.name(), step + 1, total, g.loss);
        let done = step + 1;
        if hooks.save_every > 0 && done % hooks.save_every == 0 {
            save(&decoder, &bundle, &opt, done)?;
        }
        if hooks.eval_at.contains(&done) {
            if let Some(f) = hooks.on_eval.as_mut() {
                f(done, decoder.get(), bundle.as_ref().map(|b| b.get()))?;
            }
        }
    }
    if end < total {
        save(&decoder, &bundle, &opt, end)?;
    }
    Ok(StageOutcome {
        records,
        total_steps: total,
        steps_done: end,
    })
}

fn all_names(p: &dyn Parameters) -> BTreeSet<String> {
    p.param_names().into_iter().collect()
}

/// Language-model training of the target on text sequences; every parameter
/// trains.
pub fn run_target_lm(
    target: &mut DecoderModel,
    text: &[MultimodalSequence],
    cfg: &StageConfig,
    hooks: RunHooks,
) -> Result<StageOutcome> {
    cfg.expect(Stage::TargetLm)?;
    let trainable = all_names(target);
    train_loop(Slot::Train { params: target, trainable }, None, text, cfg, hooks)
}

/// Adapter plus the surrogate's trainable layers (translator, or the control
/// variant's layers) on the mixed corpus. The encoder stays frozen.
pub fn run_stage1(
    surrogate: &mut SurrogateModel,
    bundle: &mut VisionBundle,
    mixed: &[MultimodalSequence],
    cfg: &StageConfig,
    hooks: RunHooks,
) -> Result<StageOutcome> {
    let trainable = surrogate.trainable_mask.clone();
    run_stage1_on(&mut surrogate.model, trainable, bundle, mixed, cfg, hooks)
}

/// Stage 1 on any decoder with an explicit trainable set; the baseline path
/// passes the target with an empty set (adapter only).
pub fn run_stage1_on(
    decoder: &mut DecoderModel,
    decoder_trainable: BTreeSet<String>,
    bundle: &mut VisionBundle,
    mixed: &[MultimodalSequence],
    cfg: &StageConfig,
    hooks: RunHooks,
) -> Result<StageOutcome> {
    cfg.expect(Stage::S1AdapterTranslator)?;
    let scope = bundle.scope;
    bundle.scope = TrainableScope::AdapterOnly;
    let bun_trainable = bundle.trainable_names().into_iter().collect();
    let dec = if decoder_trainable.is_empty() {
        Slot::Frozen(&*decoder)
    } else {
        Slot::Train {
            params: decoder,
            trainable: decoder_trainable,
        }
    };
    let out = train_loop(
        dec,
        Some(Slot::Train {
            params: &mut *bundle,
            trainable: bun_trainable,
        }),
        mixed,
        cfg,
        hooks,
    );
    bundle.scope = scope;
    out
}

/// Bundle training per its scope against a frozen decoder.
pub fn run_stage2(
    bundle: &mut VisionBundle,
    decoder: &DecoderModel,
    vqa: &[MultimodalSequence],
    cfg: &StageConfig,
    hooks: RunHooks,
) -> Result<StageOutcome> {
    cfg.expect(Stage::S2Encoder)?;
    let trainable = bundle.trainable_names().into_iter().collect();
    train_loop(
        Slot::Frozen(decoder),
        Some(Slot::Train { params: bundle, trainable }),
        vqa,
        cfg,
        hooks,
    )
}

/// The full target (embeddings included) and the bundle per its scope.
pub fn run_stage3(
    target: &mut DecoderModel,
    bundle: &mut VisionBundle,
    vqa: &[MultimodalSequence],
    cfg: &StageConfig,
    hooks: RunHooks,
) -> Result<StageOutcome> {
    cfg.expect(Stage::S3Decoder)?;
    let dec_trainable = all_names(target);
    let bun_trainable = bundle.trainable_names().into_iter().collect();
    train_loop(
        Slot::Train {
            params: target,
            trainable: dec_trainable,
        },
        Some(Slot::Train {
            params: bundle,
            trainable: bun_trainable,
        }),
        vqa,
        cfg,
        hooks,
    )
}
