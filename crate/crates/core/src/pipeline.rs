//! The reference experiment end to end: target training, trajectories,
//! surgery, encoder training on every decoder, the grafting comparison and
//! both stage-3 paths.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Manifest, Role};
use crate::error::{ForgeError, Result};
use crate::eval_report::{
    convergence_accounting, curves_csv, curves_svg, eval_text, eval_vqa, grafting_comparison, write_json,
    AssemblyResponder, Comparison, Condition, ConvergenceSummary, EvalPoint, PathRun, StageCost, CONTROL_GRAFTED,
    EARLY_GRAFTED, LATE_GRAFTED, LATE_PAIRED, TARGET_PAIRED,
};
use crate::model::{init_model, DecoderModel, ModelSpec};
use crate::multimodal::{assemble_sequence, init_bundle, ChatTemplate, MultimodalSequence, TrainableScope, VisionBundle, VisionSpec};
use crate::params::{changed_params, Parameters};
use crate::surgery::{build_control_variant, build_surrogate, graft, plan_surgery, SurrogateModel};
use crate::synth_data::{Corpora, DataConfig, TextInstruction, Tokenizer, VqaInstruction};
use crate::training::{
    mix_half_and_half, run_stage1, run_stage1_on, run_stage2, run_stage3, run_target_lm, text_sequences, vqa_sequences,
    write_records, RunHooks, Stage, StageConfig, StageOutcome, STAGE3_EVAL_GRID,
};
use crate::trajectory::{
    generate_free_running_samples, prediction_trajectory, FeedMode, KlForm, TrajectorySample, TrajectorySummary,
    TransitionTolerances,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    pub first_replaced: usize,
    pub last_replaced: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub n_samples: usize,
    #[serde(default)]
    pub tolerances: TransitionTolerances,
    /// Continuation length for free-running samples.
    pub max_new: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out items scored in the comparison and the stage-3 curves.
    pub n_vqa: usize,
    pub n_text: usize,
    /// Convergence threshold; the baseline's final accuracy when absent.
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    /// Seeds model and bundle initialisation.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub vision: VisionSpec,
    pub stage2_scope: TrainableScope,
    pub stage3_scope: TrainableScope,
    pub target: StageConfig,
    pub trajectory: TrajectoryConfig,
    pub late: PlanSpec,
    pub early: PlanSpec,
    pub s1: StageConfig,
    pub s2: StageConfig,
    pub s3: StageConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.vision.validate()?;
        let stages = [
            (&self.target, Stage::TargetLm),
            (&self.s1, Stage::S1AdapterTranslator),
            (&self.s2, Stage::S2Encoder),
            (&self.s3, Stage::S3Decoder),
        ];
        for (c, want) in stages {
            c.validate()?;
            if c.stage != want {
                return Err(ForgeError::Config(format!("expected a {} config, found {}", want.name(), c.stage.name())));
            }
        }
        for p in [self.late, self.early] {
            plan_surgery(&self.model, p.first_replaced, p.last_replaced)?;
        }
        if self.vision.out_width != self.model.d_model {
            return Err(ForgeError::Config("vision out_width must equal the decoder width".into()));
        }
        if self.eval.n_vqa == 0 || self.eval.n_text == 0 || self.trajectory.n_samples < 2 {
            return Err(ForgeError::Config("evaluation sizes must be positive and trajectories need 2+ samples".into()));
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let c: Self = serde_json::from_slice(bytes).map_err(|e| ForgeError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub before: f64,
    pub surrogate_after: f64,
    pub baseline_after: f64,
    pub surrogate_drop: f64,
    pub baseline_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub name: String,
    pub corpus_manifest: String,
    pub target_text_acc: f64,
    pub trajectories: Vec<TrajectorySummary>,
    /// Named freeze checks, `true` when the frozen parameters were untouched.
    pub freeze_checks: BTreeMap<String, bool>,
    pub comparison: Comparison,
    pub surrogate_path: PathRun,
    pub baseline_path: PathRun,
    pub convergence: ConvergenceSummary,
    pub degradation: Degradation,
    /// Checkpoint file → parameter checksum.
    pub checkpoints: BTreeMap<String, String>,
}

struct Ctx {
    out: PathBuf,
    checkpoints: BTreeMap<String, String>,
}

impl Ctx {
    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.out.join(sub);
        fs::create_dir_all(&d).map_err(|e| ForgeError::io(&d, e))?;
        Ok(d)
    }

    fn save<P: Parameters>(&mut self, rel: &str, params: &P, manifest: Manifest) -> Result<()> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| ForgeError::io(parent, e))?;
        }
        let m = save_checkpoint(&path, params, manifest)?;
        self.checkpoints.insert(rel.to_string(), m.checksum);
        Ok(())
    }

    fn records(&self, rel: &str, out: &StageOutcome) -> Result<()> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| ForgeError::io(parent, e))?;
        }
        write_records(&path, &out.records)
    }
}

fn stage_cost(stage: &str, o: &StageOutcome) -> StageCost {
    StageCost {
        stage: stage.into(),
        steps: o.steps_done,
        seconds: o.records.last().map_or(0.0, |r| r.elapsed),
    }
}

fn progress(msg: &str) {
    log::info!("{msg}");
}

/// Trajectories of the target in both feeding modes.
pub fn target_trajectories(
    target: &DecoderModel,
    tokenizer: &Tokenizer,
    items: &[TextInstruction],
    cfg: &TrajectoryConfig,
) -> Result<Vec<crate::trajectory::TrajectoryResult>> {
    let text_t = ChatTemplate { n_patches: 0 };
    let take = &items[..cfg.n_samples.min(items.len())];
    let teacher: Vec<TrajectorySample> = text_sequences(take, tokenizer, &text_t)?
        .into_iter()
        .map(|s| TrajectorySample {
            token_ids: s.token_ids,
            source: FeedMode::TeacherForced,
        })
        .collect();
    let prompts: Vec<Vec<u32>> = take
        .iter()
        .map(|i| assemble_sequence(&text_t, None, &i.question, None, tokenizer).map(|s| s.token_ids))
        .collect::<Result<_>>()?;
    let free = generate_free_running_samples(target, &prompts, cfg.max_new)?;
    Ok(vec![
        prediction_trajectory(target, &teacher, cfg.tolerances, KlForm::PositionSum)?,
        prediction_trajectory(target, &free, cfg.tolerances, KlForm::PositionSum)?,
    ])
}

fn eval_curve_hook<'a>(
    tokenizer: &'a Tokenizer,
    vqa: &'a [VqaInstruction],
    text: &'a [TextInstruction],
    total: usize,
    points: &'a mut Vec<EvalPoint>,
) -> impl FnMut(usize, &DecoderModel, Option<&VisionBundle>) -> Result<()> + 'a {
    move |step, decoder, bundle| {
        let bundle = bundle.ok_or_else(|| ForgeError::Protocol("stage-3 evaluation needs a bundle".into()))?;
        let r = AssemblyResponder {
            assembly: graft(bundle, decoder)?,
            tokenizer,
        };
        let vqa_acc = eval_vqa(&r, vqa)?.overall;
        let text_acc = eval_text(decoder, tokenizer, text)?.overall;
        let data_pct = 100.0 * step as f64 / total as f64;
        progress(&format!("  eval at {data_pct:.0}%: vqa {vqa_acc:.3} text {text_acc:.3}"));
        points.push(EvalPoint {
            step,
            data_pct,
            vqa_acc,
            text_acc: Some(text_acc),
        });
        Ok(())
    }
}

/// Runs the whole reference experiment, writing every artifact under `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let mut ctx = Ctx {
        out: out.to_path_buf(),
        checkpoints: BTreeMap::new(),
    };
    let tok = Tokenizer::standard();
    if tok.vocab_size() != cfg.model.vocab_size {
        return Err(ForgeError::Config(format!(
            "model vocab_size {} differs from the tokenizer's {}",
            cfg.model.vocab_size,
            tok.vocab_size()
        )));
    }

    progress("generating corpora");
    let mut corpora = Corpora::generate(&cfg.data)?;
    corpora.write(&ctx.dir("data")?)?;
    let corpus_digest = corpora.manifest.digest();
    let template = ChatTemplate {
        n_patches: cfg.vision.n_patches(),
    };
    let text_train = text_sequences(&corpora.text_train, &tok, &template)?;
    let vqa_train = vqa_sequences(&corpora.vqa_train, &tok, &template)?;
    check_lengths(&text_train, &cfg.model)?;
    check_lengths(&vqa_train, &cfg.model)?;
    let mixed = mix_half_and_half(&vqa_train, &text_train);
    let vqa_eval = &corpora.vqa_eval[..cfg.eval.n_vqa.min(corpora.vqa_eval.len())];
    let text_eval = &corpora.text_eval[..cfg.eval.n_text.min(corpora.text_eval.len())];

    progress("training the target");
    let mut target = init_model(&cfg.model, cfg.seed)?;
    let o = run_target_lm(&mut target, &text_train, &cfg.target, RunHooks::default())?;
    ctx.records("records/target.jsonl", &o)?;
    let mut m = Manifest::for_decoder(Role::Target, &target);
    m.provenance.push(cfg.target.stage_record(o.steps_done, None));
    ctx.save("target.safetensors", &target, m)?;
    let target_text_acc = eval_text(&target, &tok, text_eval)?.overall;
    progress(&format!("target text accuracy {target_text_acc:.3}"));

    progress("trajectories");
    let traj = target_trajectories(&target, &tok, &corpora.text_eval, &cfg.trajectory)?;
    let tdir = ctx.dir("trajectory")?;
    for t in &traj {
        t.write(&tdir, t.mode.name())?;
    }

    let late_plan = plan_surgery(&target.spec, cfg.late.first_replaced, cfg.late.last_replaced)?;
    let early_plan = plan_surgery(&target.spec, cfg.early.first_replaced, cfg.early.last_replaced)?;
    let surrogates = [
        ("late", build_surrogate(&target, &late_plan)?),
        ("early", build_surrogate(&target, &early_plan)?),
        ("control", build_control_variant(&target, &late_plan)?),
    ];
    let bundle0 = init_bundle(&cfg.vision, cfg.stage2_scope, cfg.seed.wrapping_add(1))?;
    let mut freeze_checks = BTreeMap::new();

    // Encoder training (stages 1 and 2) with the target itself.
    progress("stages 1-2 on the target");
    let mut target_bundle = bundle0.clone();
    let o1 = run_stage1_on(&mut target.clone(), Default::default(), &mut target_bundle, &mixed, &cfg.s1, RunHooks::default())?;
    ctx.records("records/target_s1.jsonl", &o1)?;
    let baseline_start = target_bundle.clone();
    let mut bm = Manifest::for_bundle(&baseline_start);
    bm.provenance.push(cfg.s1.stage_record(o1.steps_done, Some(target.checksum())));
    ctx.save("bundles/target_s1.safetensors", &baseline_start, bm.clone())?;
    let t_sum = target.checksum();
    let o2 = run_stage2(&mut target_bundle, &target, &vqa_train, &cfg.s2, RunHooks::default())?;
    freeze_checks.insert("target_s2_decoder".into(), target.checksum() == t_sum);
    ctx.records("records/target_s2.jsonl", &o2)?;
    bm.provenance.push(cfg.s2.stage_record(o2.steps_done, Some(t_sum.clone())));
    ctx.save("bundles/target_s2.safetensors", &target_bundle, bm)?;

    let mut trained: BTreeMap<&str, (SurrogateModel, VisionBundle, StageCost, StageCost)> = BTreeMap::new();
    for (name, mut s) in surrogates {
        progress(&format!("stages 1-2 on surrogate {name}"));
        let mut b = bundle0.clone();
        let o1 = run_stage1(&mut s, &mut b, &mixed, &cfg.s1, RunHooks::default())?;
        freeze_checks.insert(format!("{name}_s1_frozen"), s.frozen_intact(&target)?);
        ctx.records(&format!("records/{name}_s1.jsonl"), &o1)?;
        let mut sm = s.manifest();
        sm.provenance.push(cfg.s1.stage_record(o1.steps_done, None));
        ctx.save(&format!("surrogates/{name}.safetensors"), &s.model, sm)?;
        let enc_before = b.clone();
        let d_sum = s.model.checksum();
        let o2 = run_stage2(&mut b, &s.model, &vqa_train, &cfg.s2, RunHooks::default())?;
        freeze_checks.insert(format!("{name}_s2_decoder"), s.model.checksum() == d_sum);
        let allowed = b.trainable_names();
        freeze_checks.insert(
            format!("{name}_s2_bundle_scope"),
            changed_params(&b, &enc_before).iter().all(|n| allowed.contains(n)),
        );
        ctx.records(&format!("records/{name}_s2.jsonl"), &o2)?;
        let mut bm = Manifest::for_bundle(&b);
        bm.provenance.push(cfg.s1.stage_record(o1.steps_done, Some(d_sum.clone())));
        bm.provenance.push(cfg.s2.stage_record(o2.steps_done, Some(d_sum)));
        ctx.save(&format!("bundles/{name}_s2.safetensors"), &b, bm)?;
        trained.insert(name, (s, b, stage_cost("s1", &o1), stage_cost("s2", &o2)));
    }

    progress("grafting comparison");
    let late = &trained["late"];
    let conditions = vec![
        Condition {
            name: TARGET_PAIRED.into(),
            assembly: graft(&target_bundle, &target)?,
        },
        Condition {
            name: LATE_PAIRED.into(),
            assembly: graft(&late.1, &late.0.model)?,
        },
        Condition {
            name: LATE_GRAFTED.into(),
            assembly: graft(&late.1, &target)?,
        },
        Condition {
            name: "early_paired".into(),
            assembly: graft(&trained["early"].1, &trained["early"].0.model)?,
        },
        Condition {
            name: EARLY_GRAFTED.into(),
            assembly: graft(&trained["early"].1, &target)?,
        },
        Condition {
            name: "control_paired".into(),
            assembly: graft(&trained["control"].1, &trained["control"].0.model)?,
        },
        Condition {
            name: CONTROL_GRAFTED.into(),
            assembly: graft(&trained["control"].1, &target)?,
        },
    ];
    let comparison = grafting_comparison(&conditions, vqa_eval, &tok, &corpus_digest)?;
    progress(&format!("\n{}", comparison.to_grid()));

    let s3_total = cfg.s3.total_steps(vqa_train.len())?;
    let eval_at = RunHooks::eval_steps(&STAGE3_EVAL_GRID, s3_total);
    let run_s3 = |ctx: &mut Ctx, name: &str, start: &VisionBundle, stages: Vec<StageCost>| -> Result<(PathRun, f64, bool)> {
        progress(&format!("stage 3, {name} path"));
        let mut t = target.clone();
        let mut b = start.clone();
        b.scope = cfg.stage3_scope;
        let b_before = b.clone();
        let mut points = Vec::new();
        let mut hook = eval_curve_hook(&tok, vqa_eval, text_eval, s3_total, &mut points);
        let o = run_stage3(
            &mut t,
            &mut b,
            &vqa_train,
            &cfg.s3,
            RunHooks {
                eval_at: eval_at.clone(),
                on_eval: Some(&mut hook),
                ..Default::default()
            },
        )?;
        drop(hook);
        let allowed = b.trainable_names();
        let ok = changed_params(&b, &b_before).iter().all(|n| allowed.contains(n));
        ctx.records(&format!("records/{name}_s3.jsonl"), &o)?;
        let mut tm = Manifest::for_decoder(Role::Target, &t);
        tm.parent_checksum = Some(target.checksum());
        tm.provenance.push(cfg.s3.stage_record(o.steps_done, None));
        ctx.save(&format!("stage3/{name}_target.safetensors"), &t, tm)?;
        let mut bm = Manifest::for_bundle(&b);
        bm.provenance.push(cfg.s3.stage_record(o.steps_done, Some(t.checksum())));
        ctx.save(&format!("stage3/{name}_bundle.safetensors"), &b, bm)?;
        let text_after = eval_text(&t, &tok, text_eval)?.overall;
        Ok((
            PathRun {
                name: name.into(),
                stages,
                stage3: stage_cost("s3", &o),
                evals: points,
            },
            text_after,
            ok,
        ))
    };
    let (surrogate_path, surr_text, ok) = run_s3(&mut ctx, "surrogate", &late.1, vec![late.2.clone(), late.3.clone()])?;
    freeze_checks.insert("surrogate_s3_bundle_scope".into(), ok);
    let (baseline_path, base_text, ok) = run_s3(&mut ctx, "baseline", &baseline_start, vec![stage_cost("s1", &o1)])?;
    freeze_checks.insert("baseline_s3_bundle_scope".into(), ok);

    let convergence = convergence_accounting(&surrogate_path, &baseline_path, cfg.eval.threshold)?;
    let degradation = Degradation {
        before: target_text_acc,
        surrogate_after: surr_text,
        baseline_after: base_text,
        surrogate_drop: target_text_acc - surr_text,
        baseline_drop: target_text_acc - base_text,
    };

    let rdir = ctx.dir("report")?;
    write_json(&rdir.join("comparison.json"), &comparison)?;
    write_file(&rdir.join("comparison.csv"), comparison.to_csv())?;
    write_file(&rdir.join("comparison.txt"), comparison.to_grid())?;
    write_json(&rdir.join("convergence.json"), &convergence)?;
    write_file(&rdir.join("convergence.csv"), curves_csv(&[&surrogate_path, &baseline_path]))?;
    write_file(&rdir.join("convergence.svg"), curves_svg(&[&surrogate_path, &baseline_path]))?;

    let summary = PipelineSummary {
        name: cfg.name.clone(),
        corpus_manifest: corpus_digest,
        target_text_acc,
        trajectories: traj.iter().map(|t| t.summary()).collect(),
        freeze_checks,
        comparison,
        surrogate_path,
        baseline_path,
        convergence,
        degradation,
        checkpoints: ctx.checkpoints.clone(),
    };
    write_json(&rdir.join("summary.json"), &summary)?;
    progress(&format!("pipeline finished in {:.0} s", started.elapsed().as_secs_f64()));
    Ok(summary)
}

fn write_file(path: &Path, body: String) -> Result<()> {
    fs::write(path, body).map_err(|e| ForgeError::io(path, e))
}

/// Every training sequence must fit the context window.
fn check_lengths(seqs: &[MultimodalSequence], spec: &ModelSpec) -> Result<()> {
    match seqs.iter().map(|s| s.len()).max() {
        Some(m) if m > spec.max_seq_len => Err(ForgeError::Config(format!(
            "sequence of {m} tokens exceeds max_seq_len {}",
            spec.max_seq_len
        ))),
        _ => Ok(()),
    }
}
