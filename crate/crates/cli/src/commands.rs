use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Deserialize;

use forge_core::checkpoint::{load_bundle, load_decoder, read_manifest, save_checkpoint, Manifest, Role};
use forge_core::eval_report::{
    convergence_accounting, curves_csv, curves_svg, eval_text, eval_vqa, grafting_comparison, write_json,
    AssemblyResponder, Condition, EvalPoint, EvalReport, PathRun, Provenance, StageCost,
};
use forge_core::model::{init_model, ModelSpec};
use forge_core::multimodal::{assemble_sequence, init_bundle, ChatTemplate, TrainableScope, VisionSpec};
use forge_core::params::Parameters;
use forge_core::pipeline::{run_pipeline, PipelineConfig};
use forge_core::surgery::{build_control_variant, build_surrogate, graft, plan_surgery, SurrogateModel};
use forge_core::synth_data::{Corpora, DataConfig, Tokenizer};
use forge_core::training::{
    mix_half_and_half, run_stage1, run_stage1_on, run_stage2, run_stage3, run_target_lm, text_sequences,
    vqa_sequences, write_records, RunHooks, Stage, StageConfig, StageOutcome, STAGE3_EVAL_GRID,
};
use forge_core::trajectory::{
    generate_free_running_samples, prediction_trajectory, FeedMode, KlForm, TrajectorySample, TransitionTolerances,
};
use forge_core::{ForgeError, Result};

use crate::Common;

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| ForgeError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| ForgeError::Config(format!("{}: {e}", path.display())))
}

fn out_dir(c: &Common, command: &str) -> Result<PathBuf> {
    let d = c.out.clone().unwrap_or_else(|| PathBuf::from("out").join(command));
    fs::create_dir_all(&d).map_err(|e| ForgeError::io(&d, e))?;
    Ok(d)
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| ForgeError::io(path, e))
}

fn read_corpora(dir: &Path) -> Result<Corpora> {
    if !dir.join(forge_core::synth_data::MANIFEST_FILE).exists() {
        return Err(ForgeError::Data(format!("no corpus at {}", dir.display())));
    }
    Corpora::read(dir)
}

pub fn gen_data(c: &Common) -> Result<()> {
    let mut cfg: DataConfig = load_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = out_dir(c, "data")?;
    let mut corpora = Corpora::generate(&cfg)?;
    corpora.write(&out)?;
    log::info!("corpora written to {} (manifest {})", out.display(), corpora.manifest.digest());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainTargetConfig {
    corpus: PathBuf,
    model: ModelSpec,
    init_seed: u64,
    train: StageConfig,
}

pub fn train_target(c: &Common) -> Result<()> {
    let mut cfg: TrainTargetConfig = load_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.init_seed = s;
        cfg.train.seed = s;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let corpora = read_corpora(&cfg.corpus)?;
    let tok = Tokenizer::standard();
    let text = text_sequences(&corpora.text_train, &tok, &ChatTemplate { n_patches: 0 })?;
    let out = out_dir(c, "target")?;
    let mut model = init_model(&cfg.model, cfg.init_seed)?;
    let o = run_target_lm(&mut model, &text, &cfg.train, RunHooks::default())?;
    write_records(&out.join("records.jsonl"), &o.records)?;
    let mut m = Manifest::for_decoder(Role::Target, &model);
    m.provenance.push(cfg.train.stage_record(o.steps_done, None));
    let m = save_checkpoint(&out.join("target.safetensors"), &model, m)?;
    let acc = eval_text(&model, &tok, &corpora.text_eval)?;
    write_json(&out.join("text_eval.json"), &acc)?;
    log::info!("target {} trained: text accuracy {:.3}", m.checksum, acc.overall);
    Ok(())
}

fn default_max_new() -> usize {
    8
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryCmdConfig {
    model: PathBuf,
    corpus: PathBuf,
    mode: FeedMode,
    n_samples: usize,
    #[serde(default = "default_max_new")]
    max_new: usize,
    #[serde(default)]
    tolerances: TransitionTolerances,
    #[serde(default)]
    kl_form: KlForm,
    /// Picks which eval items are sampled.
    #[serde(default)]
    seed: u64,
}

pub fn trajectory(c: &Common) -> Result<()> {
    let mut cfg: TrajectoryCmdConfig = load_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let (model, _) = load_decoder(&cfg.model)?;
    let corpora = read_corpora(&cfg.corpus)?;
    let tok = Tokenizer::standard();
    let n = corpora.text_eval.len();
    if cfg.n_samples == 0 || cfg.n_samples > n {
        return Err(ForgeError::Config(format!("n_samples must be in 1..={n}")));
    }
    let offset = (cfg.seed as usize) % n;
    let items: Vec<_> = (0..cfg.n_samples).map(|i| corpora.text_eval[(offset + i) % n].clone()).collect();
    let template = ChatTemplate { n_patches: 0 };
    let samples = match cfg.mode {
        FeedMode::TeacherForced => text_sequences(&items, &tok, &template)?
            .into_iter()
            .map(|s| TrajectorySample {
                token_ids: s.token_ids,
                source: FeedMode::TeacherForced,
            })
            .collect(),
        FeedMode::FreeRunning => {
            let prompts: Vec<Vec<u32>> = items
                .iter()
                .map(|i| assemble_sequence(&template, None, &i.question, None, &tok).map(|s| s.token_ids))
                .collect::<Result<_>>()?;
            generate_free_running_samples(&model, &prompts, cfg.max_new)?
        }
    };
    let result = prediction_trajectory(&model, &samples, cfg.tolerances, cfg.kl_form)?;
    let out = out_dir(c, "trajectory")?;
    result.write(&out, cfg.mode.name())?;
    log::info!("{}: transition layer {:?}", cfg.mode.name(), result.transition_layer);
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurgeryCmdConfig {
    target: PathBuf,
    first_replaced: usize,
    last_replaced: usize,
    #[serde(default)]
    control_variant: bool,
}

pub fn surgery(c: &Common) -> Result<()> {
    let cfg: SurgeryCmdConfig = load_config(&c.config)?;
    let (target, _) = load_decoder(&cfg.target)?;
    let plan = plan_surgery(&target.spec, cfg.first_replaced, cfg.last_replaced)?;
    let s = if cfg.control_variant {
        build_control_variant(&target, &plan)?
    } else {
        build_surrogate(&target, &plan)?
    };
    let out = out_dir(c, "surgery")?;
    let path = out.join("surrogate.safetensors");
    save_checkpoint(&path, &s.model, s.manifest())?;

    // Reload and confirm the shared prefix reproduces the target bit-exactly.
    let (model, manifest) = load_decoder(&path)?;
    let back = SurrogateModel::from_archive(model, &manifest)?;
    let probe: Vec<u32> = (0..target.spec.vocab_size.min(32) as u32).collect();
    let a = plan.first_replaced;
    if back.model.forward_prefix(&probe, &[], a)? != target.forward_prefix(&probe, &[], a)? {
        return Err(ForgeError::Surgery("shared prefix differs from the target after reload".into()));
    }
    log::info!(
        "surrogate with {} layers ({:.1}% of target parameters) written to {}",
        back.model.n_layers(),
        100.0 * plan.param_fraction(&target.spec),
        path.display()
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageEvalConfig {
    n_vqa: usize,
    n_text: usize,
    #[serde(default = "default_grid")]
    grid: Vec<f64>,
}

fn default_grid() -> Vec<f64> {
    STAGE3_EVAL_GRID.to_vec()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageCmdConfig {
    stage: StageConfig,
    corpus: PathBuf,
    decoder: PathBuf,
    /// Bundle from an earlier stage; a fresh one is initialised from
    /// `vision` when absent.
    #[serde(default)]
    bundle: Option<PathBuf>,
    #[serde(default)]
    vision: Option<VisionSpec>,
    #[serde(default)]
    bundle_seed: u64,
    /// Replaces the bundle's trainable scope.
    #[serde(default)]
    scope: Option<TrainableScope>,
    #[serde(default)]
    eval: Option<StageEvalConfig>,
    #[serde(default)]
    save_every: usize,
    #[serde(default)]
    resume: bool,
    #[serde(default)]
    stop_after: Option<usize>,
}

fn require_last_stage(m: &Manifest, allowed: &[Stage], what: &str) -> Result<()> {
    let last = m.last_stage();
    if allowed.iter().any(|s| Some(s.name()) == last) {
        return Ok(());
    }
    let names: Vec<&str> = allowed.iter().map(|s| s.name()).collect();
    Err(ForgeError::Protocol(format!(
        "{what} must come from {}, its last stage is {}",
        names.join(" or "),
        last.unwrap_or("none")
    )))
}

pub fn stage(c: &Common) -> Result<()> {
    let mut cfg: StageCmdConfig = load_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.stage.seed = s;
    }
    cfg.stage.validate()?;
    let out = out_dir(c, cfg.stage.stage.name())?;
    let corpora = read_corpora(&cfg.corpus)?;
    let tok = Tokenizer::standard();

    let (mut bundle, mut bundle_manifest) = match &cfg.bundle {
        Some(p) => {
            let (b, m) = load_bundle(p)?;
            (b, m)
        }
        None => {
            let spec = cfg
                .vision
                .as_ref()
                .ok_or_else(|| ForgeError::Config("either bundle or vision must be given".into()))?;
            let b = init_bundle(spec, cfg.scope.unwrap_or(TrainableScope::FullEncoder), cfg.bundle_seed)?;
            let m = Manifest::for_bundle(&b);
            (b, m)
        }
    };
    if let Some(s) = cfg.scope {
        bundle.scope = s;
    }
    let template = ChatTemplate {
        n_patches: bundle.spec.n_patches(),
    };
    let vqa = vqa_sequences(&corpora.vqa_train, &tok, &template)?;
    let (mut decoder, dec_manifest) = load_decoder(&cfg.decoder)?;
    let state = out.join("state.safetensors");
    let hooks_base = || RunHooks {
        state_path: (cfg.save_every > 0 || cfg.stop_after.is_some()).then(|| state.clone()),
        save_every: cfg.save_every,
        resume_from: cfg.resume.then(|| state.clone()),
        stop_after: cfg.stop_after,
        ..Default::default()
    };

    let clock = Instant::now();
    let mut points: Vec<EvalPoint> = Vec::new();
    let outcome: StageOutcome;
    match cfg.stage.stage {
        Stage::TargetLm => {
            return Err(ForgeError::Config("use train-target for language-model training".into()));
        }
        Stage::S1AdapterTranslator => {
            if !bundle_manifest.provenance.is_empty() {
                return Err(ForgeError::Protocol("stage 1 starts from a fresh bundle".into()));
            }
            let text = text_sequences(&corpora.text_train, &tok, &template)?;
            let mixed = mix_half_and_half(&vqa, &text);
            match dec_manifest.role {
                Role::Surrogate => {
                    let mut s = SurrogateModel::from_archive(decoder, &dec_manifest)?;
                    outcome = run_stage1(&mut s, &mut bundle, &mixed, &cfg.stage, hooks_base())?;
                    let mut m = s.manifest();
                    m.provenance = dec_manifest.provenance.clone();
                    m.provenance.push(cfg.stage.stage_record(outcome.steps_done, None));
                    save_checkpoint(&out.join("decoder.safetensors"), &s.model, m)?;
                    decoder = s.model;
                }
                Role::Target => {
                    outcome = run_stage1_on(&mut decoder, Default::default(), &mut bundle, &mixed, &cfg.stage, hooks_base())?;
                }
                r => return Err(ForgeError::Protocol(format!("stage 1 needs a decoder, got role {r:?}"))),
            }
        }
        Stage::S2Encoder => {
            require_last_stage(&bundle_manifest, &[Stage::S1AdapterTranslator], "the stage-2 bundle")?;
            let paired = bundle_manifest.provenance.last().and_then(|r| r.decoder_checksum.clone());
            if paired.as_deref() != Some(decoder.checksum().as_str()) {
                return Err(ForgeError::Protocol(
                    "stage 2 must use the decoder the bundle was pretrained with".into(),
                ));
            }
            outcome = run_stage2(&mut bundle, &decoder, &vqa, &cfg.stage, hooks_base())?;
        }
        Stage::S3Decoder => {
            require_last_stage(
                &bundle_manifest,
                &[Stage::S1AdapterTranslator, Stage::S2Encoder],
                "the stage-3 bundle",
            )?;
            if dec_manifest.role != Role::Target {
                return Err(ForgeError::Protocol("stage 3 trains the target decoder".into()));
            }
            let parent = decoder.checksum();
            let text_eval = corpora.text_eval.clone();
            let vqa_eval = corpora.vqa_eval.clone();
            let mut hooks = hooks_base();
            let total = cfg.stage.total_steps(vqa.len())?;
            let mut hook = |step: usize, d: &forge_core::model::DecoderModel, b: Option<&forge_core::multimodal::VisionBundle>| -> Result<()> {
                let (Some(e), Some(b)) = (&cfg.eval, b) else {
                    return Ok(());
                };
                let r = AssemblyResponder {
                    assembly: graft(b, d)?,
                    tokenizer: &tok,
                };
                let vqa_acc = eval_vqa(&r, &vqa_eval[..e.n_vqa.min(vqa_eval.len())])?.overall;
                let text_acc = eval_text(d, &tok, &text_eval[..e.n_text.min(text_eval.len())])?.overall;
                log::info!("step {step}: vqa {vqa_acc:.3} text {text_acc:.3}");
                points.push(EvalPoint {
                    step,
                    data_pct: 100.0 * step as f64 / total as f64,
                    vqa_acc,
                    text_acc: Some(text_acc),
                });
                Ok(())
            };
            if let Some(e) = &cfg.eval {
                hooks.eval_at = RunHooks::eval_steps(&e.grid, total);
                hooks.on_eval = Some(&mut hook);
            }
            outcome = run_stage3(&mut decoder, &mut bundle, &vqa, &cfg.stage, hooks)?;
            let mut m = Manifest::for_decoder(Role::Target, &decoder);
            m.parent_checksum = Some(parent);
            m.provenance = dec_manifest.provenance.clone();
            m.provenance.push(cfg.stage.stage_record(outcome.steps_done, None));
            save_checkpoint(&out.join("decoder.safetensors"), &decoder, m)?;
        }
    }
    if outcome.steps_done < outcome.total_steps {
        log::info!(
            "stopped after {} of {} steps; state in {}",
            outcome.steps_done,
            outcome.total_steps,
            state.display()
        );
        write_records(&out.join("records.partial.jsonl"), &outcome.records)?;
        return Ok(());
    }
    bundle_manifest.vision = Some(bundle.spec.clone());
    bundle_manifest.scope = Some(bundle.scope);
    bundle_manifest
        .provenance
        .push(cfg.stage.stage_record(outcome.steps_done, Some(decoder.checksum())));
    save_checkpoint(&out.join("bundle.safetensors"), &bundle, bundle_manifest)?;
    write_records(&out.join("records.jsonl"), &outcome.records)?;
    let cost = StageCost {
        stage: cfg.stage.stage.name().into(),
        steps: outcome.steps_done,
        seconds: clock.elapsed().as_secs_f64(),
    };
    write_json(&out.join("stage_cost.json"), &cost)?;
    if !points.is_empty() {
        write_json(&out.join("evals.json"), &points)?;
    }
    log::info!("{} finished: {} steps", cfg.stage.stage.name(), outcome.steps_done);
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditionSpec {
    name: String,
    bundle: PathBuf,
    decoder: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathSpec {
    name: String,
    /// `stage_cost.json` files of the stages before stage 3.
    stage_costs: Vec<PathBuf>,
    /// Output directory of the stage-3 run.
    stage3: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvergenceSpec {
    surrogate: PathSpec,
    baseline: PathSpec,
    #[serde(default)]
    threshold: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportConfig {
    corpus: PathBuf,
    n_vqa: usize,
    conditions: Vec<ConditionSpec>,
    #[serde(default)]
    convergence: Option<ConvergenceSpec>,
}

fn load_path(p: &PathSpec) -> Result<PathRun> {
    let stages = p.stage_costs.iter().map(|f| load_json(f)).collect::<Result<Vec<StageCost>>>()?;
    Ok(PathRun {
        name: p.name.clone(),
        stages,
        stage3: load_json(&p.stage3.join("stage_cost.json"))?,
        evals: load_json(&p.stage3.join("evals.json"))?,
    })
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| ForgeError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn report(c: &Common) -> Result<()> {
    let cfg: ReportConfig = load_config(&c.config)?;
    let corpora = read_corpora(&cfg.corpus)?;
    let tok = Tokenizer::standard();
    let mut loaded = Vec::new();
    for spec in &cfg.conditions {
        let (b, _) = load_bundle(&spec.bundle)?;
        let (d, _) = load_decoder(&spec.decoder)?;
        // manifests must exist and parse; checksums were verified on load
        read_manifest(&spec.bundle)?;
        loaded.push((spec.name.clone(), b, d));
    }
    let conditions = loaded
        .iter()
        .map(|(n, b, d)| {
            Ok(Condition {
                name: n.clone(),
                assembly: graft(b, d)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let items = &corpora.vqa_eval[..cfg.n_vqa.min(corpora.vqa_eval.len())];
    let digest = corpora.manifest.digest();
    let cmp = grafting_comparison(&conditions, items, &tok, &digest)?;
    let out = out_dir(c, "report")?;
    write_json(&out.join("comparison.json"), &cmp)?;
    write_text(&out.join("comparison.csv"), &cmp.to_csv())?;
    write_text(&out.join("comparison.txt"), &cmp.to_grid())?;
    for r in &cmp.reports {
        r.validate()?;
        write_json(&out.join(format!("{}.json", r.config_name)), r)?;
    }
    print!("{}", cmp.to_grid());
    if let Some(conv) = &cfg.convergence {
        let s = load_path(&conv.surrogate)?;
        let b = load_path(&conv.baseline)?;
        let summary = convergence_accounting(&s, &b, conv.threshold)?;
        write_json(&out.join("convergence.json"), &summary)?;
        write_text(&out.join("convergence.csv"), &curves_csv(&[&s, &b]))?;
        write_text(&out.join("convergence.svg"), &curves_svg(&[&s, &b]))?;
        let mut metrics = std::collections::BTreeMap::new();
        if let Some(k) = summary.surrogate_steps_to_threshold {
            metrics.insert("steps_to_threshold".to_string(), k as f64);
        }
        if let Some(w) = summary.surrogate_cost_seconds {
            metrics.insert("wall_seconds".to_string(), w);
        }
        let rep = EvalReport {
            config_name: "convergence".into(),
            metrics,
            provenance: Provenance {
                checkpoints: loaded.iter().map(|(n, b, _)| (n.clone(), b.checksum())).collect(),
                corpus_manifest: digest,
            },
        };
        write_json(&out.join("convergence_report.json"), &rep)?;
        println!("threshold {:.3}: surrogate {:?} steps, baseline {:?} steps", summary.threshold, summary.surrogate_steps_to_threshold, summary.baseline_steps_to_threshold);
    }
    Ok(())
}

pub fn pipeline(c: &Common) -> Result<()> {
    let mut cfg: PipelineConfig = load_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = out_dir(c, "pipeline")?;
    let summary = run_pipeline(&cfg, &out)?;
    print!("{}", summary.comparison.to_grid());
    let conv = &summary.convergence;
    println!(
        "stage 3: threshold {:.3}, surrogate path {:?} steps, baseline {:?} of {} steps",
        conv.threshold, conv.surrogate_steps_to_threshold, conv.baseline_steps_to_threshold, conv.baseline_stage3_steps
    );
    let d = &summary.degradation;
    println!(
        "text accuracy {:.3} before stage 3; drop {:+.3} (surrogate path) vs {:+.3} (baseline)",
        d.before, d.surrogate_drop, d.baseline_drop
    );
    Ok(())
}
