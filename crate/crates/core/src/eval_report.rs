//! Exact-match evaluation, the grafting comparison, convergence accounting
//! and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ForgeError, Result};
use crate::model::DecoderModel;
use crate::multimodal::{assemble_sequence, ChatTemplate};
use crate::plot::{Plot, Series};
use crate::surgery::VlmAssembly;
use crate::synth_data::text::BINARY_SUFFIX;
use crate::synth_data::tokenizer::EOT;
use crate::synth_data::{Raster, TextInstruction, Tokenizer, VqaInstruction};

/// Decoding budget for one answer, in tokens.
pub const ANSWER_BUDGET: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub text: String,
    /// Decoding hit the length budget before end-of-turn.
    pub truncated: bool,
}

/// Anything that answers a (possibly visual) question.
pub trait Responder: Sync {
    fn respond(&self, image: Option<&Raster>, question: &str) -> Result<Reply>;
}

/// Greedy decoding through a grafted or paired assembly.
pub struct AssemblyResponder<'a> {
    pub assembly: VlmAssembly<'a>,
    pub tokenizer: &'a Tokenizer,
}

impl Responder for AssemblyResponder<'_> {
    fn respond(&self, image: Option<&Raster>, question: &str) -> Result<Reply> {
        let g = self.assembly.answer(self.tokenizer, image, question, ANSWER_BUDGET)?;
        Ok(Reply {
            text: self.tokenizer.decode(&g.tokens)?,
            truncated: !g.stopped,
        })
    }
}

/// Greedy decoding of a text-only decoder.
pub struct TextResponder<'a> {
    pub decoder: &'a DecoderModel,
    pub tokenizer: &'a Tokenizer,
}

impl Responder for TextResponder<'_> {
    fn respond(&self, image: Option<&Raster>, question: &str) -> Result<Reply> {
        if image.is_some() {
            return Err(ForgeError::Input("a text-only decoder cannot take an image".into()));
        }
        let seq = assemble_sequence(&ChatTemplate { n_patches: 0 }, None, question, None, self.tokenizer)?;
        let stop = self.tokenizer.special_id(EOT)?;
        let g = self.decoder.generate_greedy(&seq.token_ids, &[], ANSWER_BUDGET, Some(stop))?;
        Ok(Reply {
            text: self.tokenizer.decode(&g.tokens)?,
            truncated: !g.stopped,
        })
    }
}

/// Answers from a lookup table keyed by question (the ground truth, for
/// checking the scorer).
pub struct OracleStub {
    pub answers: BTreeMap<String, String>,
}

impl OracleStub {
    pub fn for_vqa(items: &[VqaInstruction]) -> Self {
        Self {
            answers: items.iter().map(|i| (oracle_key(Some(&i.image), &i.question), i.response.clone())).collect(),
        }
    }
}

fn oracle_key(image: Option<&Raster>, question: &str) -> String {
    format!("{}|{question}", image.map(|r| r.digest()).unwrap_or_default())
}

impl Responder for OracleStub {
    fn respond(&self, image: Option<&Raster>, question: &str) -> Result<Reply> {
        let text = self
            .answers
            .get(&oracle_key(image, question))
            .cloned()
            .ok_or_else(|| ForgeError::Input(format!("oracle has no answer for {question:?}")))?;
        Ok(Reply { text, truncated: false })
    }
}

/// Picks uniformly among the allowed answers of binary prompts and emits a
/// random letter otherwise. Deterministic per (seed, question, image).
pub struct RandomStub {
    pub seed: u64,
}

impl Responder for RandomStub {
    fn respond(&self, image: Option<&Raster>, question: &str) -> Result<Reply> {
        let h = Sha256::digest(format!("{}|{}", self.seed, oracle_key(image, question)));
        let mut rng = ChaCha8Rng::from_seed(h.into());
        let text = if question.ends_with(BINARY_SUFFIX) {
            if rng.gen_bool(0.5) { "yes" } else { "no" }.to_string()
        } else {
            (rng.gen_range(b'a'..=b'z') as char).to_string()
        };
        Ok(Reply { text, truncated: false })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    pub per_tag: BTreeMap<String, f64>,
    pub n: usize,
    /// Items whose decoding ran out of budget (all counted incorrect).
    pub truncated: usize,
}

fn score<'a>(
    responder: &dyn Responder,
    items: impl IndexedParallelIterator<Item = (&'a str, Option<&'a Raster>, &'a str, &'a str)>,
) -> Result<Accuracy> {
    let results: Vec<(String, bool, bool)> = items
        .map(|(tag, image, question, truth)| {
            let r = responder.respond(image, question)?;
            let ok = !r.truncated && r.text.trim() == truth.trim();
            Ok((tag.to_string(), ok, r.truncated))
        })
        .collect::<Result<_>>()?;
    if results.is_empty() {
        return Err(ForgeError::Input("empty evaluation set".into()));
    }
    let mut tags: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (tag, ok, _) in &results {
        let e = tags.entry(tag.clone()).or_default();
        e.0 += *ok as usize;
        e.1 += 1;
    }
    let correct = results.iter().filter(|r| r.1).count();
    Ok(Accuracy {
        overall: correct as f64 / results.len() as f64,
        per_tag: tags.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect(),
        n: results.len(),
        truncated: results.iter().filter(|r| r.2).count(),
    })
}

pub fn eval_vqa(responder: &dyn Responder, items: &[VqaInstruction]) -> Result<Accuracy> {
    score(
        responder,
        items
            .par_iter()
            .map(|i| (i.task_tag.name(), Some(&i.image), i.question.as_str(), i.response.as_str())),
    )
}

pub fn eval_text(decoder: &DecoderModel, tokenizer: &Tokenizer, items: &[TextInstruction]) -> Result<Accuracy> {
    let r = TextResponder { decoder, tokenizer };
    score(
        &r,
        items
            .par_iter()
            .map(|i| (i.task_tag.name(), None, i.question.as_str(), i.response.as_str())),
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Role or condition part → parameter checksum.
    pub checkpoints: BTreeMap<String, String>,
    pub corpus_manifest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_name: String,
    pub metrics: BTreeMap<String, f64>,
    pub provenance: Provenance,
}

impl EvalReport {
    /// Report for an accuracy: `vqa_acc` plus `vqa_acc.<tag>`, or the same
    /// under `prefix`.
    pub fn from_accuracy(config_name: &str, prefix: &str, acc: &Accuracy, provenance: Provenance) -> Self {
        let mut metrics = BTreeMap::new();
        metrics.insert(prefix.to_string(), acc.overall);
        for (t, a) in &acc.per_tag {
            metrics.insert(format!("{prefix}.{t}"), *a);
        }
        Self {
            config_name: config_name.into(),
            metrics,
            provenance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in &self.metrics {
            if k.contains("acc") && !(0.0..=1.0).contains(v) {
                return Err(ForgeError::Input(format!("{k} = {v} outside [0, 1]")));
            }
        }
        if self.provenance.corpus_manifest.is_empty() || self.provenance.checkpoints.is_empty() {
            return Err(ForgeError::Input(format!("{}: provenance incomplete", self.config_name)));
        }
        Ok(())
    }
}

pub const TARGET_PAIRED: &str = "target_paired";
pub const LATE_PAIRED: &str = "late_paired";
pub const LATE_GRAFTED: &str = "late_grafted";
pub const EARLY_GRAFTED: &str = "early_grafted";
pub const CONTROL_GRAFTED: &str = "control_grafted";
pub const REQUIRED_CONDITIONS: [&str; 5] = [TARGET_PAIRED, LATE_PAIRED, LATE_GRAFTED, EARLY_GRAFTED, CONTROL_GRAFTED];

/// One evaluated pairing of a bundle with a decoder.
pub struct Condition<'a> {
    pub name: String,
    pub assembly: VlmAssembly<'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub better: String,
    pub worse: String,
    /// Accuracy of `better` minus accuracy of `worse`; negative when the
    /// expected order does not hold.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reports: Vec<EvalReport>,
    pub orderings: Vec<Ordering>,
}

impl Comparison {
    pub fn acc(&self, condition: &str) -> Option<f64> {
        self.reports
            .iter()
            .find(|r| r.config_name == condition)
            .and_then(|r| r.metrics.get("vqa_acc").copied())
    }

    pub fn ordering(&self, better: &str, worse: &str) -> Option<&Ordering> {
        self.orderings.iter().find(|o| o.better == better && o.worse == worse)
    }

    /// Conditions × metrics as CSV.
    pub fn to_csv(&self) -> String {
        let cols = self.metric_names();
        let mut s = format!("condition,{}\n", cols.join(","));
        for r in &self.reports {
            let vals: Vec<String> = cols
                .iter()
                .map(|c| r.metrics.get(c).map(|v| format!("{v:.4}")).unwrap_or_default())
                .collect();
            let _ = writeln!(s, "{},{}", r.config_name, vals.join(","));
        }
        s
    }

    /// The same table aligned for reading in a terminal, followed by the
    /// ordering summary.
    pub fn to_grid(&self) -> String {
        let cols = self.metric_names();
        let name_w = self.reports.iter().map(|r| r.config_name.len()).max().unwrap_or(9).max(9);
        let widths: Vec<usize> = cols.iter().map(|c| c.len().max(6)).collect();
        let mut s = format!("{:<name_w$}", "condition");
        for (c, w) in cols.iter().zip(&widths) {
            let _ = write!(s, "  {c:>w$}");
        }
        s.push('\n');
        for r in &self.reports {
            let _ = write!(s, "{:<name_w$}", r.config_name);
            for (c, w) in cols.iter().zip(&widths) {
                match r.metrics.get(c) {
                    Some(v) => {
                        let _ = write!(s, "  {v:>w$.3}");
                    }
                    None => {
                        let _ = write!(s, "  {:>w$}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s.push('\n');
        for o in &self.orderings {
            let sign = if o.margin >= 0.0 { ">=" } else { "<" };
            let _ = writeln!(s, "{} {sign} {} by {:+.1} points", o.better, o.worse, 100.0 * o.margin);
        }
        s
    }

    fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .reports
            .iter()
            .flat_map(|r| r.metrics.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        // overall accuracy first
        names.sort_by_key(|n| (n != "vqa_acc", n.clone()));
        names
    }
}

/// Evaluates every condition on `items` and summarises the expected
/// orderings. All five named conditions are required.
pub fn grafting_comparison(
    conditions: &[Condition],
    items: &[VqaInstruction],
    tokenizer: &Tokenizer,
    corpus_manifest: &str,
) -> Result<Comparison> {
    for need in REQUIRED_CONDITIONS {
        if !conditions.iter().any(|c| c.name == need) {
            return Err(ForgeError::Protocol(format!("grafting comparison is missing condition {need}")));
        }
    }
    let mut reports = Vec::with_capacity(conditions.len());
    for c in conditions {
        let r = AssemblyResponder {
            assembly: c.assembly,
            tokenizer,
        };
        let acc = eval_vqa(&r, items)?;
        let mut checkpoints = BTreeMap::new();
        checkpoints.insert("bundle".to_string(), crate::params::Parameters::checksum(c.assembly.bundle));
        checkpoints.insert("decoder".to_string(), crate::params::Parameters::checksum(c.assembly.decoder));
        let prov = Provenance {
            checkpoints,
            corpus_manifest: corpus_manifest.to_string(),
        };
        let mut rep = EvalReport::from_accuracy(&c.name, "vqa_acc", &acc, prov);
        rep.metrics.insert("truncated".into(), acc.truncated as f64);
        reports.push(rep);
    }
    let mut cmp = Comparison {
        reports,
        orderings: Vec::new(),
    };
    let pairs = [
        (LATE_GRAFTED, EARLY_GRAFTED),
        (LATE_GRAFTED, CONTROL_GRAFTED),
        (LATE_GRAFTED, LATE_PAIRED),
        (TARGET_PAIRED, LATE_GRAFTED),
    ];
    for (a, b) in pairs {
        let margin = cmp.acc(a).unwrap_or(f64::NAN) - cmp.acc(b).unwrap_or(f64::NAN);
        cmp.orderings.push(Ordering {
            better: a.into(),
            worse: b.into(),
            margin,
        });
    }
    Ok(cmp)
}

/// A stage-3 evaluation snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Percentage of the stage-3 budget consumed.
    pub data_pct: f64,
    pub vqa_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_acc: Option<f64>,
}

/// Steps and measured seconds of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: String,
    pub steps: usize,
    pub seconds: f64,
}

impl StageCost {
    pub fn seconds_per_step(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.seconds / self.steps as f64
        }
    }
}

/// One pipeline path: its earlier stages and the stage-3 curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRun {
    pub name: String,
    /// Stages before stage 3.
    pub stages: Vec<StageCost>,
    pub stage3: StageCost,
    pub evals: Vec<EvalPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub threshold: f64,
    pub surrogate_steps_to_threshold: Option<usize>,
    pub baseline_steps_to_threshold: Option<usize>,
    pub baseline_stage3_steps: usize,
    /// Surrogate stage-3 steps to threshold over the baseline's full stage-3
    /// budget.
    pub step_ratio: Option<f64>,
    /// Wall seconds of earlier stages plus stage 3 up to the threshold.
    pub surrogate_cost_seconds: Option<f64>,
    pub baseline_cost_seconds: Option<f64>,
    pub cost_ratio: Option<f64>,
}

/// First eval step whose accuracy reaches `threshold`.
pub fn steps_to_threshold(points: &[EvalPoint], threshold: f64) -> Option<usize> {
    points.iter().find(|p| p.vqa_acc >= threshold).map(|p| p.step)
}

fn path_cost(p: &PathRun, s3_steps: Option<usize>) -> Option<f64> {
    let before: f64 = p.stages.iter().map(|s| s.seconds).sum();
    s3_steps.map(|k| before + k as f64 * p.stage3.seconds_per_step())
}

/// Steps to threshold for both paths and the wall-time cost comparison. The
/// threshold defaults to the baseline's final accuracy.
pub fn convergence_accounting(surrogate: &PathRun, baseline: &PathRun, threshold: Option<f64>) -> Result<ConvergenceSummary> {
    for p in [surrogate, baseline] {
        if p.evals.is_empty() {
            return Err(ForgeError::Input(format!("path {} has no periodic evaluations", p.name)));
        }
    }
    let threshold = threshold.unwrap_or_else(|| baseline.evals.last().expect("nonempty").vqa_acc);
    let s = steps_to_threshold(&surrogate.evals, threshold);
    let b = steps_to_threshold(&baseline.evals, threshold);
    let sc = path_cost(surrogate, s);
    let bc = path_cost(baseline, b);
    let n = baseline.stage3.steps;
    Ok(ConvergenceSummary {
        threshold,
        surrogate_steps_to_threshold: s,
        baseline_steps_to_threshold: b,
        baseline_stage3_steps: n,
        step_ratio: s.filter(|_| n > 0).map(|k| k as f64 / n as f64),
        surrogate_cost_seconds: sc,
        baseline_cost_seconds: bc,
        cost_ratio: sc.zip(bc).filter(|(_, b)| *b > 0.0).map(|(s, b)| s / b),
    })
}

/// Whether accuracies never fall by more than `slack` between consecutive
/// points.
pub fn monotone_within(points: &[EvalPoint], slack: f64) -> bool {
    points.windows(2).all(|w| w[1].vqa_acc >= w[0].vqa_acc - slack)
}

pub fn curves_csv(paths: &[&PathRun]) -> String {
    let mut s = String::from("path,data_pct,step,vqa_acc,text_acc\n");
    for p in paths {
        for e in &p.evals {
            let t = e.text_acc.map(|t| format!("{t:.4}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:.1},{},{:.4},{t}", p.name, e.data_pct, e.step, e.vqa_acc);
        }
    }
    s
}

pub fn curves_svg(paths: &[&PathRun]) -> String {
    let colors = ["#c0392b", "#2c6fbb", "#27ae60", "#8e44ad"];
    let mut plot = Plot::new("Stage-3 VQA accuracy", "% of stage-3 data", "VQA accuracy");
    for (p, c) in paths.iter().zip(colors.iter().cycle()) {
        let pts = p.evals.iter().map(|e| (e.data_pct, e.vqa_acc)).collect();
        plot.series.push(Series::new(pts, c).labelled(&p.name));
    }
    plot.to_svg()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| ForgeError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(name: &str, accs: &[f64]) -> PathRun {
        PathRun {
            name: name.into(),
            stages: vec![StageCost {
                stage: "s1".into(),
                steps: 10,
                seconds: 5.0,
            }],
            stage3: StageCost {
                stage: "s3".into(),
                steps: 100,
                seconds: 100.0,
            },
            evals: accs
                .iter()
                .zip([10, 20, 30, 60, 100])
                .map(|(&a, s)| EvalPoint {
                    step: s,
                    data_pct: s as f64,
                    vqa_acc: a,
                    text_acc: None,
                })
                .collect(),
        }
    }

    #[test]
    fn degenerate_thresholds() {
        let s = path("s", &[0.2, 0.5, 0.6, 0.7, 0.8]);
        let b = path("b", &[0.1, 0.2, 0.3, 0.4, 0.6]);
        let c = convergence_accounting(&s, &b, Some(0.0)).unwrap();
        assert_eq!(c.surrogate_steps_to_threshold, Some(10));
        let c = convergence_accounting(&s, &b, Some(1.1)).unwrap();
        assert_eq!(c.surrogate_steps_to_threshold, None);
        assert_eq!(c.cost_ratio, None);
        let c = convergence_accounting(&s, &b, None).unwrap();
        assert_eq!(c.threshold, 0.6);
        assert_eq!(c.surrogate_steps_to_threshold, Some(30));
        assert_eq!(c.step_ratio, Some(0.3));
        assert_eq!(c.surrogate_cost_seconds, Some(35.0));
        assert_eq!(c.baseline_cost_seconds, Some(105.0));
        assert!(convergence_accounting(&path("e", &[]), &b, None).is_err());
        assert!(monotone_within(&s.evals, 0.0));
        assert!(monotone_within(&path("n", &[0.5, 0.495]).evals, 0.01));
        assert!(!monotone_within(&path("n", &[0.5, 0.48]).evals, 0.01));
    }
}
