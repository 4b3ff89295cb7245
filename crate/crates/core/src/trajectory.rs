//! Layer-wise prediction trajectories (logit lens with the model's own final
//! norm and unembedding) and detection of the point where they converge.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::model::{softmax_rows_f64, DecoderModel, HiddenTrace};
use crate::plot::{Plot, Series};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_TOL_SPREAD: f64 = 0.05;
pub const DEFAULT_TOL_MONO: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedMode {
    TeacherForced,
    FreeRunning,
}

impl FeedMode {
    pub fn name(self) -> &'static str {
        match self {
            FeedMode::TeacherForced => "teacher_forced",
            FeedMode::FreeRunning => "free_running",
        }
    }
}

/// How per-position probabilities are combined into one deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlForm {
    /// `Σ_i q_i · ln(q_i / p_i)` over the scalar next-token probabilities.
    #[default]
    PositionSum,
    /// Reserved for a per-position full-vocabulary divergence; not implemented.
    FullVocab,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectorySample {
    pub token_ids: Vec<u32>,
    pub source: FeedMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryResult {
    /// `[n_samples × n_layers]`
    pub kl_matrix: Array2<f64>,
    pub transition_layer: Option<usize>,
    pub mode: FeedMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionTolerances {
    pub tol_spread: f64,
    pub tol_mono: f64,
}

impl Default for TransitionTolerances {
    fn default() -> Self {
        Self {
            tol_spread: DEFAULT_TOL_SPREAD,
            tol_mono: DEFAULT_TOL_MONO,
        }
    }
}

/// `out[i] = prob_rows[i, token_ids[i + 1]]`
pub fn next_token_probs(prob_rows: &ArrayView2<f64>, token_ids: &[u32]) -> Result<Array1<f64>> {
    let n = token_ids.len();
    if n < 2 {
        return Err(ForgeError::Input(format!("need at least 2 tokens, got {n}")));
    }
    if prob_rows.nrows() < n - 1 {
        return Err(ForgeError::Input(format!(
            "{} probability rows for {n} tokens",
            prob_rows.nrows()
        )));
    }
    let v = prob_rows.ncols();
    let mut out = Array1::zeros(n - 1);
    for i in 0..n - 1 {
        let t = token_ids[i + 1] as usize;
        if t >= v {
            return Err(ForgeError::Input(format!("token id {t} outside {v} columns")));
        }
        out[i] = prob_rows[[i, t]];
    }
    Ok(out)
}

/// Next-token probabilities read off the hidden states of `layer`.
pub fn layer_distribution(
    model: &DecoderModel,
    trace: &HiddenTrace,
    layer: usize,
    token_ids: &[u32],
) -> Result<Array1<f64>> {
    let l = trace.hidden_states.len_of(Axis(0));
    if layer >= l {
        return Err(ForgeError::Input(format!("layer {layer} outside 0..{l}")));
    }
    let hidden = trace.hidden_states.index_axis(Axis(0), layer);
    let probs = model.unembed(&hidden)?;
    next_token_probs(&probs.view(), token_ids)
}

/// Final-output next-token probabilities, from the trace's logits.
pub fn final_distribution(trace: &HiddenTrace, token_ids: &[u32]) -> Result<Array1<f64>> {
    let mut p = trace.logits.clone();
    softmax_rows_f64(&mut p);
    next_token_probs(&p.view(), token_ids)
}

/// `Σ_i q_i · ln(q_i / p_i)` with both sides floored at [`PROB_FLOOR`].
pub fn kl_deviation(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(ForgeError::Input(format!("length mismatch: {} vs {}", q.len(), p.len())));
    }
    Ok(q.iter()
        .zip(p)
        .map(|(&qi, &pi)| {
            let (qi, pi) = (qi.max(PROB_FLOOR), pi.max(PROB_FLOOR));
            qi * (qi / pi).ln()
        })
        .sum())
}

/// One row of the KL matrix.
pub fn sample_curve(model: &DecoderModel, token_ids: &[u32], form: KlForm) -> Result<Vec<f64>> {
    if form == KlForm::FullVocab {
        return Err(ForgeError::Config("the full-vocabulary divergence is not implemented".into()));
    }
    let trace = model.forward_with_hidden(token_ids, &[])?;
    let p = final_distribution(&trace, token_ids)?;
    (0..model.n_layers())
        .map(|l| {
            let q = layer_distribution(model, &trace, l, token_ids)?;
            kl_deviation(q.as_slice().expect("contiguous"), p.as_slice().expect("contiguous"))
        })
        .collect()
}

pub fn prediction_trajectory(
    model: &DecoderModel,
    samples: &[TrajectorySample],
    tol: TransitionTolerances,
    form: KlForm,
) -> Result<TrajectoryResult> {
    let Some(first) = samples.first() else {
        return Err(ForgeError::Input("no trajectory samples".into()));
    };
    if samples.iter().any(|s| s.source != first.source) {
        return Err(ForgeError::Input("samples mix feeding modes".into()));
    }
    let rows: Vec<Vec<f64>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            sample_curve(model, &s.token_ids, form).map_err(|e| match e {
                ForgeError::Input(msg) => ForgeError::Input(format!("sample {i}: {msg}")),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let l = model.n_layers();
    let mut kl = Array2::zeros((samples.len(), l));
    for (i, r) in rows.iter().enumerate() {
        kl.row_mut(i).assign(&Array1::from(r.clone()));
    }
    let transition_layer = if samples.len() >= 2 {
        transition_layer(&kl.view(), tol.tol_spread, tol.tol_mono)?
    } else {
        None
    };
    Ok(TrajectoryResult {
        kl_matrix: kl,
        transition_layer,
        mode: first.source,
    })
}

/// Greedy continuations of each prompt, exactly `max_new` tokens long
/// unless the context fills up first.
pub fn generate_free_running_samples(
    model: &DecoderModel,
    prompts: &[Vec<u32>],
    max_new: usize,
) -> Result<Vec<TrajectorySample>> {
    if max_new == 0 {
        return Err(ForgeError::Input("max_new must be at least 1".into()));
    }
    prompts
        .par_iter()
        .map(|p| {
            let g = model.generate_greedy(p, &[], max_new, None)?;
            let mut ids = p.clone();
            ids.extend(g.tokens);
            Ok(TrajectorySample {
                token_ids: ids,
                source: FeedMode::FreeRunning,
            })
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn per_layer_median(kl: &ArrayView2<f64>) -> Vec<f64> {
    kl.columns().into_iter().map(|c| median(&mut c.to_vec())).collect()
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Smallest layer `ℓ*` such that every column from `ℓ*` on has inter-sample
/// standard deviation at most `tol_spread` times the typical per-sample KL
/// range (median over samples of `max − min` along the row), and the median
/// curve never rises by more than `tol_mono` on any step that ends at or
/// after `ℓ*`.
pub fn transition_layer(kl: &ArrayView2<f64>, tol_spread: f64, tol_mono: f64) -> Result<Option<usize>> {
    let (n, l) = kl.dim();
    if n < 2 {
        return Err(ForgeError::Detection(format!("need at least 2 samples, got {n}")));
    }
    if l == 0 {
        return Ok(None);
    }
    if kl.iter().any(|v| !v.is_finite()) {
        return Err(ForgeError::Detection("KL matrix holds non-finite values".into()));
    }
    let mut ranges: Vec<f64> = kl
        .rows()
        .into_iter()
        .map(|r| {
            let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .collect();
    let scale = median(&mut ranges);
    let med = per_layer_median(kl);
    let spread_ok: Vec<bool> = kl
        .columns()
        .into_iter()
        .map(|c| population_std(&c.to_vec()) <= tol_spread * scale)
        .collect();
    // step_ok[j]: the step from j−1 into j keeps the median non-increasing
    let step_ok: Vec<bool> = (0..l).map(|j| j == 0 || med[j] <= med[j - 1] + tol_mono).collect();
    let mut best = None;
    for start in (0..l).rev() {
        if spread_ok[start] && step_ok[start] {
            best = Some(start);
        } else {
            break;
        }
    }
    Ok(best)
}

pub fn detect_transition(result: &TrajectoryResult, tol_spread: f64, tol_mono: f64) -> Result<Option<usize>> {
    transition_layer(&result.kl_matrix.view(), tol_spread, tol_mono)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub mode: FeedMode,
    pub transition_layer: Option<usize>,
    pub per_layer_median: Vec<f64>,
}

impl TrajectoryResult {
    pub fn summary(&self) -> TrajectorySummary {
        TrajectorySummary {
            mode: self.mode,
            transition_layer: self.transition_layer,
            per_layer_median: per_layer_median(&self.kl_matrix.view()),
        }
    }

    /// `sample_id,layer,kl`, one row per matrix entry.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,layer,kl\n");
        for (i, row) in self.kl_matrix.rows().into_iter().enumerate() {
            for (l, v) in row.iter().enumerate() {
                let _ = writeln!(s, "{i},{l},{v:e}");
            }
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let mut plot = Plot::new(
            &format!("Prediction trajectories ({})", self.mode.name()),
            "layer",
            "KL deviation from final output",
        );
        for row in self.kl_matrix.rows() {
            let pts = row.iter().enumerate().map(|(l, &v)| (l as f64, v)).collect();
            plot.series.push(Series::new(pts, "steelblue").thin(0.6, 0.25));
        }
        let med = per_layer_median(&self.kl_matrix.view());
        plot.series.push(
            Series::new(med.iter().enumerate().map(|(l, &v)| (l as f64, v)).collect(), "black").labelled("median"),
        );
        if let Some(t) = self.transition_layer {
            plot.arrow_at = Some((t as f64, format!("transition at layer {t}")));
        }
        plot.to_svg()
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>.svg` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| ForgeError::io(dir, e))?;
        let files = [
            (format!("{stem}.csv"), self.to_csv()),
            (format!("{stem}.json"), serde_json::to_string_pretty(&self.summary())?),
            (format!("{stem}.svg"), self.to_svg()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| ForgeError::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gather_follows_next_token() {
        let mut p = Array2::<f64>::zeros((3, 10));
        p[[0, 7]] = 0.2;
        p[[1, 9]] = 0.6;
        let out = next_token_probs(&p.view(), &[5, 7, 9]).unwrap();
        assert_eq!(out.to_vec(), vec![0.2, 0.6]);
        assert_eq!(next_token_probs(&p.view(), &[1, 2]).unwrap().len(), 1);
        assert!(next_token_probs(&p.view(), &[1]).is_err());
    }

    #[test]
    fn kl_basics() {
        assert_eq!(kl_deviation(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_deviation(&[0.5], &[0.25]).unwrap();
        assert!((v - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert!(kl_deviation(&[0.5], &[0.5, 0.5]).is_err());
        assert!(kl_deviation(&[0.0], &[0.0]).unwrap().abs() < 1e-30);
    }

    #[test]
    fn converged_and_increasing_fixtures() {
        let same = array![[5.0, 3.0, 1.0, 0.0], [5.0, 3.0, 1.0, 0.0], [5.0, 3.0, 1.0, 0.0]];
        assert_eq!(transition_layer(&same.view(), 0.05, 1e-3).unwrap(), Some(0));
        let up = array![[0.0, 1.0, 2.0, 3.0], [0.0, 1.0, 2.0, 3.0]];
        assert_eq!(transition_layer(&up.view(), 0.05, 1e-3).unwrap(), None);
        let one = array![[1.0, 0.0]];
        assert!(matches!(transition_layer(&one.view(), 0.05, 1e-3), Err(ForgeError::Detection(_))));
    }
}
