//! Masked next-token cross-entropy with optional per-group weights.

use ndarray::{Array2, ArrayView2};

use crate::error::{ForgeError, Result};
use crate::multimodal::MultimodalSequence;

/// `w_i = (max_j L_j / ln L_i)^ord`, rescaled so that `Σ w_i = Σ L_i`.
pub fn dynamic_loss_weights(lengths: &[usize], ord: f64) -> Result<Vec<f64>> {
    if let Some(&bad) = lengths.iter().find(|&&l| l < 2) {
        return Err(ForgeError::Input(format!("response length {bad} < 2 has no positive log")));
    }
    if !(ord.is_finite() && ord >= 0.0) {
        return Err(ForgeError::Input(format!("ord must be finite and non-negative, got {ord}")));
    }
    let Some(&max) = lengths.iter().max() else {
        return Ok(Vec::new());
    };
    let raw: Vec<f64> = lengths
        .iter()
        .map(|&l| (max as f64 / (l as f64).ln()).powf(ord))
        .collect();
    let raw_sum: f64 = raw.iter().sum();
    let len_sum: f64 = lengths.iter().map(|&l| l as f64).sum();
    Ok(raw.iter().map(|r| len_sum * (r / raw_sum)).collect())
}

/// Loss targets of a packed batch: logit row, target token, weight.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Targets {
    pub rows: Vec<usize>,
    pub tokens: Vec<u32>,
    pub weights: Vec<f64>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Per-position weights of one sequence: the group's weight inside each
/// response group, 1 at other masked positions.
fn position_weights(
    n: usize,
    loss_mask: &[bool],
    groups: &[(usize, usize)],
    weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if loss_mask.len() != n {
        return Err(ForgeError::Input(format!("loss mask has {} entries for {n} tokens", loss_mask.len())));
    }
    if loss_mask.first() == Some(&true) {
        return Err(ForgeError::Input("position 0 has no preceding row to predict it".into()));
    }
    if let Some(w) = weights {
        if w.len() != groups.len() {
            return Err(ForgeError::Input(format!("{} weights for {} response groups", w.len(), groups.len())));
        }
    }
    let mut out = vec![1.0; n];
    let mut seen = vec![false; n];
    for (g, &(start, len)) in groups.iter().enumerate() {
        if len == 0 || start + len > n {
            return Err(ForgeError::Input(format!("response group {g} out of range")));
        }
        for t in start..start + len {
            if seen[t] {
                return Err(ForgeError::Input(format!("response groups overlap at {t}")));
            }
            if !loss_mask[t] {
                return Err(ForgeError::Input(format!("response group {g} covers unmasked position {t}")));
            }
            seen[t] = true;
            if let Some(w) = weights {
                out[t] = w[g];
            }
        }
    }
    Ok(out)
}

/// Collects the targets of packed sequences. With `ord`, dynamic weights are
/// computed over every response group of the batch.
pub fn batch_targets(seqs: &[&MultimodalSequence], ord: Option<f64>) -> Result<Targets> {
    let weights = match ord {
        Some(o) => {
            let lengths: Vec<usize> = seqs.iter().flat_map(|s| s.response_groups.iter().map(|g| g.1)).collect();
            Some(dynamic_loss_weights(&lengths, o)?)
        }
        None => None,
    };
    let mut t = Targets::default();
    let (mut offset, mut gi) = (0, 0);
    for s in seqs {
        let k = s.response_groups.len();
        let w = weights.as_ref().map(|w| &w[gi..gi + k]);
        gi += k;
        let pw = position_weights(s.len(), &s.loss_mask, &s.response_groups, w)?;
        for (pos, &m) in s.loss_mask.iter().enumerate() {
            if m {
                t.rows.push(offset + pos - 1);
                t.tokens.push(s.token_ids[pos]);
                t.weights.push(pw[pos]);
            }
        }
        offset += s.len();
    }
    Ok(t)
}

/// Weighted mean cross-entropy and its gradient with respect to `logits`.
/// The denominator is the number of targets; weights scale the numerator.
pub fn loss_and_grad(logits: &ArrayView2<f32>, targets: &Targets, want_grad: bool) -> Result<(f64, Option<Array2<f32>>)> {
    if targets.is_empty() {
        return Err(ForgeError::Input("no supervised positions".into()));
    }
    let n = targets.len() as f64;
    let v = logits.ncols();
    let mut grad = want_grad.then(|| Array2::<f32>::zeros(logits.raw_dim()));
    let mut total = 0.0f64;
    let mut probs = vec![0.0f64; v];
    for ((&r, &tok), &w) in targets.rows.iter().zip(&targets.tokens).zip(&targets.weights) {
        let row = logits.row(r);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let mut sum = 0.0;
        for (p, &x) in probs.iter_mut().zip(row.iter()) {
            *p = (x as f64 - max).exp();
            sum += *p;
        }
        let lse = max + sum.ln();
        total += w * (lse - row[tok as usize] as f64);
        if let Some(g) = grad.as_mut() {
            let mut grow = g.row_mut(r);
            let scale = w / n;
            for (j, gv) in grow.iter_mut().enumerate() {
                let onehot = if j == tok as usize { 1.0 } else { 0.0 };
                *gv += ((probs[j] / sum - onehot) * scale) as f32;
            }
        }
    }
    Ok((total / n, grad))
}

/// Weighted masked cross-entropy of one sequence. Logit row `t − 1`
/// predicts token `t` for every masked `t`.
pub fn masked_weighted_loss(
    logits: &ArrayView2<f32>,
    token_ids: &[u32],
    loss_mask: &[bool],
    response_groups: &[(usize, usize)],
    weights: Option<&[f64]>,
) -> Result<f64> {
    let n = token_ids.len();
    if logits.nrows() != n {
        return Err(ForgeError::Input(format!("{} logit rows for {n} tokens", logits.nrows())));
    }
    let pw = position_weights(n, loss_mask, response_groups, weights)?;
    let mut t = Targets::default();
    for pos in (0..n).filter(|&p| loss_mask[p]) {
        t.rows.push(pos - 1);
        t.tokens.push(token_ids[pos]);
        t.weights.push(pw[pos]);
    }
    if t.tokens.iter().any(|&tok| tok as usize >= logits.ncols()) {
        return Err(ForgeError::Input("target token outside the logit width".into()));
    }
    Ok(loss_and_grad(logits, &t, false)?.0)
}
