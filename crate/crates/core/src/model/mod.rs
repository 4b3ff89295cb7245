//! Decoder-only transformer with per-layer hidden-state access.
//!
//! Llama-shaped at toy scale: RMS norm, rotary positions, gated SiLU MLP,
//! separate (untied) token embedding and unembedding matrices.

mod packed;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::nn::attention::Rope;
use crate::nn::block::{KvCache, RopeCtx};
use crate::nn::norm::RMS_EPS;
use crate::nn::{normal_matrix, BlockParams, BlockShape, Layout, INIT_STD};
use crate::params::Parameters;

pub use packed::{DecoderCache, GradPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Rms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosKind {
    Rotary,
}

/// Architecture of a decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_kind: NormKind,
    pub pos_kind: PosKind,
    pub mlp_ratio: f64,
}

/// Smallest depth that leaves a non-empty replaceable range between the
/// preserved first and last layers.
pub const MIN_LAYERS: usize = 4;

impl ModelSpec {
    /// The reference toy shape: 12 layers, width 64, 4 heads, MLP ratio 4.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 12,
            d_model: 64,
            n_heads: 4,
            vocab_size,
            max_seq_len: 128,
            norm_kind: NormKind::Rms,
            pos_kind: PosKind::Rotary,
            mlp_ratio: 4.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.d_model as f64 * self.mlp_ratio).round() as usize
    }

    /// Shape checks shared by every decoder, regardless of depth.
    fn validate_shape(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ForgeError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(ForgeError::Config("mlp_ratio must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ForgeError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(ForgeError::Config("rotary positions need an even head width".into()));
        }
        Ok(())
    }

    /// Full validation, including the minimum depth required for surgery.
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if self.n_layers < MIN_LAYERS {
            return Err(ForgeError::Config(format!(
                "n_layers must be at least {MIN_LAYERS}, got {}",
                self.n_layers
            )));
        }
        Ok(())
    }

    fn block_shape(&self) -> BlockShape {
        BlockShape {
            n_heads: self.n_heads,
            causal: true,
        }
    }

    fn rope(&self) -> Rope {
        Rope::new(self.max_seq_len, self.head_dim())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub spec: ModelSpec,
    /// `[vocab × d_model]`
    pub token_embedding: Array2<f32>,
    pub layers: Vec<BlockParams>,
    pub final_norm: Array1<f32>,
    /// `[vocab × d_model]`
    pub unembedding: Array2<f32>,
}

/// Replacement embedding rows starting at sequence position `start`.
#[derive(Debug, Clone)]
pub struct EmbeddingOverride {
    pub start: usize,
    pub rows: Array2<f32>,
}

/// Hidden states of every layer plus final logits for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    /// `[n_layers × n_tokens × d_model]`, entry `ℓ` is the output of layer `ℓ`.
    pub hidden_states: Array3<f32>,
    /// `[n_tokens × vocab]`
    pub logits: Array2<f64>,
}

/// Parameter-name prefix of decoder layer `i`.
pub fn layer_prefix(i: usize) -> String {
    format!("layers.{i}")
}

/// Initialise a decoder: normal(0, 0.02) for embeddings and projections,
/// unit norm gains, zero output projections in every block.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<DecoderModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d, h) = (spec.vocab_size, spec.d_model, spec.mlp_hidden());
    let token_embedding = normal_matrix(v, d, INIT_STD, &mut rng);
    let layers = (0..spec.n_layers)
        .map(|_| BlockParams::init(d, h, &mut rng))
        .collect();
    let unembedding = normal_matrix(v, d, INIT_STD, &mut rng);
    Ok(DecoderModel {
        spec: spec.clone(),
        token_embedding,
        layers,
        final_norm: Array1::ones(d),
        unembedding,
    })
}

impl Parameters for DecoderModel {
    fn named_params(&self) -> Vec<(String, ArrayViewD<'_, f32>)> {
        let mut out = vec![("token_embedding".to_string(), self.token_embedding.view().into_dyn())];
        for (i, l) in self.layers.iter().enumerate() {
            l.push_named(&layer_prefix(i), &mut out);
        }
        out.push(("final_norm".into(), self.final_norm.view().into_dyn()));
        out.push(("unembedding".into(), self.unembedding.view().into_dyn()));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f32>)> {
        let mut out = vec![("token_embedding".to_string(), self.token_embedding.view_mut().into_dyn())];
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.push_named_mut(&layer_prefix(i), &mut out);
        }
        out.push(("final_norm".into(), self.final_norm.view_mut().into_dyn()));
        out.push(("unembedding".into(), self.unembedding.view_mut().into_dyn()));
        out
    }
}

impl DecoderModel {
    /// Assemble a decoder from explicit parts. Only shapes are checked, so
    /// shallow hand-built models are allowed here.
    pub fn from_parts(
        spec: ModelSpec,
        token_embedding: Array2<f32>,
        layers: Vec<BlockParams>,
        final_norm: Array1<f32>,
        unembedding: Array2<f32>,
    ) -> Result<Self> {
        spec.validate_shape()?;
        let m = Self {
            spec,
            token_embedding,
            layers,
            final_norm,
            unembedding,
        };
        m.check_shapes()?;
        Ok(m)
    }

    /// All-zero model of the given shape. Only shapes are validated, so this
    /// also serves as the loading skeleton for shallow archives.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate_shape()?;
        let (v, d, h) = (spec.vocab_size, spec.d_model, spec.mlp_hidden());
        let block = BlockParams {
            attn_norm: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            mlp_norm: Array1::zeros(d),
            w_gate: Array2::zeros((d, h)),
            w_up: Array2::zeros((d, h)),
            w_down: Array2::zeros((h, d)),
        };
        Ok(Self {
            spec: spec.clone(),
            token_embedding: Array2::zeros((v, d)),
            layers: vec![block; spec.n_layers],
            final_norm: Array1::zeros(d),
            unembedding: Array2::zeros((v, d)),
        })
    }

    pub fn check_shapes(&self) -> Result<()> {
        let s = &self.spec;
        let (v, d, h) = (s.vocab_size, s.d_model, s.mlp_hidden());
        let bad = |what: &str| Err(ForgeError::Config(format!("{what} has the wrong shape")));
        if self.layers.len() != s.n_layers {
            return Err(ForgeError::Config(format!(
                "spec declares {} layers, model has {}",
                s.n_layers,
                self.layers.len()
            )));
        }
        if self.token_embedding.dim() != (v, d) {
            return bad("token_embedding");
        }
        if self.unembedding.dim() != (v, d) {
            return bad("unembedding");
        }
        if self.final_norm.len() != d {
            return bad("final_norm");
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.wq.dim() != (d, d) || l.w_gate.dim() != (d, h) || l.w_down.dim() != (h, d) {
                return bad(&layer_prefix(i));
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_tokens(&self, token_ids: &[u32]) -> Result<()> {
        if token_ids.is_empty() {
            return Err(ForgeError::Input("empty token sequence".into()));
        }
        if token_ids.len() > self.spec.max_seq_len {
            return Err(ForgeError::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                token_ids.len(),
                self.spec.max_seq_len
            )));
        }
        if let Some(&t) = token_ids.iter().find(|&&t| t as usize >= self.spec.vocab_size) {
            return Err(ForgeError::Input(format!(
                "token id {t} out of range for vocabulary of {}",
                self.spec.vocab_size
            )));
        }
        Ok(())
    }

    /// Token embedding rows for `token_ids`.
    pub fn embed(&self, token_ids: &[u32]) -> Array2<f32> {
        let idx: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
        self.token_embedding.select(Axis(0), &idx)
    }

    /// Embeddings with `overrides` written over their spans.
    pub fn embed_with_overrides(
        &self,
        token_ids: &[u32],
        overrides: &[EmbeddingOverride],
    ) -> Result<Array2<f32>> {
        self.check_tokens(token_ids)?;
        let n = token_ids.len();
        let d = self.spec.d_model;
        let mut spans: Vec<(usize, usize)> = Vec::with_capacity(overrides.len());
        for o in overrides {
            let len = o.rows.nrows();
            if o.rows.ncols() != d {
                return Err(ForgeError::Input(format!(
                    "override width {} does not match d_model {d}",
                    o.rows.ncols()
                )));
            }
            if len == 0 || o.start + len > n {
                return Err(ForgeError::Input(format!(
                    "override span {}..{} outside sequence of {n}",
                    o.start,
                    o.start + len
                )));
            }
            if spans.iter().any(|&(s, e)| o.start < e && s < o.start + len) {
                return Err(ForgeError::Input("override spans overlap".into()));
            }
            spans.push((o.start, o.start + len));
        }
        let mut x = self.embed(token_ids);
        for o in overrides {
            x.slice_mut(s![o.start..o.start + o.rows.nrows(), ..]).assign(&o.rows);
        }
        Ok(x)
    }

    /// Full forward pass recording the output of every layer.
    pub fn forward_with_hidden(
        &self,
        token_ids: &[u32],
        overrides: &[EmbeddingOverride],
    ) -> Result<HiddenTrace> {
        let mut x = self.embed_with_overrides(token_ids, overrides)?;
        let n = token_ids.len();
        let layout = Layout::single(n);
        let positions = layout.positions();
        let rope = self.spec.rope();
        let ctx = Some(RopeCtx {
            rope: &rope,
            positions: &positions,
        });
        let mut hidden = Array3::zeros((self.n_layers(), n, self.spec.d_model));
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x, self.spec.block_shape(), &layout, ctx, false).0;
            hidden.index_axis_mut(Axis(0), i).assign(&x);
        }
        let logits = self.logits_f64(&x.view());
        Ok(HiddenTrace {
            hidden_states: hidden,
            logits,
        })
    }

    /// Output of the first `n` layers only (`n = 0` returns the embeddings).
    pub fn forward_prefix(
        &self,
        token_ids: &[u32],
        overrides: &[EmbeddingOverride],
        n: usize,
    ) -> Result<Array2<f32>> {
        let mut x = self.embed_with_overrides(token_ids, overrides)?;
        let layout = Layout::single(token_ids.len());
        let positions = layout.positions();
        let rope = self.spec.rope();
        let ctx = Some(RopeCtx {
            rope: &rope,
            positions: &positions,
        });
        for layer in self.layers.iter().take(n) {
            x = layer.forward(&x, self.spec.block_shape(), &layout, ctx, false).0;
        }
        Ok(x)
    }

    /// `norm(hidden) · Wᵀ` evaluated in double precision.
    pub fn logits_f64(&self, hidden: &ArrayView2<f32>) -> Array2<f64> {
        let d = self.spec.d_model;
        let (n, v) = (hidden.nrows(), self.spec.vocab_size);
        let mut out = Array2::zeros((n, v));
        let gain: Vec<f64> = self.final_norm.iter().map(|&g| g as f64).collect();
        let mut normed = vec![0.0f64; d];
        for (r, row) in hidden.rows().into_iter().enumerate() {
            let ms = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMS_EPS as f64).sqrt();
            for (i, &x) in row.iter().enumerate() {
                normed[i] = x as f64 * inv * gain[i];
            }
            for t in 0..v {
                let w = self.unembedding.row(t);
                let mut acc = 0.0f64;
                for i in 0..d {
                    acc += normed[i] * w[i] as f64;
                }
                out[[r, t]] = acc;
            }
        }
        out
    }

    /// Row-wise `softmax(norm(hidden) · Wᵀ)` in double precision.
    pub fn unembed(&self, hidden: &ArrayView2<f32>) -> Result<Array2<f64>> {
        if hidden.ncols() != self.spec.d_model {
            return Err(ForgeError::Input(format!(
                "hidden width {} does not match d_model {}",
                hidden.ncols(),
                self.spec.d_model
            )));
        }
        let mut p = self.logits_f64(hidden);
        softmax_rows_f64(&mut p);
        Ok(p)
    }

    /// Greedy decoding with a key/value cache. Stops after `max_new` tokens,
    /// on `stop` (not included in the output), or when the context is full.
    pub fn generate_greedy(
        &self,
        prompt: &[u32],
        overrides: &[EmbeddingOverride],
        max_new: usize,
        stop: Option<u32>,
    ) -> Result<Generation> {
        let x0 = self.embed_with_overrides(prompt, overrides)?;
        let rope = self.spec.rope();
        let mut caches = vec![KvCache::default(); self.n_layers()];
        let mut x = x0;
        let mut pos = 0;
        let mut tokens = Vec::new();
        loop {
            let rows = x.nrows();
            for (layer, kv) in self.layers.iter().zip(caches.iter_mut()) {
                x = layer.forward_incremental(&x, self.spec.n_heads, &rope, pos, kv);
            }
            pos += rows;
            let last = x.slice(s![rows - 1..rows, ..]);
            let logits = self.logits_f64(&last);
            let next = argmax(logits.row(0));
            if Some(next) == stop {
                return Ok(Generation { tokens, stopped: true });
            }
            tokens.push(next);
            if tokens.len() >= max_new || pos >= self.spec.max_seq_len {
                return Ok(Generation { tokens, stopped: false });
            }
            x = self.embed(&[next]);
        }
    }
}

/// Output of [`DecoderModel::generate_greedy`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Whether decoding ended on the stop token rather than a length limit.
    pub stopped: bool,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

pub fn softmax_rows_f64(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> DecoderModel {
        let mut spec = ModelSpec::toy(72);
        spec.max_seq_len = 32;
        let mut m = init_model(&spec, 7).unwrap();
        // give the zero-initialised projections some weight so layers differ
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for l in &mut m.layers {
            l.wo = normal_matrix(64, 64, 0.05, &mut rng);
            l.w_down = normal_matrix(256, 64, 0.05, &mut rng);
        }
        m
    }

    #[test]
    fn init_shapes_and_determinism() {
        let spec = ModelSpec::toy(72);
        let a = init_model(&spec, 7).unwrap();
        assert_eq!(a.layers.len(), 12);
        assert_eq!(a.unembedding.dim(), (72, 64));
        let b = init_model(&spec, 7).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = init_model(&spec, 8).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn shallow_or_misshapen_specs_are_rejected() {
        let mut spec = ModelSpec::toy(72);
        spec.n_layers = 2;
        assert!(matches!(init_model(&spec, 1), Err(ForgeError::Config(_))));
        let mut spec = ModelSpec::toy(72);
        spec.n_heads = 5;
        assert!(matches!(init_model(&spec, 1), Err(ForgeError::Config(_))));
    }

    #[test]
    fn forward_shapes() {
        let m = toy();
        let ids: Vec<u32> = (0..10).collect();
        let t = m.forward_with_hidden(&ids, &[]).unwrap();
        assert_eq!(t.hidden_states.dim(), (12, 10, 64));
        assert_eq!(t.logits.dim(), (10, 72));
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        let m = toy();
        assert!(matches!(m.forward_with_hidden(&[1, 72], &[]), Err(ForgeError::Input(_))));
        let o = EmbeddingOverride { start: 3, rows: Array2::zeros((4, 64)) };
        assert!(matches!(m.forward_with_hidden(&[1, 2, 3, 4], &[o]), Err(ForgeError::Input(_))));
        let a = EmbeddingOverride { start: 0, rows: Array2::zeros((2, 64)) };
        let b = EmbeddingOverride { start: 1, rows: Array2::zeros((2, 64)) };
        assert!(m.forward_with_hidden(&[1, 2, 3, 4], &[a, b]).is_err());
    }

    #[test]
    fn substitution_identity() {
        let m = toy();
        let ids: Vec<u32> = vec![3, 9, 14, 15, 16, 20, 1];
        let base = m.forward_with_hidden(&ids, &[]).unwrap();
        let o = EmbeddingOverride { start: 2, rows: m.embed(&ids[2..6]) };
        let sub = m.forward_with_hidden(&ids, &[o]).unwrap();
        assert_eq!(base, sub);
    }

    #[test]
    fn unembed_rows_are_distributions_and_match_logits() {
        let m = toy();
        let ids: Vec<u32> = vec![5, 6, 7, 8, 9];
        let t = m.forward_with_hidden(&ids, &[]).unwrap();
        let last = t.hidden_states.index_axis(Axis(0), 11);
        let p = m.unembed(&last).unwrap();
        let mut q = t.logits.clone();
        softmax_rows_f64(&mut q);
        for (row, qrow) in p.rows().into_iter().zip(q.rows()) {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
            for (a, b) in row.iter().zip(qrow.iter()) {
                assert_eq!(a, b);
            }
        }
        assert!(m.unembed(&Array2::<f32>::zeros((1, 63)).view()).is_err());
    }

    #[test]
    fn greedy_matches_stepwise_argmax() {
        let m = toy();
        let prompt: Vec<u32> = vec![1, 3, 10, 11, 12];
        let gen = m.generate_greedy(&prompt, &[], 6, None).unwrap();
        assert_eq!(gen.tokens.len(), 6);
        let mut seq = prompt.clone();
        for &tok in &gen.tokens {
            let t = m.forward_with_hidden(&seq, &[]).unwrap();
            let expect = argmax(t.logits.row(seq.len() - 1));
            assert_eq!(tok, expect);
            seq.push(tok);
        }
    }
}
