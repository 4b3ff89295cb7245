//! Pre-norm transformer block: RMS norm → attention → residual, RMS norm →
//! gated SiLU MLP → residual.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Zip};
use rand::Rng;

use super::act::sigmoid;
use super::attention::{attention, attention_backward, attention_cached, Rope};
use super::norm::{rms_norm, rms_norm_backward, NormCache};
use super::{matmul_acc, normal_matrix, Layout, INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub n_heads: usize,
    pub causal: bool,
}

/// Weights of one block. Projections are stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn_norm: Array1<f32>,
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
    pub mlp_norm: Array1<f32>,
    pub w_gate: Array2<f32>,
    pub w_up: Array2<f32>,
    pub w_down: Array2<f32>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    norm1: NormCache,
    h1: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    probs: Vec<Array2<f32>>,
    attn: Array2<f32>,
    norm2: NormCache,
    h2: Array2<f32>,
    gate: Array2<f32>,
    gate_sig: Array2<f32>,
    up: Array2<f32>,
    act: Array2<f32>,
}

/// Rotated keys and values of the positions decoded so far.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    k: Vec<f32>,
    v: Vec<f32>,
    width: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.k.len() / self.width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rotary table plus the per-row positions it should be applied with.
#[derive(Clone, Copy)]
pub struct RopeCtx<'a> {
    pub rope: &'a Rope,
    pub positions: &'a [usize],
}

impl BlockParams {
    /// Normal(0, 0.02) projections; output projections of both branches are
    /// zero so a fresh block is the identity map.
    pub fn init(d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let wq = normal_matrix(d, d, INIT_STD, rng);
        let wk = normal_matrix(d, d, INIT_STD, rng);
        let wv = normal_matrix(d, d, INIT_STD, rng);
        let w_gate = normal_matrix(d, hidden, INIT_STD, rng);
        let w_up = normal_matrix(d, hidden, INIT_STD, rng);
        Self {
            attn_norm: Array1::ones(d),
            wq,
            wk,
            wv,
            wo: Array2::zeros((d, d)),
            mlp_norm: Array1::ones(d),
            w_gate,
            w_up,
            w_down: Array2::zeros((hidden, d)),
        }
    }

    pub fn width(&self) -> usize {
        self.wq.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w_gate.ncols()
    }

    pub fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f32>)>) {
        out.push((format!("{prefix}.attn_norm"), self.attn_norm.view().into_dyn()));
        out.push((format!("{prefix}.wq"), self.wq.view().into_dyn()));
        out.push((format!("{prefix}.wk"), self.wk.view().into_dyn()));
        out.push((format!("{prefix}.wv"), self.wv.view().into_dyn()));
        out.push((format!("{prefix}.wo"), self.wo.view().into_dyn()));
        out.push((format!("{prefix}.mlp_norm"), self.mlp_norm.view().into_dyn()));
        out.push((format!("{prefix}.w_gate"), self.w_gate.view().into_dyn()));
        out.push((format!("{prefix}.w_up"), self.w_up.view().into_dyn()));
        out.push((format!("{prefix}.w_down"), self.w_down.view().into_dyn()));
    }

    pub fn push_named_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f32>)>,
    ) {
        out.push((format!("{prefix}.attn_norm"), self.attn_norm.view_mut().into_dyn()));
        out.push((format!("{prefix}.wq"), self.wq.view_mut().into_dyn()));
        out.push((format!("{prefix}.wk"), self.wk.view_mut().into_dyn()));
        out.push((format!("{prefix}.wv"), self.wv.view_mut().into_dyn()));
        out.push((format!("{prefix}.wo"), self.wo.view_mut().into_dyn()));
        out.push((format!("{prefix}.mlp_norm"), self.mlp_norm.view_mut().into_dyn()));
        out.push((format!("{prefix}.w_gate"), self.w_gate.view_mut().into_dyn()));
        out.push((format!("{prefix}.w_up"), self.w_up.view_mut().into_dyn()));
        out.push((format!("{prefix}.w_down"), self.w_down.view_mut().into_dyn()));
    }

    /// Forward over packed rows. The cache is only built when `keep` is set.
    pub fn forward(
        &self,
        x: &Array2<f32>,
        shape: BlockShape,
        layout: &Layout,
        rope: Option<RopeCtx<'_>>,
        keep: bool,
    ) -> (Array2<f32>, Option<BlockCache>) {
        let (h1, norm1) = rms_norm(&x.view(), &self.attn_norm.view());
        let mut q = h1.dot(&self.wq);
        let mut k = h1.dot(&self.wk);
        let v = h1.dot(&self.wv);
        if let Some(r) = rope {
            r.rope.rotate(&mut q, r.positions, false);
            r.rope.rotate(&mut k, r.positions, false);
        }
        let (attn, probs) = attention(&q, &k, &v, layout, shape.n_heads, shape.causal);
        let mut x2 = attn.dot(&self.wo);
        x2 += x;

        let (h2, norm2) = rms_norm(&x2.view(), &self.mlp_norm.view());
        let gate = h2.dot(&self.w_gate);
        let up = h2.dot(&self.w_up);
        let (gate_sig, act) = swiglu(&gate, &up);
        let mut out = act.dot(&self.w_down);
        out += &x2;

        let cache = keep.then(|| BlockCache {
            norm1,
            h1,
            q,
            k,
            v,
            probs,
            attn,
            norm2,
            h2,
            gate,
            gate_sig,
            up,
            act,
        });
        (out, cache)
    }

    /// Backward pass. Accumulates weight gradients into `grads` when given and
    /// returns the input gradient when `need_dx` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        dy: &Array2<f32>,
        cache: &BlockCache,
        shape: BlockShape,
        layout: &Layout,
        rope: Option<RopeCtx<'_>>,
        mut grads: Option<&mut BlockParams>,
        need_dx: bool,
    ) -> Option<Array2<f32>> {
        // MLP branch
        let d_act = dy.dot(&self.w_down.t());
        let mut d_gate = Array2::zeros(cache.gate.raw_dim());
        let mut d_up = Array2::zeros(cache.up.raw_dim());
        Zip::from(&mut d_gate)
            .and(&mut d_up)
            .and(&d_act)
            .and(&cache.gate)
            .and(&cache.gate_sig)
            .and(&cache.up)
            .for_each(|dg, du, &da, &g, &s, &u| {
                *dg = da * u * s * (1.0 + g * (1.0 - s));
                *du = da * g * s;
            });
        if let Some(g) = grads.as_deref_mut() {
            matmul_acc(&cache.act.t(), &dy.view(), &mut g.w_down.view_mut());
            matmul_acc(&cache.h2.t(), &d_gate.view(), &mut g.w_gate.view_mut());
            matmul_acc(&cache.h2.t(), &d_up.view(), &mut g.w_up.view_mut());
        }
        let mut dh2 = d_gate.dot(&self.w_gate.t());
        matmul_acc(&d_up.view(), &self.w_up.t(), &mut dh2.view_mut());
        let mut dx2 = rms_norm_backward(
            &dh2.view(),
            &self.mlp_norm.view(),
            &cache.norm2,
            grads.as_deref_mut().map(|g| &mut g.mlp_norm),
        );
        dx2 += dy;

        // attention branch
        let d_attn = dx2.dot(&self.wo.t());
        if let Some(g) = grads.as_deref_mut() {
            matmul_acc(&cache.attn.t(), &dx2.view(), &mut g.wo.view_mut());
        }
        let (mut dq, mut dk, dv) = attention_backward(
            &d_attn,
            &cache.q,
            &cache.k,
            &cache.v,
            &cache.probs,
            layout,
            shape.n_heads,
        );
        if let Some(r) = rope {
            r.rope.rotate(&mut dq, r.positions, true);
            r.rope.rotate(&mut dk, r.positions, true);
        }
        if let Some(g) = grads.as_deref_mut() {
            matmul_acc(&cache.h1.t(), &dq.view(), &mut g.wq.view_mut());
            matmul_acc(&cache.h1.t(), &dk.view(), &mut g.wk.view_mut());
            matmul_acc(&cache.h1.t(), &dv.view(), &mut g.wv.view_mut());
        }
        if !need_dx && grads.is_none() {
            return None;
        }
        let mut dh1 = dq.dot(&self.wq.t());
        matmul_acc(&dk.view(), &self.wk.t(), &mut dh1.view_mut());
        matmul_acc(&dv.view(), &self.wv.t(), &mut dh1.view_mut());
        let mut dx = rms_norm_backward(
            &dh1.view(),
            &self.attn_norm.view(),
            &cache.norm1,
            grads.map(|g| &mut g.attn_norm),
        );
        if !need_dx {
            return None;
        }
        dx += &dx2;
        Some(dx)
    }

    /// Causal forward of new rows at absolute positions `pos0..`, attending to
    /// everything already in `kv` (which is extended in place).
    pub fn forward_incremental(
        &self,
        x: &Array2<f32>,
        n_heads: usize,
        rope: &Rope,
        pos0: usize,
        kv: &mut KvCache,
    ) -> Array2<f32> {
        let positions: Vec<usize> = (pos0..pos0 + x.nrows()).collect();
        let (h1, _) = rms_norm(&x.view(), &self.attn_norm.view());
        let mut q = h1.dot(&self.wq);
        let mut k = h1.dot(&self.wk);
        let v = h1.dot(&self.wv);
        rope.rotate(&mut q, &positions, false);
        rope.rotate(&mut k, &positions, false);
        let d = x.ncols();
        kv.width = d;
        kv.k.extend(k.iter());
        kv.v.extend(v.iter());
        let n = kv.len();
        let k_all = ArrayView2::from_shape((n, d), &kv.k).expect("kv shape");
        let v_all = ArrayView2::from_shape((n, d), &kv.v).expect("kv shape");
        let attn = attention_cached(&q, &k_all, &v_all, pos0, n_heads);
        let mut x2 = attn.dot(&self.wo);
        x2 += x;
        let (h2, _) = rms_norm(&x2.view(), &self.mlp_norm.view());
        let gate = h2.dot(&self.w_gate);
        let up = h2.dot(&self.w_up);
        let (_, act) = swiglu(&gate, &up);
        let mut out = act.dot(&self.w_down);
        out += &x2;
        out
    }
}

/// `(σ(gate), gate · σ(gate) · up)`
fn swiglu(gate: &Array2<f32>, up: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let sig = gate.mapv(sigmoid);
    let mut act = gate * &sig;
    act *= up;
    (sig, act)
}
