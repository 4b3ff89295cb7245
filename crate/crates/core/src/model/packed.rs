//! Training-time forward and backward over several packed sequences.

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};

use super::{layer_prefix, DecoderModel};
use crate::nn::block::RopeCtx;
use crate::nn::norm::{rms_norm, rms_norm_backward, NormCache};
use crate::nn::{matmul_acc, BlockCache, Layout};

/// Activations saved by [`DecoderModel::forward_train`].
pub struct DecoderCache {
    layout: Layout,
    positions: Vec<usize>,
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    final_h: Array2<f32>,
}

/// Which gradients a backward pass has to produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradPlan {
    pub layers: Vec<bool>,
    pub final_norm: bool,
    pub unembedding: bool,
    pub token_embedding: bool,
    /// Gradient with respect to the layer-0 input rows (needed to reach
    /// injected image features).
    pub input: bool,
}

impl GradPlan {
    pub fn from_trainable(model: &DecoderModel, trainable: &BTreeSet<String>, input: bool) -> Self {
        let layers = (0..model.n_layers())
            .map(|i| {
                let p = format!("{}.", layer_prefix(i));
                trainable.iter().any(|n| n.starts_with(&p))
            })
            .collect();
        Self {
            layers,
            final_norm: trainable.contains("final_norm"),
            unembedding: trainable.contains("unembedding"),
            token_embedding: trainable.contains("token_embedding"),
            input,
        }
    }

    /// Lowest layer the backward pass must reach, or `None` when nothing
    /// below the output head needs a gradient.
    fn lowest_layer(&self) -> Option<usize> {
        if self.input || self.token_embedding {
            return Some(0);
        }
        self.layers.iter().position(|&t| t)
    }
}

impl DecoderModel {
    /// Forward over packed rows `x0` (embeddings, possibly with injected
    /// image features). Returns f32 logits for every row.
    pub fn forward_train(&self, x0: Array2<f32>, layout: &Layout) -> (Array2<f32>, DecoderCache) {
        let positions = layout.positions();
        let rope = self.spec.rope();
        let mut x = x0;
        let mut blocks = Vec::with_capacity(self.n_layers());
        for layer in &self.layers {
            let ctx = Some(RopeCtx {
                rope: &rope,
                positions: &positions,
            });
            let (y, cache) = layer.forward(&x, self.spec.block_shape(), layout, ctx, true);
            blocks.push(cache.expect("cache requested"));
            x = y;
        }
        let (final_h, final_norm) = rms_norm(&x.view(), &self.final_norm.view());
        let logits = final_h.dot(&self.unembedding.t());
        let cache = DecoderCache {
            layout: layout.clone(),
            positions,
            blocks,
            final_norm,
            final_h,
        };
        (logits, cache)
    }

    /// Backward from logit gradients. Weight gradients are accumulated into
    /// `grads` per `plan`; returns the gradient of the layer-0 input rows when
    /// `plan.input` or `plan.token_embedding` is set. Token-embedding
    /// gradients are left to the caller, which knows which rows are tokens.
    pub fn backward_train(
        &self,
        cache: &DecoderCache,
        dlogits: &Array2<f32>,
        grads: &mut DecoderModel,
        plan: &GradPlan,
    ) -> Option<Array2<f32>> {
        if plan.unembedding {
            matmul_acc(&dlogits.t(), &cache.final_h.view(), &mut grads.unembedding.view_mut());
        }
        let lowest = plan.lowest_layer()?;
        let dh = dlogits.dot(&self.unembedding);
        let mut dx = rms_norm_backward(
            &dh.view(),
            &self.final_norm.view(),
            &cache.final_norm,
            plan.final_norm.then_some(&mut grads.final_norm),
        );
        let rope = self.spec.rope();
        let want_input = plan.input || plan.token_embedding;
        for i in (lowest..self.n_layers()).rev() {
            let ctx = Some(RopeCtx {
                rope: &rope,
                positions: &cache.positions,
            });
            let need_dx = i > lowest || want_input;
            let g = plan.layers[i].then(|| &mut grads.layers[i]);
            match self.layers[i].backward(
                &dx,
                &cache.blocks[i],
                self.spec.block_shape(),
                &cache.layout,
                ctx,
                g,
                need_dx,
            ) {
                Some(next) => dx = next,
                None => return None,
            }
        }
        want_input.then_some(dx)
    }

    /// Scatter-add input-row gradients into the token-embedding gradient,
    /// skipping rows flagged in `skip` (injected features).
    pub fn accumulate_embedding_grad(grads: &mut DecoderModel, tokens: &[u32], dx0: &Array2<f32>, skip: &[bool]) {
        for (r, (&t, row)) in tokens.iter().zip(dx0.axis_iter(Axis(0))).enumerate() {
            if skip.get(r).copied().unwrap_or(false) {
                continue;
            }
            let mut dst = grads.token_embedding.row_mut(t as usize);
            dst += &row;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelSpec};
    use crate::nn::normal_matrix;
    use crate::params::{zeros_like, Parameters};
    use rand::SeedableRng;

    fn small() -> DecoderModel {
        let spec = ModelSpec {
            n_layers: 4,
            d_model: 8,
            n_heads: 2,
            vocab_size: 11,
            max_seq_len: 16,
            norm_kind: crate::model::NormKind::Rms,
            pos_kind: crate::model::PosKind::Rotary,
            mlp_ratio: 2.0,
        };
        let mut m = init_model(&spec, 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for (_, mut t) in m.named_params_mut() {
            let noise = normal_matrix(1, t.len(), 0.25, &mut rng);
            for (v, n) in t.iter_mut().zip(noise.iter()) {
                *v += n;
            }
        }
        m
    }

    fn objective(m: &DecoderModel, tokens: &[u32], layout: &Layout, w: &Array2<f32>) -> f64 {
        let (logits, _) = m.forward_train(m.embed(tokens), layout);
        logits.iter().zip(w.iter()).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    #[test]
    fn packed_forward_matches_single_sequence_forward() {
        let m = small();
        let a: Vec<u32> = vec![1, 2, 3, 4];
        let b: Vec<u32> = vec![5, 6, 7];
        let tokens: Vec<u32> = a.iter().chain(&b).copied().collect();
        let layout = Layout::from_lengths([4, 3]);
        let (logits, _) = m.forward_train(m.embed(&tokens), &layout);
        let tb = m.forward_with_hidden(&b, &[]).unwrap();
        for r in 0..3 {
            for v in 0..11 {
                assert!((logits[[4 + r, v]] as f64 - tb.logits[[r, v]]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let m = small();
        let tokens: Vec<u32> = vec![1, 2, 3, 4, 9, 8, 7];
        let layout = Layout::from_lengths([4, 3]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let w = normal_matrix(7, 11, 1.0, &mut rng);
        let (_, cache) = m.forward_train(m.embed(&tokens), &layout);
        let all: BTreeSet<String> = m.param_names().into_iter().collect();
        let plan = GradPlan::from_trainable(&m, &all, false);
        let mut grads = zeros_like(&m);
        let dx0 = m.backward_train(&cache, &w, &mut grads, &plan).unwrap();
        DecoderModel::accumulate_embedding_grad(&mut grads, &tokens, &dx0, &[]);

        let gviews: Vec<(String, Vec<f32>)> = grads
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.iter().copied().collect()))
            .collect();
        let h = 1e-2f32;
        let mut probe = m.clone();
        for (pi, (name, g)) in gviews.iter().enumerate() {
            for flat in [0usize, 3, 7] {
                let orig = {
                    let mut ps = probe.named_params_mut();
                    let slot = ps[pi].1.iter_mut().nth(flat).unwrap();
                    let o = *slot;
                    *slot = o + h;
                    o
                };
                let lp = objective(&probe, &tokens, &layout, &w);
                *probe.named_params_mut()[pi].1.iter_mut().nth(flat).unwrap() = orig - h;
                let lm = objective(&probe, &tokens, &layout, &w);
                *probe.named_params_mut()[pi].1.iter_mut().nth(flat).unwrap() = orig;
                let num = (lp - lm) / (2.0 * h as f64);
                let ana = g[flat] as f64;
                assert!(
                    (num - ana).abs() < 3e-2 * (1.0 + ana.abs()),
                    "{name}[{flat}]: numeric {num} vs analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn frozen_layers_receive_no_gradient() {
        let m = small();
        let tokens: Vec<u32> = vec![1, 2, 3, 4, 5];
        let layout = Layout::single(5);
        let w = Array2::from_elem((5, 11), 0.1f32);
        let (_, cache) = m.forward_train(m.embed(&tokens), &layout);
        let only: BTreeSet<String> = m
            .param_names()
            .into_iter()
            .filter(|n| n.starts_with("layers.2."))
            .collect();
        let plan = GradPlan::from_trainable(&m, &only, false);
        let mut grads = zeros_like(&m);
        assert!(m.backward_train(&cache, &w, &mut grads, &plan).is_none());
        for (name, t) in grads.named_params() {
            let nonzero = t.iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, name.starts_with("layers.2."), "{name}");
        }
    }
}
