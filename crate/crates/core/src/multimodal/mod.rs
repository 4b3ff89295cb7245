//! Toy patch encoder, the MLP adapter into decoder embedding space, and
//! chat-template rendering of multimodal sequences.

mod template;

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::nn::act::{gelu, gelu_grad};
use crate::nn::norm::{rms_norm, rms_norm_backward, NormCache};
use crate::nn::{matmul_acc, normal_matrix, BlockCache, BlockParams, BlockShape, Layout, INIT_STD};
use crate::params::Parameters;
use crate::synth_data::Raster;

pub use template::{assemble_sequence, ChatTemplate, MultimodalSequence};

/// Shape of a vision bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionSpec {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub adapter_hidden: usize,
    /// Adapter output width; must equal the paired decoder's `d_model`.
    pub out_width: usize,
}

impl VisionSpec {
    /// 32×32 single-channel images, patch 8, 4 blocks of width 48.
    pub fn toy(d_model: usize) -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch_size: 8,
            width: 48,
            depth: 4,
            n_heads: 4,
            mlp_ratio: 4.0,
            adapter_hidden: d_model,
            out_width: d_model,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    fn mlp_hidden(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("width", self.width),
            ("depth", self.depth),
            ("n_heads", self.n_heads),
            ("adapter_hidden", self.adapter_hidden),
            ("out_width", self.out_width),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(ForgeError::Config(format!("vision {name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(ForgeError::Config("image_size must be a multiple of patch_size".into()));
        }
        if self.width % self.n_heads != 0 {
            return Err(ForgeError::Config("vision width not divisible by n_heads".into()));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(ForgeError::Config("vision mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Which part of a bundle a stage may update. The adapter is always
/// trainable; `last_k_layers` also covers the encoder's output norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    FullEncoder,
    LastKLayers(usize),
    AdapterOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    /// `[patch_dim × width]`
    pub patch_w: Array2<f32>,
    pub patch_b: Array1<f32>,
    /// `[n_patches × width]`
    pub pos: Array2<f32>,
    pub layers: Vec<BlockParams>,
    pub final_norm: Array1<f32>,
}

/// `Linear → GELU → Linear`, weights stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub w1: Array2<f32>,
    pub b1: Array1<f32>,
    pub w2: Array2<f32>,
    pub b2: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionBundle {
    pub spec: VisionSpec,
    pub encoder: VisionEncoder,
    pub adapter: Adapter,
    pub scope: TrainableScope,
}

pub fn init_bundle(spec: &VisionSpec, scope: TrainableScope, seed: u64) -> Result<VisionBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = spec.width;
    let encoder = VisionEncoder {
        patch_w: normal_matrix(spec.patch_dim(), w, INIT_STD, &mut rng),
        patch_b: Array1::zeros(w),
        pos: normal_matrix(spec.n_patches(), w, INIT_STD, &mut rng),
        layers: (0..spec.depth)
            .map(|_| BlockParams::init(w, spec.mlp_hidden(), &mut rng))
            .collect(),
        final_norm: Array1::ones(w),
    };
    let adapter = Adapter {
        w1: normal_matrix(w, spec.adapter_hidden, INIT_STD, &mut rng),
        b1: Array1::zeros(spec.adapter_hidden),
        w2: normal_matrix(spec.adapter_hidden, spec.out_width, INIT_STD, &mut rng),
        b2: Array1::zeros(spec.out_width),
    };
    let b = VisionBundle {
        spec: spec.clone(),
        encoder,
        adapter,
        scope,
    };
    b.check_scope()?;
    Ok(b)
}

impl Parameters for VisionBundle {
    fn named_params(&self) -> Vec<(String, ArrayViewD<'_, f32>)> {
        let e = &self.encoder;
        let mut out = vec![
            ("encoder.patch_w".to_string(), e.patch_w.view().into_dyn()),
            ("encoder.patch_b".to_string(), e.patch_b.view().into_dyn()),
            ("encoder.pos".to_string(), e.pos.view().into_dyn()),
        ];
        for (i, l) in e.layers.iter().enumerate() {
            l.push_named(&format!("encoder.layers.{i}"), &mut out);
        }
        out.push(("encoder.final_norm".into(), e.final_norm.view().into_dyn()));
        let a = &self.adapter;
        out.push(("adapter.w1".into(), a.w1.view().into_dyn()));
        out.push(("adapter.b1".into(), a.b1.view().into_dyn()));
        out.push(("adapter.w2".into(), a.w2.view().into_dyn()));
        out.push(("adapter.b2".into(), a.b2.view().into_dyn()));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f32>)> {
        let e = &mut self.encoder;
        let mut out = vec![
            ("encoder.patch_w".to_string(), e.patch_w.view_mut().into_dyn()),
            ("encoder.patch_b".to_string(), e.patch_b.view_mut().into_dyn()),
            ("encoder.pos".to_string(), e.pos.view_mut().into_dyn()),
        ];
        for (i, l) in e.layers.iter_mut().enumerate() {
            l.push_named_mut(&format!("encoder.layers.{i}"), &mut out);
        }
        out.push(("encoder.final_norm".into(), e.final_norm.view_mut().into_dyn()));
        let a = &mut self.adapter;
        out.push(("adapter.w1".into(), a.w1.view_mut().into_dyn()));
        out.push(("adapter.b1".into(), a.b1.view_mut().into_dyn()));
        out.push(("adapter.w2".into(), a.w2.view_mut().into_dyn()));
        out.push(("adapter.b2".into(), a.b2.view_mut().into_dyn()));
        out
    }
}

/// Saved activations of a batched encoder + adapter forward.
pub struct VisionCache {
    layout: Layout,
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    patches: Array2<f32>,
    adapter: AdapterCache,
}

pub struct AdapterCache {
    input: Array2<f32>,
    pre: Array2<f32>,
    act: Array2<f32>,
}

impl VisionBundle {
    /// All-zero bundle of the given shape (a loading skeleton).
    pub fn zeros(spec: &VisionSpec, scope: TrainableScope) -> Result<Self> {
        let mut b = init_bundle(spec, scope, 0)?;
        for (_, mut t) in b.named_params_mut() {
            t.fill(0.0);
        }
        Ok(b)
    }

    fn check_scope(&self) -> Result<()> {
        if let TrainableScope::LastKLayers(k) = self.scope {
            if k == 0 || k > self.spec.depth {
                return Err(ForgeError::Config(format!(
                    "last_k_layers({k}) outside 1..={}",
                    self.spec.depth
                )));
            }
        }
        Ok(())
    }

    pub fn with_scope(mut self, scope: TrainableScope) -> Result<Self> {
        self.scope = scope;
        self.check_scope()?;
        Ok(self)
    }

    /// Lowest encoder layer a backward pass must reach under the scope.
    fn first_trainable_layer(&self) -> Option<usize> {
        match self.scope {
            TrainableScope::FullEncoder => Some(0),
            TrainableScope::LastKLayers(k) => Some(self.spec.depth - k),
            TrainableScope::AdapterOnly => None,
        }
    }

    /// Names of parameters the scope allows to change.
    pub fn trainable_names(&self) -> Vec<String> {
        let first = self.first_trainable_layer();
        self.param_names()
            .into_iter()
            .filter(|n| {
                if n.starts_with("adapter.") {
                    return true;
                }
                match first {
                    None => false,
                    Some(0) => true,
                    Some(f) => {
                        n == "encoder.final_norm"
                            || n.strip_prefix("encoder.layers.")
                                .and_then(|r| r.split('.').next())
                                .and_then(|i| i.parse::<usize>().ok())
                                .is_some_and(|i| i >= f)
                    }
                }
            })
            .collect()
    }

    /// Flattened patches `[n_patches × patch_dim]`, pixel values scaled to [0, 1].
    pub fn patchify(&self, image: &Raster) -> Result<Array2<f32>> {
        let sp = &self.spec;
        if image.height != sp.image_size || image.width != sp.image_size || image.channels != sp.channels {
            if image.height % sp.patch_size != 0 || image.width % sp.patch_size != 0 {
                return Err(ForgeError::Input(format!(
                    "image {}×{} not divisible by patch size {}",
                    image.height, image.width, sp.patch_size
                )));
            }
            return Err(ForgeError::Input(format!(
                "image {}×{}×{} does not match the encoder's {}×{}×{}",
                image.height, image.width, image.channels, sp.image_size, sp.image_size, sp.channels
            )));
        }
        let (p, g, c) = (sp.patch_size, sp.grid(), sp.channels);
        let mut out = Array2::zeros((sp.n_patches(), sp.patch_dim()));
        for gy in 0..g {
            for gx in 0..g {
                let mut row = out.row_mut(gy * g + gx);
                let mut k = 0;
                for y in 0..p {
                    for x in 0..p {
                        for ch in 0..c {
                            row[k] = image.get(gy * p + y, gx * p + x, ch) as f32 / 255.0;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn block_shape(&self) -> BlockShape {
        BlockShape {
            n_heads: self.spec.n_heads,
            causal: false,
        }
    }

    /// Encoder forward over packed patch rows of several images.
    fn encoder_forward(&self, patches: &Array2<f32>, layout: &Layout, keep: bool) -> (Array2<f32>, Vec<BlockCache>, NormCache) {
        let e = &self.encoder;
        let n = self.spec.n_patches();
        let mut x = patches.dot(&e.patch_w);
        x += &e.patch_b;
        for mut chunk in x.axis_chunks_iter_mut(Axis(0), n) {
            chunk += &e.pos;
        }
        let mut caches = Vec::new();
        for l in &e.layers {
            let (y, c) = l.forward(&x, self.block_shape(), layout, None, keep);
            if let Some(c) = c {
                caches.push(c);
            }
            x = y;
        }
        let (out, norm) = rms_norm(&x.view(), &e.final_norm.view());
        (out, caches, norm)
    }

    /// Patch features `[n_patches × width]`.
    pub fn encode_image(&self, image: &Raster) -> Result<Array2<f32>> {
        let patches = self.patchify(image)?;
        let layout = Layout::single(self.spec.n_patches());
        Ok(self.encoder_forward(&patches, &layout, false).0)
    }

    fn adapter_forward(&self, features: &Array2<f32>) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
        let a = &self.adapter;
        let mut pre = features.dot(&a.w1);
        pre += &a.b1;
        let act = pre.mapv(gelu);
        let mut out = act.dot(&a.w2);
        out += &a.b2;
        (out, pre, act)
    }

    /// Adapter projection into decoder embedding space.
    pub fn adapt(&self, features: &Array2<f32>) -> Result<Array2<f32>> {
        if features.ncols() != self.adapter.w1.nrows() {
            return Err(ForgeError::Input(format!(
                "feature width {} does not match adapter input {}",
                features.ncols(),
                self.adapter.w1.nrows()
            )));
        }
        Ok(self.adapter_forward(features).0)
    }

    /// `adapt(encode_image(image))`
    pub fn embed_image(&self, image: &Raster) -> Result<Array2<f32>> {
        self.adapt(&self.encode_image(image)?)
    }

    /// Batched forward for training: adapted rows of every image stacked
    /// `[n_images · n_patches × out_width]`.
    pub fn forward_train(&self, images: &[&Raster]) -> Result<(Array2<f32>, VisionCache)> {
        let n = self.spec.n_patches();
        let mut patches = Array2::zeros((images.len() * n, self.spec.patch_dim()));
        for (i, img) in images.iter().enumerate() {
            patches.slice_mut(s![i * n..(i + 1) * n, ..]).assign(&self.patchify(img)?);
        }
        let layout = Layout::from_lengths(std::iter::repeat(n).take(images.len()));
        let (features, blocks, final_norm) = self.encoder_forward(&patches, &layout, true);
        let (out, pre, act) = self.adapter_forward(&features);
        let cache = VisionCache {
            layout,
            blocks,
            final_norm,
            patches,
            adapter: AdapterCache {
                input: features,
                pre,
                act,
            },
        };
        Ok((out, cache))
    }

    /// Backward from gradients of the adapted rows. Adapter gradients are
    /// always accumulated; encoder gradients only as far as the scope allows.
    pub fn backward_train(&self, cache: &VisionCache, dout: &Array2<f32>, grads: &mut VisionBundle) {
        let a = &self.adapter;
        let ac = &cache.adapter;
        matmul_acc(&ac.act.t(), &dout.view(), &mut grads.adapter.w2.view_mut());
        grads.adapter.b2 += &dout.sum_axis(Axis(0));
        let mut dpre = dout.dot(&a.w2.t());
        Zip::from(&mut dpre).and(&ac.pre).for_each(|d, &p| *d *= gelu_grad(p));
        matmul_acc(&ac.input.t(), &dpre.view(), &mut grads.adapter.w1.view_mut());
        grads.adapter.b1 += &dpre.sum_axis(Axis(0));

        let Some(first) = self.first_trainable_layer() else {
            return;
        };
        let dfeat = dpre.dot(&a.w1.t());
        let e = &self.encoder;
        let mut dx = rms_norm_backward(
            &dfeat.view(),
            &e.final_norm.view(),
            &cache.final_norm,
            Some(&mut grads.encoder.final_norm),
        );
        for i in (first..e.layers.len()).rev() {
            let need_dx = i > first || first == 0;
            let g = Some(&mut grads.encoder.layers[i]);
            match e.layers[i].backward(&dx, &cache.blocks[i], self.block_shape(), &cache.layout, None, g, need_dx) {
                Some(d) => dx = d,
                None => return,
            }
        }
        let ge = &mut grads.encoder;
        for chunk in dx.axis_chunks_iter(Axis(0), self.spec.n_patches()) {
            ge.pos += &chunk;
        }
        ge.patch_b += &dx.sum_axis(Axis(0));
        matmul_acc(&cache.patches.t(), &dx.view(), &mut ge.patch_w.view_mut());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::zeros_like;
    use crate::synth_data::vqa::{Scene, SceneObject};

    fn scene_image(cell: usize) -> Raster {
        Scene {
            objects: vec![SceneObject { color: 1, shape: 2, cell }],
        }
        .render()
    }

    fn noisy_bundle(scope: TrainableScope) -> VisionBundle {
        let mut spec = VisionSpec::toy(12);
        spec.width = 8;
        spec.n_heads = 2;
        spec.depth = 3;
        spec.adapter_hidden = 10;
        let mut b = init_bundle(&spec, scope, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (_, mut t) in b.named_params_mut() {
            let noise = normal_matrix(1, t.len(), 0.3, &mut rng);
            for (v, n) in t.iter_mut().zip(noise.iter()) {
                *v += n;
            }
        }
        b
    }

    #[test]
    fn sixteen_patches_and_determinism() {
        let b = init_bundle(&VisionSpec::toy(64), TrainableScope::FullEncoder, 1).unwrap();
        let img = scene_image(0);
        let f = b.encode_image(&img).unwrap();
        assert_eq!(f.dim(), (16, 48));
        assert_eq!(f, b.encode_image(&img).unwrap());
        assert_eq!(b.embed_image(&img).unwrap().dim(), (16, 64));
        let odd = Raster::blank(30, 30, 1);
        assert!(matches!(b.encode_image(&odd), Err(ForgeError::Input(_))));
    }

    #[test]
    fn zero_encoder_maps_blank_image_to_zero() {
        let mut b = init_bundle(&VisionSpec::toy(64), TrainableScope::FullEncoder, 1).unwrap();
        for (_, mut t) in b.named_params_mut() {
            t.fill(0.0);
        }
        let f = b.encode_image(&Raster::blank(32, 32, 1)).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
        b.adapter.b2.fill(0.5);
        let out = b.adapt(&f).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn adapter_width_is_checked() {
        let b = init_bundle(&VisionSpec::toy(64), TrainableScope::AdapterOnly, 1).unwrap();
        assert!(b.adapt(&Array2::zeros((16, 47))).is_err());
    }

    #[test]
    fn scope_names() {
        let b = init_bundle(&VisionSpec::toy(64), TrainableScope::LastKLayers(2), 1).unwrap();
        let names = b.trainable_names();
        assert!(names.contains(&"encoder.layers.2.wq".to_string()));
        assert!(names.contains(&"encoder.final_norm".to_string()));
        assert!(!names.contains(&"encoder.layers.1.wq".to_string()));
        assert!(!names.contains(&"encoder.pos".to_string()));
        assert!(init_bundle(&VisionSpec::toy(64), TrainableScope::LastKLayers(5), 1).is_err());
    }

    fn objective(b: &VisionBundle, imgs: &[&Raster], w: &Array2<f32>) -> f64 {
        let (out, _) = b.forward_train(imgs).unwrap();
        out.iter().zip(w.iter()).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let b = noisy_bundle(TrainableScope::FullEncoder);
        let (i0, i1) = (scene_image(0), scene_image(3));
        let imgs = [&i0, &i1];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = normal_matrix(32, 12, 1.0, &mut rng);
        let (_, cache) = b.forward_train(&imgs).unwrap();
        let mut g = zeros_like(&b);
        b.backward_train(&cache, &w, &mut g);
        let grads: Vec<Vec<f32>> = g.named_params().iter().map(|(_, t)| t.iter().copied().collect()).collect();
        let names = b.param_names();
        let h = 1e-2f32;
        let mut probe = b.clone();
        for (pi, name) in names.iter().enumerate() {
            for flat in [0usize, 5] {
                let set = |p: &mut VisionBundle, v: f32| *p.named_params_mut()[pi].1.iter_mut().nth(flat).unwrap() = v;
                let orig = *b.named_params()[pi].1.iter().nth(flat).unwrap();
                set(&mut probe, orig + h);
                let lp = objective(&probe, &imgs, &w);
                set(&mut probe, orig - h);
                let lm = objective(&probe, &imgs, &w);
                set(&mut probe, orig);
                let num = (lp - lm) / (2.0 * h as f64);
                let ana = grads[pi][flat] as f64;
                assert!((num - ana).abs() < 3e-2 * (1.0 + ana.abs()), "{name}[{flat}]: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn scope_limits_encoder_gradients() {
        let b = noisy_bundle(TrainableScope::LastKLayers(1));
        let img = scene_image(2);
        let (out, cache) = b.forward_train(&[&img]).unwrap();
        let mut g = zeros_like(&b);
        b.backward_train(&cache, &Array2::ones(out.raw_dim()), &mut g);
        let allowed = b.trainable_names();
        for (name, t) in g.named_params() {
            if !allowed.contains(&name) {
                assert!(t.iter().all(|&v| v == 0.0), "{name} got a gradient");
            }
        }
        let mut g = zeros_like(&b);
        let b = b.with_scope(TrainableScope::AdapterOnly).unwrap();
        b.backward_train(&cache, &Array2::ones(out.raw_dim()), &mut g);
        assert!(g.encoder.layers.iter().all(|l| l.wq.iter().all(|&v| v == 0.0)));
    }
}
