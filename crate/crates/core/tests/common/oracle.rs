//! Reference implementations evaluated in fixed point.

use forge_core::model::DecoderModel;
use forge_core::nn::norm::RMS_EPS;
use forge_core::trajectory::PROB_FLOOR;
use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use forge_core::params::Parameters;

use super::hp::{sum, Hp};

pub fn dynamic_weights(lengths: &[usize], ord: f64) -> Vec<f64> {
    let max = Hp::int(*lengths.iter().max().unwrap() as i64);
    let ord = Hp::from_f64(ord);
    let raw: Vec<Hp> = lengths
        .iter()
        .map(|&l| max.div(&Hp::int(l as i64).ln()).powf(&ord))
        .collect();
    let raw_sum = sum(raw.iter().cloned());
    let len_sum = Hp::int(lengths.iter().sum::<usize>() as i64);
    raw.iter().map(|r| (len_sum.clone() * r.clone()).div(&raw_sum).to_f64()).collect()
}

pub fn kl(q: &[f64], p: &[f64]) -> f64 {
    let floor = Hp::from_f64(PROB_FLOOR);
    sum(q.iter().zip(p).map(|(&a, &b)| {
        let a = Hp::from_f64(a).max(floor.clone());
        let b = Hp::from_f64(b).max(floor.clone());
        a.clone() * (a.div(&b)).ln()
    }))
    .to_f64()
}

/// Probability that the model's unembedding assigns `next` from one hidden row.
pub fn lens_prob(model: &DecoderModel, hidden: ArrayView1<f32>, next: u32) -> f64 {
    let d = hidden.len();
    let xs: Vec<Hp> = hidden.iter().map(|&x| Hp::from_f64(x as f64)).collect();
    let ms = sum(xs.iter().map(|x| x.clone() * x.clone())).div(&Hp::int(d as i64));
    let inv = Hp::int(1).div(&(ms + Hp::from_f64(RMS_EPS as f64)).sqrt());
    let normed: Vec<Hp> = xs
        .iter()
        .zip(model.final_norm.iter())
        .map(|(x, &g)| x.clone() * inv.clone() * Hp::from_f64(g as f64))
        .collect();
    let logits: Vec<Hp> = model
        .unembedding
        .rows()
        .into_iter()
        .map(|w| sum(normed.iter().zip(w.iter()).map(|(n, &w)| n.clone() * Hp::from_f64(w as f64))))
        .collect();
    let top = logits.iter().max().unwrap().clone();
    let e: Vec<Hp> = logits.iter().map(|l| (l.clone() - top.clone()).exp()).collect();
    e[next as usize].div(&sum(e.iter().cloned())).to_f64()
}

/// Toy model whose projections are all non-zero, so every layer matters.
pub fn noisy_model(n_layers: usize, seed: u64) -> DecoderModel {
    let mut spec = forge_core::model::ModelSpec::toy(72);
    spec.n_layers = n_layers;
    spec.max_seq_len = 32;
    let mut m = forge_core::model::init_model(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, mut t) in m.named_params_mut() {
        if name.contains("norm") {
            continue;
        }
        t.mapv_inplace(|v| v + rng.gen_range(-0.05f32..0.05));
    }
    m
}

/// Worst deviations from the fixed-point references over `cases` random
/// inputs per function.
#[derive(Debug, Default)]
pub struct Fidelity {
    pub weights: f64,
    pub weight_sum_rel: f64,
    pub single_group_exact: bool,
    pub kl: f64,
    pub next_token: f64,
    pub layer_distribution: f64,
}

impl Fidelity {
    pub fn within(&self, weight_tol: f64, dist_tol: f64) -> bool {
        self.weights <= weight_tol
            && self.weight_sum_rel <= weight_tol
            && self.single_group_exact
            && self.kl <= dist_tol
            && self.next_token <= dist_tol
            && self.layer_distribution <= dist_tol
    }
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            // a few entries far below the floor
            if rng.gen_bool(0.1) {
                rng.gen_range(0.0..1e-13)
            } else {
                rng.gen_range(1e-6..1.0)
            }
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

pub fn fidelity(seed: u64, cases: usize) -> Fidelity {
    use forge_core::trajectory::{kl_deviation, layer_distribution, next_token_probs};
    use forge_core::training::dynamic_loss_weights;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = Fidelity {
        single_group_exact: true,
        ..Default::default()
    };
    for _ in 0..cases {
        let n = rng.gen_range(1..24);
        let lengths: Vec<usize> = (0..n).map(|_| rng.gen_range(2..200)).collect();
        let ord = rng.gen_range(0.0..2.0);
        let got = dynamic_loss_weights(&lengths, ord).unwrap();
        for (g, w) in got.iter().zip(dynamic_weights(&lengths, ord)) {
            f.weights = f.weights.max((g - w).abs() / w.abs().max(1.0));
        }
        let total: f64 = lengths.iter().map(|&l| l as f64).sum();
        f.weight_sum_rel = f.weight_sum_rel.max((got.iter().sum::<f64>() - total).abs() / total);
        let single = lengths[0];
        f.single_group_exact &= dynamic_loss_weights(&[single], ord).unwrap() == vec![single as f64];

        let v = rng.gen_range(2..96);
        let q = random_probs(&mut rng, v);
        let p = random_probs(&mut rng, v);
        f.kl = f.kl.max((kl_deviation(&q, &p).unwrap() - kl(&q, &p)).abs());

        let rows = rng.gen_range(1..12);
        let m = ndarray::Array2::from_shape_fn((rows, v), |_| rng.gen_range(0.0..1.0));
        let ids: Vec<u32> = (0..=rows).map(|_| rng.gen_range(0..v as u32)).collect();
        let got = next_token_probs(&m.view(), &ids).unwrap();
        for i in 0..rows {
            f.next_token = f.next_token.max((got[i] - m[[i, ids[i + 1] as usize]]).abs());
        }
    }
    let models: Vec<DecoderModel> = (0..4).map(|k| noisy_model(4, seed + k)).collect();
    for c in 0..cases {
        let m = &models[c % models.len()];
        let len = rng.gen_range(2..10);
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..72)).collect();
        let layer = rng.gen_range(0..m.n_layers());
        let trace = m.forward_with_hidden(&ids, &[]).unwrap();
        let got = layer_distribution(m, &trace, layer, &ids).unwrap();
        let hidden = trace.hidden_states.index_axis(ndarray::Axis(0), layer);
        for i in 0..len - 1 {
            let want = lens_prob(m, hidden.row(i), ids[i + 1]);
            f.layer_distribution = f.layer_distribution.max((got[i] - want).abs());
        }
    }
    f
}
