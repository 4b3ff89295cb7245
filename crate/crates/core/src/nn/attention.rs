//! Multi-head scaled dot-product attention and rotary position encoding.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};

use super::{softmax_slice, Layout};

pub const ROPE_BASE: f32 = 10_000.0;

/// Precomputed rotary tables for pairs `(2j, 2j+1)` within each head.
#[derive(Debug, Clone)]
pub struct Rope {
    cos: Array2<f32>,
    sin: Array2<f32>,
    head_dim: usize,
}

impl Rope {
    pub fn new(max_pos: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Array2::zeros((max_pos, half));
        let mut sin = Array2::zeros((max_pos, half));
        for p in 0..max_pos {
            for j in 0..half {
                let freq = ROPE_BASE.powf(-2.0 * j as f32 / head_dim as f32);
                let angle = p as f32 * freq;
                cos[[p, j]] = angle.cos();
                sin[[p, j]] = angle.sin();
            }
        }
        Self { cos, sin, head_dim }
    }

    pub fn max_positions(&self) -> usize {
        self.cos.nrows()
    }

    /// Rotates every head of every row by its position. `inverse` applies the
    /// transpose rotation, which is also the backward pass.
    pub fn rotate(&self, x: &mut Array2<f32>, positions: &[usize], inverse: bool) {
        let hd = self.head_dim;
        let sign = if inverse { -1.0 } else { 1.0 };
        for (mut row, &p) in x.rows_mut().into_iter().zip(positions) {
            let row = row.as_slice_mut().expect("contiguous rows");
            for head in row.chunks_exact_mut(hd) {
                for j in 0..hd / 2 {
                    let (c, s) = (self.cos[[p, j]], sign * self.sin[[p, j]]);
                    let a = head[2 * j];
                    let b = head[2 * j + 1];
                    head[2 * j] = a * c - b * s;
                    head[2 * j + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Copies the `[rows × head]` block of head `h` into a contiguous buffer.
fn gather_head(m: &ArrayView2<f32>, rows: Range<usize>, h: usize, hd: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len() * hd);
    for r in rows {
        let row = m.row(r);
        let row = row.as_slice().expect("contiguous rows");
        out.extend_from_slice(&row[h * hd..(h + 1) * hd]);
    }
    out
}

fn scatter_head(m: &mut Array2<f32>, rows: Range<usize>, h: usize, hd: usize, src: &[f32]) {
    for (i, r) in rows.enumerate() {
        let mut row = m.row_mut(r);
        let row = row.as_slice_mut().expect("contiguous rows");
        row[h * hd..(h + 1) * hd].copy_from_slice(&src[i * hd..(i + 1) * hd]);
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Single-head attention on contiguous buffers. Query `i` sits at absolute
/// position `q_offset + i` and, when causal, sees keys `0..=q_offset + i`.
/// Returns `(probs [n_q × n_k], out [n_q × hd])`.
fn head_forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    hd: usize,
    q_offset: usize,
    causal: bool,
) -> (Array2<f32>, Vec<f32>) {
    let (n_q, n_k) = (q.len() / hd, k.len() / hd);
    let scale = 1.0 / (hd as f32).sqrt();
    let mut probs = Array2::<f32>::zeros((n_q, n_k));
    let mut out = vec![0.0f32; n_q * hd];
    for i in 0..n_q {
        let qi = &q[i * hd..(i + 1) * hd];
        let visible = if causal { (q_offset + i + 1).min(n_k) } else { n_k };
        let mut row = probs.row_mut(i);
        let row = &mut row.as_slice_mut().expect("contiguous rows")[..visible];
        for (j, p) in row.iter_mut().enumerate() {
            *p = dot(qi, &k[j * hd..(j + 1) * hd]) * scale;
        }
        softmax_slice(row);
        let oi = &mut out[i * hd..(i + 1) * hd];
        for (j, &p) in row.iter().enumerate() {
            axpy(p, &v[j * hd..(j + 1) * hd], oi);
        }
    }
    (probs, out)
}

/// Attention over packed sequences. Returns the head-concatenated output and
/// the probability matrix of every `(segment, head)` pair, segment-major.
pub fn attention(
    q: &Array2<f32>,
    k: &Array2<f32>,
    v: &Array2<f32>,
    layout: &Layout,
    n_heads: usize,
    causal: bool,
) -> (Array2<f32>, Vec<Array2<f32>>) {
    let hd = q.ncols() / n_heads;
    let mut out = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(layout.segments().len() * n_heads);
    for seg in layout.segments() {
        for h in 0..n_heads {
            let qh = gather_head(&q.view(), seg.clone(), h, hd);
            let kh = gather_head(&k.view(), seg.clone(), h, hd);
            let vh = gather_head(&v.view(), seg.clone(), h, hd);
            let (p, o) = head_forward(&qh, &kh, &vh, hd, 0, causal);
            scatter_head(&mut out, seg.clone(), h, hd, &o);
            probs.push(p);
        }
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` of [`attention`] given the output gradient.
/// Causality is implicit in the cached probabilities (masked entries are 0).
pub fn attention_backward(
    dout: &Array2<f32>,
    q: &Array2<f32>,
    k: &Array2<f32>,
    v: &Array2<f32>,
    probs: &[Array2<f32>],
    layout: &Layout,
    n_heads: usize,
) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
    let hd = q.ncols() / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    let mut idx = 0;
    for seg in layout.segments() {
        let n = seg.len();
        for h in 0..n_heads {
            let p = &probs[idx];
            idx += 1;
            let qh = gather_head(&q.view(), seg.clone(), h, hd);
            let kh = gather_head(&k.view(), seg.clone(), h, hd);
            let vh = gather_head(&v.view(), seg.clone(), h, hd);
            let doh = gather_head(&dout.view(), seg.clone(), h, hd);
            let mut dqh = vec![0.0f32; n * hd];
            let mut dkh = vec![0.0f32; n * hd];
            let mut dvh = vec![0.0f32; n * hd];
            let mut ds = vec![0.0f32; n];
            for i in 0..n {
                let prow = p.row(i);
                let prow = prow.as_slice().expect("contiguous rows");
                // rows are zero beyond the last visible key
                let visible = prow.iter().rposition(|&x| x != 0.0).map_or(0, |j| j + 1);
                let doi = &doh[i * hd..(i + 1) * hd];
                let mut rowsum = 0.0f32;
                for j in 0..visible {
                    let dp = dot(doi, &vh[j * hd..(j + 1) * hd]);
                    ds[j] = dp;
                    rowsum += dp * prow[j];
                    axpy(prow[j], doi, &mut dvh[j * hd..(j + 1) * hd]);
                }
                let qi = &qh[i * hd..(i + 1) * hd];
                for j in 0..visible {
                    // softmax backward: dS = P ⊙ (dP − Σ P ⊙ dP)
                    let g = prow[j] * (ds[j] - rowsum) * scale;
                    axpy(g, &kh[j * hd..(j + 1) * hd], &mut dqh[i * hd..(i + 1) * hd]);
                    axpy(g, qi, &mut dkh[j * hd..(j + 1) * hd]);
                }
            }
            scatter_head(&mut dq, seg.clone(), h, hd, &dqh);
            scatter_head(&mut dk, seg.clone(), h, hd, &dkh);
            scatter_head(&mut dv, seg.clone(), h, hd, &dvh);
        }
    }
    (dq, dk, dv)
}

/// Causal attention of `m` new query rows (absolute positions starting at
/// `q_offset`) over all cached keys/values, for incremental decoding.
pub fn attention_cached(
    q: &Array2<f32>,
    k_all: &ArrayView2<f32>,
    v_all: &ArrayView2<f32>,
    q_offset: usize,
    n_heads: usize,
) -> Array2<f32> {
    let hd = q.ncols() / n_heads;
    let mut out = Array2::zeros(q.raw_dim());
    for h in 0..n_heads {
        let qh = gather_head(&q.view(), 0..q.nrows(), h, hd);
        let kh = gather_head(k_all, 0..k_all.nrows(), h, hd);
        let vh = gather_head(v_all, 0..v_all.nrows(), h, hd);
        let (_, o) = head_forward(&qh, &kh, &vh, hd, q_offset, true);
        scatter_head(&mut out, 0..q.nrows(), h, hd, &o);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use rand::SeedableRng;

    #[test]
    fn rope_inverse_undoes_rotation() {
        let rope = Rope::new(16, 8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = crate::nn::normal_matrix(5, 16, 1.0, &mut rng);
        let pos = vec![0, 3, 7, 11, 15];
        let mut y = x.clone();
        rope.rotate(&mut y, &pos, false);
        rope.rotate(&mut y, &pos, true);
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn causal_rows_only_see_the_past() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let q = crate::nn::normal_matrix(6, 8, 1.0, &mut rng);
        let k = crate::nn::normal_matrix(6, 8, 1.0, &mut rng);
        let v = crate::nn::normal_matrix(6, 8, 1.0, &mut rng);
        let layout = Layout::from_lengths([4, 2]);
        let (_, probs) = attention(&q, &k, &v, &layout, 2, true);
        assert_eq!(probs.len(), 4);
        for p in &probs {
            for i in 0..p.nrows() {
                assert!((p.row(i).sum() - 1.0).abs() < 1e-5);
                for j in i + 1..p.ncols() {
                    assert_eq!(p[[i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn cached_attention_agrees_with_packed() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let q = crate::nn::normal_matrix(5, 8, 1.0, &mut rng);
        let k = crate::nn::normal_matrix(5, 8, 1.0, &mut rng);
        let v = crate::nn::normal_matrix(5, 8, 1.0, &mut rng);
        let (full, _) = attention(&q, &k, &v, &Layout::single(5), 2, true);
        let tail = q.slice(s![3.., ..]).to_owned();
        let part = attention_cached(&tail, &k.view(), &v.view(), 3, 2);
        for (a, b) in full.slice(s![3.., ..]).iter().zip(part.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
