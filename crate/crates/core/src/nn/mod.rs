//! Dense building blocks with explicit backward passes.
//!
//! Everything here works on row-major `[rows × features]` matrices where a
//! row is one token position. Several sequences may be packed into the same
//! matrix; [`Layout`] records where each one starts and ends so attention
//! never crosses a sequence boundary.

pub mod act;
pub mod attention;
pub mod block;
pub mod norm;

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use block::{BlockCache, BlockParams, BlockShape};

/// Standard deviation used for every randomly initialised weight.
pub const INIT_STD: f32 = 0.02;

/// Row ranges of the sequences packed into one activation matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Range<usize>>,
    total: usize,
}

impl Layout {
    pub fn single(len: usize) -> Self {
        Self {
            segments: vec![0..len],
            total: len,
        }
    }

    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut segments = Vec::new();
        let mut start = 0;
        for len in lengths {
            segments.push(start..start + len);
            start += len;
        }
        Self {
            segments,
            total: start,
        }
    }

    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }

    pub fn rows(&self) -> usize {
        self.total
    }

    /// Position of every packed row inside its own sequence.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = Vec::with_capacity(self.total);
        for seg in &self.segments {
            pos.extend(0..seg.len());
        }
        pos
    }
}

/// `a · b`
pub fn matmul(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Array2<f32> {
    a.dot(b)
}

/// `c += a · b`
pub fn matmul_acc(a: &ArrayView2<f32>, b: &ArrayView2<f32>, c: &mut ArrayViewMut2<f32>) {
    general_mat_mul(1.0, a, b, 1.0, c);
}

pub fn normal_matrix(rows: usize, cols: usize, std: f32, rng: &mut impl Rng) -> Array2<f32> {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Row-wise softmax in place.
pub fn softmax_rows(m: &mut Array2<f32>) {
    for mut row in m.rows_mut() {
        softmax_slice(row.as_slice_mut().expect("contiguous rows"));
    }
}

/// Softmax of one row in place.
pub fn softmax_slice(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = act::fast_exp(*v - max);
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
