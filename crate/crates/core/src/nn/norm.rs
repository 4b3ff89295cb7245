//! RMS normalisation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

pub const RMS_EPS: f32 = 1e-5;

/// Saved activations for [`rms_norm_backward`].
#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Array2<f32>,
    inv_rms: Array1<f32>,
}

pub fn rms_norm(x: &ArrayView2<f32>, gain: &ArrayView1<f32>) -> (Array2<f32>, NormCache) {
    let (rows, cols) = x.dim();
    let mut xhat = Array2::<f32>::zeros((rows, cols));
    let mut inv_rms = Array1::<f32>::zeros(rows);
    for (r, (src, mut dst)) in x.rows().into_iter().zip(xhat.rows_mut()).enumerate() {
        let ms = src.iter().map(|v| v * v).sum::<f32>() / cols as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        inv_rms[r] = inv;
        Zip::from(&mut dst).and(&src).for_each(|d, &s| *d = s * inv);
    }
    let y = &xhat * gain;
    (y, NormCache { xhat, inv_rms })
}

/// Returns `dx`; accumulates into `dgain` when given.
pub fn rms_norm_backward(
    dy: &ArrayView2<f32>,
    gain: &ArrayView1<f32>,
    cache: &NormCache,
    dgain: Option<&mut Array1<f32>>,
) -> Array2<f32> {
    let cols = dy.ncols() as f32;
    if let Some(dg) = dgain {
        Zip::from(dy.rows())
            .and(cache.xhat.rows())
            .for_each(|dyr, xr| {
                Zip::from(&mut *dg)
                    .and(&dyr)
                    .and(&xr)
                    .for_each(|g, &d, &x| *g += d * x);
            });
    }
    let mut dx = Array2::<f32>::zeros(dy.raw_dim());
    for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
        let dyr = dy.row(r);
        let xr = cache.xhat.row(r);
        let mut dot = 0.0f32;
        for i in 0..dyr.len() {
            dot += dyr[i] * gain[i] * xr[i];
        }
        let mean = dot / cols;
        let inv = cache.inv_rms[r];
        for i in 0..dyr.len() {
            out[i] = inv * (dyr[i] * gain[i] - xr[i] * mean);
        }
    }
    dx
}
