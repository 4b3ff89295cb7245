//! Named-parameter access shared by every trainable component.

use std::collections::BTreeSet;

use ndarray::{ArrayViewD, ArrayViewMutD};
use sha2::{Digest, Sha256};

/// A component whose parameters can be enumerated by stable names.
///
/// Both methods must yield the same names in the same order.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, ArrayViewD<'_, f32>)>;
    fn named_params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f32>)>;

    fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values of every parameter.
    fn checksum(&self) -> String {
        digest_params(self.named_params().iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Checksum restricted to parameters whose names are *not* in `exclude`.
    fn checksum_excluding(&self, exclude: &BTreeSet<String>) -> String {
        let params = self.named_params();
        digest_params(
            params
                .iter()
                .filter(|(n, _)| !exclude.contains(n))
                .map(|(n, t)| (n.as_str(), t)),
        )
    }
}

pub fn digest_params<'a, 'b: 'a>(
    params: impl Iterator<Item = (&'a str, &'a ArrayViewD<'b, f32>)>,
) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in params {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((t.ndim() as u64).to_le_bytes());
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in t.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Clone of `p` with every parameter set to zero (gradient buffers).
pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    for (_, mut t) in z.named_params_mut() {
        t.fill(0.0);
    }
    z
}

/// Names of parameters that differ bit-wise between two components with the
/// same parameter layout.
pub fn changed_params<P: Parameters>(a: &P, b: &P) -> Vec<String> {
    a.named_params()
        .into_iter()
        .zip(b.named_params())
        .filter(|((_, x), (_, y))| {
            x.shape() != y.shape() || x.iter().zip(y.iter()).any(|(u, v)| u.to_bits() != v.to_bits())
        })
        .map(|((n, _), _)| n)
        .collect()
}
