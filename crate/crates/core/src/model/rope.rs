//! Rotary position embedding: per-position 2D rotations of adjacent
//! dimension pairs with frequency base^(-2i/head_dim), applied to query and
//! key head vectors. Rotations are isometries, and dot products between
//! rotated queries and keys depend only on the relative position.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Precomputed cos/sin per (position, pair index).
pub struct RopeTable<T> {
    pub half_dim: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(max_pos: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        for pos in 0..max_pos {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        RopeTable {
            half_dim: half,
            cos,
            sin,
        }
    }

    /// Rotates one head vector in place for `pos`.
    #[inline]
    pub fn rotate(&self, v: &mut [T], pos: usize) {
        let base = pos * self.half_dim;
        for i in 0..self.half_dim {
            let (c, s) = (self.cos[base + i], self.sin[base + i]);
            let (a, b) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = a * c - b * s;
            v[2 * i + 1] = a * s + b * c;
        }
    }

    /// Inverse rotation, used in the backward pass.
    #[inline]
    pub fn rotate_inverse(&self, v: &mut [T], pos: usize) {
        let base = pos * self.half_dim;
        for i in 0..self.half_dim {
            let (c, s) = (self.cos[base + i], self.sin[base + i]);
            let (a, b) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = a * c + b * s;
            v[2 * i + 1] = b * c - a * s;
        }
    }
}

/// Applies rotary encoding to a stack of head vectors, one per position.
/// `vecs` is [positions.len() x head_dim] flat.
pub fn rope_apply<T: Scalar>(
    vecs: &mut [T],
    head_dim: usize,
    positions: &[usize],
    base: f64,
) -> Result<()> {
    if head_dim % 2 != 0 {
        return Err(Error::Model(format!(
            "rotary encoding needs an even head dimension, got {head_dim}"
        )));
    }
    if vecs.len() != positions.len() * head_dim {
        return Err(Error::ShapeMismatch(format!(
            "expected {} values for {} positions of width {head_dim}, got {}",
            positions.len() * head_dim,
            positions.len(),
            vecs.len()
        )));
    }
    let max_pos = positions.iter().copied().max().map_or(0, |p| p + 1);
    let table = RopeTable::new(max_pos, head_dim, base);
    for (chunk, &pos) in vecs.chunks_mut(head_dim).zip(positions) {
        table.rotate(chunk, pos);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, "rope-test");
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn position_zero_is_identity() {
        let mut v = random_vec(8, 1);
        let orig = v.clone();
        rope_apply(&mut v, 8, &[0], 10_000.0).unwrap();
        for (a, b) in v.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rotation_preserves_norm() {
        for pos in [1usize, 5, 17, 200] {
            let mut v = random_vec(16, pos as u64);
            let before: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            rope_apply(&mut v, 16, &[pos], 10_000.0).unwrap();
            let after: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((before - after).abs() / before < 1e-6);
        }
    }

    #[test]
    fn dot_product_depends_only_on_relative_position() {
        let q = random_vec(8, 42);
        let k = random_vec(8, 43);
        let dot_at = |m: usize, n: usize| {
            let mut qm = q.clone();
            let mut kn = k.clone();
            rope_apply(&mut qm, 8, &[m], 10_000.0).unwrap();
            rope_apply(&mut kn, 8, &[n], 10_000.0).unwrap();
            qm.iter().zip(&kn).map(|(a, b)| a * b).sum::<f64>()
        };
        let d1 = dot_at(5, 3);
        let d2 = dot_at(7, 5);
        assert!((d1 - d2).abs() / d1.abs().max(1e-12) < 1e-6);
    }

    #[test]
    fn odd_head_dim_rejected() {
        let mut v = vec![0.0f64; 7];
        assert!(rope_apply(&mut v, 7, &[0], 10_000.0).is_err());
    }

    #[test]
    fn inverse_undoes_rotation() {
        let table: RopeTable<f64> = RopeTable::new(32, 8, 10_000.0);
        let orig = random_vec(8, 9);
        let mut v = orig.clone();
        table.rotate(&mut v, 23);
        table.rotate_inverse(&mut v, 23);
        for (a, b) in v.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
