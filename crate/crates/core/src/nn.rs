//! Flat parameter storage and the Adam optimizer.
//!
//! Models keep every weight in one contiguous `Vec<T>` described by a
//! [`ParamLayout`]. Gradients share the layout, so optimizers, checkpoints
//! and finite-difference checks work on plain slices.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    blocks: Vec<Block>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a `rows x cols` block; vectors use `cols == 1`.
    pub fn push(&mut self, name: &'static str, rows: usize, cols: usize) -> usize {
        let idx = self.blocks.len();
        self.blocks.push(Block {
            name,
            rows,
            cols,
            offset: self.total,
        });
        self.total += rows * cols;
        idx
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, idx: usize) -> &Block {
        &self.blocks[idx]
    }

    pub fn mat<'a, T>(&self, idx: usize, data: &'a [T]) -> ArrayView2<'a, T> {
        let b = &self.blocks[idx];
        ArrayView2::from_shape((b.rows, b.cols), &data[b.range()]).expect("layout shape")
    }

    pub fn mat_mut<'a, T>(&self, idx: usize, data: &'a mut [T]) -> ArrayViewMut2<'a, T> {
        let b = &self.blocks[idx];
        ArrayViewMut2::from_shape((b.rows, b.cols), &mut data[b.range()]).expect("layout shape")
    }

    pub fn vec<'a, T>(&self, idx: usize, data: &'a [T]) -> ArrayView1<'a, T> {
        ArrayView1::from(&data[self.blocks[idx].range()])
    }

    pub fn vec_mut<'a, T>(&self, idx: usize, data: &'a mut [T]) -> ArrayViewMut1<'a, T> {
        ArrayViewMut1::from(&mut data[self.blocks[idx].range()])
    }
}

/// Fills `data` with `U(-scale, scale)` draws.
pub fn uniform_init<T: Scalar, R: Rng + ?Sized>(data: &mut [T], scale: f64, rng: &mut R) {
    for v in data {
        *v = T::lit(rng.gen_range(-scale..=scale));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One descent step on `params` given the loss gradient `grad`.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let one = T::one();
        let bias1 = one - b1.powi(self.t);
        let bias2 = one - b2.powi(self.t);
        let lr = T::lit(self.cfg.lr) * bias2.sqrt() / bias1;
        let eps = T::lit(self.cfg.eps);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            params[i] -= lr * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grad: &mut [T], max_norm: f64) -> f64 {
    let norm = grad
        .iter()
        .map(|g| g.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

pub fn ensure_finite<T: Scalar>(what: &str, v: T) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

/// Largest per-parameter relative error between `analytic` and central
/// differences of `loss` with step `h`. Parameters whose gradients are both
/// below `1e-7` in magnitude are skipped as pure round-off.
pub fn gradient_check<F>(params: &mut [f64], analytic: &[f64], h: f64, mut loss: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let up = loss(params);
        params[i] = orig - h;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = numeric.abs().max(analytic[i].abs());
        if scale > 1e-7 {
            worst = worst.max((numeric - analytic[i]).abs() / scale);
        }
    }
    worst
}

/// Softmax of each row, in place.
pub fn softmax_rows<T: Scalar>(mut m: ArrayViewMut2<'_, T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|x| (x - max).exp());
        let s: T = row.sum();
        row.mapv_inplace(|x| x / s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layout_offsets() {
        let mut l = ParamLayout::new();
        let a = l.push("a", 2, 3);
        let b = l.push("b", 4, 1);
        assert_eq!(l.total(), 10);
        assert_eq!(l.block(b).offset, 6);
        let data: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(l.mat(a, &data)[[1, 0]], 3.0);
        assert_eq!(l.vec(b, &data)[3], 9.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut opt = Adam::new(2, AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            let g = vec![2.0 * p[0], 2.0 * (p[1] - 1.0)];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3 && (p[1] - 1.0).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![3.0f32, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = array![[1.0f64, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        softmax_rows(m.view_mut());
        for r in m.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        assert!((m[[1, 0]] - 0.5).abs() < 1e-12);
    }
}
