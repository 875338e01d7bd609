use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// `exp(-gamma * |x - y|^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rbf {
    pub gamma: f64,
}

impl Rbf {
    pub fn eval(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        (-self.gamma * d2).exp()
    }
}

/// `1 / (n_features * var(X))` over every entry of `x`; 1.0 when `x` is
/// constant.
pub fn scale_gamma(x: ArrayView2<'_, f64>) -> f64 {
    let n = x.len() as f64;
    if n == 0.0 {
        return 1.0;
    }
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (x.ncols() as f64 * var)
    } else {
        1.0
    }
}

/// Lazily computed kernel rows with FIFO eviction under a memory budget.
pub struct KernelCache<'a> {
    x: ArrayView2<'a, f64>,
    sq_norms: Array1<f64>,
    kernel: Rbf,
    rows: Vec<Option<Vec<f64>>>,
    loaded: VecDeque<usize>,
    capacity: usize,
}

impl<'a> KernelCache<'a> {
    pub fn new(x: ArrayView2<'a, f64>, kernel: Rbf, budget_bytes: usize) -> Self {
        let n = x.nrows();
        let sq_norms = x.rows().into_iter().map(|r| r.dot(&r)).collect();
        let capacity = (budget_bytes / (8 * n.max(1))).clamp(2, n.max(2));
        Self {
            x,
            sq_norms,
            kernel,
            rows: vec![None; n],
            loaded: VecDeque::new(),
            capacity,
        }
    }

    pub fn row(&mut self, i: usize) -> &[f64] {
        if self.rows[i].is_none() {
            if self.loaded.len() >= self.capacity {
                if let Some(old) = self.loaded.pop_front() {
                    self.rows[old] = None;
                }
            }
            let xi = self.x.row(i);
            let dots = self.x.dot(&xi);
            let ni = self.sq_norms[i];
            let g = self.kernel.gamma;
            let row = dots
                .iter()
                .zip(&self.sq_norms)
                .map(|(&d, &nj)| (-g * (ni + nj - 2.0 * d).max(0.0)).exp())
                .collect();
            self.rows[i] = Some(row);
            self.loaded.push_back(i);
        }
        self.rows[i].as_deref().expect("row just loaded")
    }
}

/// Kernel values between every row of `a` and every row of `b`.
pub fn cross_kernel(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, kernel: Rbf) -> Array2<f64> {
    let na: Array1<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let nb: Array1<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut k = a.dot(&b.t());
    for ((i, j), v) in k.indexed_iter_mut() {
        *v = (-kernel.gamma * (na[i] + nb[j] - 2.0 * *v).max(0.0)).exp();
    }
    k
}
