//! Sequential minimal optimization for the kernel-machine dual
//!
//! ```text
//! min 1/2 a'Qa + p'a   s.t.  y'a = 0,  0 <= a_i <= C
//! ```
//!
//! with `Q_ij = y_i y_j K(x_idx(i), x_idx(j))`. Classification uses one
//! variable per row; epsilon regression uses two per row. Working pairs are
//! picked with second-order gain (maximal violating `i`, best `j`).

use super::kernel::KernelCache;

const TAU: f64 = 1e-12;

pub struct DualProblem<'a> {
    pub cache: KernelCache<'a>,
    /// Kernel row backing each variable.
    pub index: Vec<usize>,
    /// Label of each variable, +1 or -1.
    pub y: Vec<f64>,
    /// Linear term.
    pub p: Vec<f64>,
    pub c: f64,
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn solve(mut prob: DualProblem<'_>, eps: f64, max_iter: usize) -> DualSolution {
    let n = prob.y.len();
    let c = prob.c;
    let mut alpha = vec![0.0; n];
    let mut grad = prob.p.clone();
    let mut qi = vec![0.0; n];
    let mut qj = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;

    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;

    while iterations < max_iter {
        // maximal violating i
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            let v = if prob.y[t] > 0.0 {
                (!upper(alpha[t])).then_some(-grad[t])
            } else {
                (!lower(alpha[t])).then_some(grad[t])
            };
            if let Some(v) = v {
                if v >= gmax {
                    gmax = v;
                    i_sel = Some(t);
                }
            }
        }
        let Some(i) = i_sel else {
            converged = true;
            break;
        };
        fill_q_row(&mut prob, i, &mut qi);

        // second-order choice of j
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        let yi = prob.y[i];
        for t in 0..n {
            let (eligible, diff, g2, sign) = if prob.y[t] > 0.0 {
                (!lower(alpha[t]), gmax + grad[t], grad[t], -1.0)
            } else {
                (!upper(alpha[t]), gmax - grad[t], -grad[t], 1.0)
            };
            if !eligible {
                continue;
            }
            gmax2 = gmax2.max(g2);
            if diff > 0.0 {
                let quad = 1.0 + 1.0 + sign * 2.0 * yi * qi[t];
                let obj = -(diff * diff) / if quad > 0.0 { quad } else { TAU };
                if obj <= best {
                    best = obj;
                    j_sel = Some(t);
                }
            }
        }
        let Some(j) = j_sel.filter(|_| gmax + gmax2 >= eps) else {
            converged = true;
            break;
        };
        iterations += 1;
        fill_q_row(&mut prob, j, &mut qj);

        let (old_i, old_j) = (alpha[i], alpha[j]);
        if prob.y[i] != prob.y[j] {
            let quad = positive(2.0 + 2.0 * qi[j]);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = positive(2.0 - 2.0 * qi[j]);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += qi[t] * di + qj[t] * dj;
        }
    }

    let rho = compute_rho(&alpha, &grad, &prob.y, c);
    DualSolution {
        alpha,
        rho,
        iterations,
        converged,
    }
}

fn positive(q: f64) -> f64 {
    if q > 0.0 {
        q
    } else {
        TAU
    }
}

fn fill_q_row(prob: &mut DualProblem<'_>, i: usize, out: &mut [f64]) {
    let yi = prob.y[i];
    let row = prob.cache.row(prob.index[i]);
    for (t, o) in out.iter_mut().enumerate() {
        *o = yi * prob.y[t] * row[prob.index[t]];
    }
}

fn compute_rho(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> f64 {
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free = 0usize;
    let mut sum_free = 0.0;
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    if free > 0 {
        sum_free / free as f64
    } else {
        (ub + lb) / 2.0
    }
}
