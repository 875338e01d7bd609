//! Kernel-machine transfer from reasoner features to baseline human
//! responses.
//!
//! [`fit_classifier`] trains a soft-margin RBF classifier for the human
//! choice and calibrates it with a sigmoid fitted on out-of-fold decision
//! values. [`fit_regressor`] trains an epsilon-insensitive RBF regressor for
//! response time. [`predict_baseline`] combines them.

mod kernel;
mod platt;
mod smo;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::ddm::{MAX_RT, MIN_RT};
use crate::error::{Error, Result};
use crate::reasoner::FeatureVector;
use crate::scalar::Scalar;

pub use kernel::{scale_gamma, Rbf};
pub use platt::Sigmoid;

pub const CLASSIFIER_KIND: &[u8; 4] = b"SVC_";
pub const REGRESSOR_KIND: &[u8; 4] = b"SVR_";

/// Reasoner features for one trial plus its 1-based trial index.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferInput {
    pub features: Vec<f64>,
    pub question_id: u32,
}

impl TransferInput {
    pub fn new<T: Scalar>(features: &FeatureVector<T>, question_id: u32) -> Self {
        Self {
            features: features.as_slice().iter().map(|v| v.to_f64_lossy()).collect(),
            question_id,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselinePrediction {
    pub choice: bool,
    /// Probability of `choice`, at least 0.5.
    pub r_p: f64,
    /// Baseline response time in seconds.
    pub r_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaMode {
    /// `1 / (n_features * var(X))`.
    Scale,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub c: f64,
    pub gamma: GammaMode,
    pub epsilon: f64,
    /// Standardize the reasoner features (not the trial index).
    pub standardize: bool,
    pub calibration_folds: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub cache_mb: usize,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: GammaMode::Scale,
            epsilon: 0.1,
            standardize: true,
            calibration_folds: 3,
            tol: 1e-3,
            max_iter: 10_000_000,
            cache_mb: 200,
            seed: 0,
        }
    }
}

/// Per-column affine map applied to all but the last (trial index) column.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: ArrayView2<'_, f64>) -> Self {
        let h = x.ncols() - 1;
        let feats = x.slice(ndarray::s![.., ..h]);
        let mean = feats.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std = feats
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|&s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    fn apply(&self, mut row: ndarray::ArrayViewMut1<'_, f64>) {
        for (j, v) in row.iter_mut().take(self.mean.len()).enumerate() {
            *v = (*v - self.mean[j]) / self.std[j];
        }
    }
}

/// Support vectors with their dual coefficients.
#[derive(Debug, Clone, PartialEq)]
struct Expansion {
    support: Array2<f64>,
    coef: Vec<f64>,
    rho: f64,
    kernel: Rbf,
}

impl Expansion {
    fn from_dual(x: ArrayView2<'_, f64>, coef: Vec<f64>, rho: f64, kernel: Rbf) -> Self {
        let keep: Vec<usize> = (0..coef.len()).filter(|&i| coef[i] != 0.0).collect();
        Self {
            support: x.select(Axis(0), &keep),
            coef: keep.iter().map(|&i| coef[i]).collect(),
            rho,
            kernel,
        }
    }

    fn decision_batch(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        if self.coef.is_empty() {
            return Array1::from_elem(x.nrows(), -self.rho);
        }
        let k = kernel::cross_kernel(x, self.support.view(), self.kernel);
        k.dot(&ArrayView1::from(&self.coef)) - self.rho
    }

    fn push_arrays(&self, ck: &mut Checkpoint) {
        ck.push_array("support", self.support.iter().copied().collect());
        ck.push_array("coef", self.coef.clone());
        ck.push_array("rho_gamma", vec![self.rho, self.kernel.gamma]);
    }

    fn from_arrays(ck: &Checkpoint, dim: usize) -> std::result::Result<Self, String> {
        let get = |n: &str| ck.array(n).ok_or(format!("missing array {n}"));
        let coef = get("coef")?.to_vec();
        let sv = get("support")?;
        let rg = get("rho_gamma")?;
        if rg.len() != 2 || sv.len() != coef.len() * dim {
            return Err("inconsistent support-vector arrays".into());
        }
        let support =
            Array2::from_shape_vec((coef.len(), dim), sv.to_vec()).map_err(|e| e.to_string())?;
        Ok(Self {
            support,
            coef,
            rho: rg[0],
            kernel: Rbf { gamma: rg[1] },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Prepared {
    scaler: Option<Standardizer>,
    expansion: Expansion,
}

impl Prepared {
    fn design(&self, inputs: &[TransferInput]) -> Result<Array2<f64>> {
        let dim = self.expansion.support.ncols();
        let mut x = design_matrix(inputs)?;
        if x.ncols() != dim {
            return Err(Error::invalid(format!(
                "model expects {} inputs, got {}",
                dim,
                x.ncols()
            )));
        }
        if let Some(s) = &self.scaler {
            x.rows_mut().into_iter().for_each(|r| s.apply(r));
        }
        Ok(x)
    }

    fn to_checkpoint(&self, kind: &[u8; 4], seed: u64, extra: Vec<f64>) -> Checkpoint {
        let dim = self.expansion.support.ncols();
        let mut ck = Checkpoint::new(kind, seed).with_meta(vec![
            dim as u64,
            self.expansion.coef.len() as u64,
            self.scaler.is_some() as u64,
        ]);
        self.expansion.push_arrays(&mut ck);
        if let Some(s) = &self.scaler {
            ck.push_array("mean", s.mean.clone());
            ck.push_array("std", s.std.clone());
        }
        ck.push_array("extra", extra);
        ck
    }

    fn from_checkpoint(ck: &Checkpoint, kind: &[u8; 4]) -> Result<(Self, Vec<f64>)> {
        let bad = |reason: String| Error::Checkpoint {
            path: "<transfer>".into(),
            reason,
        };
        if &ck.kind != kind {
            return Err(bad(format!(
                "expected {} model",
                String::from_utf8_lossy(kind)
            )));
        }
        let [dim, _, scaled] = ck.meta[..] else {
            return Err(bad("bad meta".into()));
        };
        let expansion = Expansion::from_arrays(ck, dim as usize).map_err(bad)?;
        let scaler = if scaled == 1 {
            let mean = ck.array("mean").ok_or_else(|| bad("missing mean".into()))?;
            let std = ck.array("std").ok_or_else(|| bad("missing std".into()))?;
            if mean.len() + 1 != dim as usize || std.len() != mean.len() {
                return Err(bad("standardizer size mismatch".into()));
            }
            Some(Standardizer {
                mean: mean.to_vec(),
                std: std.to_vec(),
            })
        } else {
            None
        };
        let extra = ck.array("extra").unwrap_or_default().to_vec();
        Ok((Self { scaler, expansion }, extra))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceModel {
    inner: Prepared,
    calibration: Sigmoid,
    seed: u64,
}

impl ChoiceModel {
    pub fn decision_values(&self, inputs: &[TransferInput]) -> Result<Vec<f64>> {
        let x = self.inner.design(inputs)?;
        Ok(self.inner.expansion.decision_batch(x.view()).to_vec())
    }

    /// Calibrated probability that the human answers "true".
    pub fn prob_true(&self, decision: f64) -> f64 {
        self.calibration.prob(decision)
    }

    pub fn calibration(&self) -> Sigmoid {
        self.calibration
    }

    /// `(choice, probability of that choice)` per input.
    pub fn predict(&self, inputs: &[TransferInput]) -> Result<Vec<(bool, f64)>> {
        Ok(self
            .decision_values(inputs)?
            .into_iter()
            .map(|f| {
                let p = self.prob_true(f);
                if p >= 0.5 {
                    (true, p)
                } else {
                    (false, 1.0 - p)
                }
            })
            .collect())
    }

    pub fn n_support(&self) -> usize {
        self.inner.expansion.coef.len()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.inner.to_checkpoint(
            CLASSIFIER_KIND,
            self.seed,
            vec![self.calibration.a, self.calibration.b],
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (inner, extra) = Prepared::from_checkpoint(ck, CLASSIFIER_KIND)?;
        let [a, b] = extra[..] else {
            return Err(Error::Checkpoint {
                path: "<transfer>".into(),
                reason: "missing calibration".into(),
            });
        };
        Ok(Self {
            inner,
            calibration: Sigmoid { a, b },
            seed: ck.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtModel {
    inner: Prepared,
    seed: u64,
}

impl RtModel {
    /// Unclamped regression output in seconds.
    pub fn predict_raw(&self, inputs: &[TransferInput]) -> Result<Vec<f64>> {
        let x = self.inner.design(inputs)?;
        Ok(self.inner.expansion.decision_batch(x.view()).to_vec())
    }

    pub fn n_support(&self) -> usize {
        self.inner.expansion.coef.len()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.inner.to_checkpoint(REGRESSOR_KIND, self.seed, Vec::new())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (inner, _) = Prepared::from_checkpoint(ck, REGRESSOR_KIND)?;
        Ok(Self {
            inner,
            seed: ck.seed,
        })
    }
}

fn design_matrix(inputs: &[TransferInput]) -> Result<Array2<f64>> {
    let Some(first) = inputs.first() else {
        return Ok(Array2::zeros((0, 0)));
    };
    let dim = first.dim();
    let mut x = Array2::zeros((inputs.len(), dim));
    for (i, inp) in inputs.iter().enumerate() {
        if inp.dim() != dim {
            return Err(Error::invalid(format!(
                "row {i} has {} inputs, expected {dim}",
                inp.dim()
            )));
        }
        if let Some(v) = inp.features.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature {v} in row {i}")));
        }
        let mut row = x.row_mut(i);
        for (j, &v) in inp.features.iter().enumerate() {
            row[j] = v;
        }
        row[dim - 1] = f64::from(inp.question_id);
    }
    Ok(x)
}

fn prepare(inputs: &[TransferInput], cfg: &TransferConfig) -> Result<(Array2<f64>, Option<Standardizer>, Rbf)> {
    if inputs.len() < 2 {
        return Err(Error::invalid("need at least 2 rows"));
    }
    if !(cfg.c > 0.0) {
        return Err(Error::invalid("C must be positive"));
    }
    let mut x = design_matrix(inputs)?;
    let scaler = cfg.standardize.then(|| Standardizer::fit(x.view()));
    if let Some(s) = &scaler {
        x.rows_mut().into_iter().for_each(|r| s.apply(r));
    }
    let gamma = match cfg.gamma {
        GammaMode::Scale => scale_gamma(x.view()),
        GammaMode::Fixed(g) if g > 0.0 => g,
        GammaMode::Fixed(g) => return Err(Error::invalid(format!("gamma {g} must be positive"))),
    };
    Ok((x, scaler, Rbf { gamma }))
}

fn budget(cfg: &TransferConfig) -> usize {
    cfg.cache_mb.max(1) * 1024 * 1024
}

fn train_svc(x: ArrayView2<'_, f64>, y: &[bool], kernel: Rbf, cfg: &TransferConfig) -> Expansion {
    let n = y.len();
    let prob = smo::DualProblem {
        cache: kernel::KernelCache::new(x, kernel, budget(cfg)),
        index: (0..n).collect(),
        y: y.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect(),
        p: vec![-1.0; n],
        c: cfg.c,
    };
    let ys = prob.y.clone();
    let sol = smo::solve(prob, cfg.tol, cfg.max_iter);
    if !sol.converged {
        tracing::warn!(iterations = sol.iterations, "classifier hit the iteration cap");
    }
    let coef = sol.alpha.iter().zip(&ys).map(|(a, y)| a * y).collect();
    Expansion::from_dual(x, coef, sol.rho, kernel)
}

/// Fold assignment with both classes spread evenly over folds.
fn stratified_folds(y: &[bool], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; y.len()];
    let mut next = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            fold[i] = next % k;
            next += 1;
        }
    }
    fold
}

pub fn fit_classifier(rows: &[(TransferInput, bool)], cfg: &TransferConfig) -> Result<ChoiceModel> {
    let inputs: Vec<TransferInput> = rows.iter().map(|(i, _)| i.clone()).collect();
    let y: Vec<bool> = rows.iter().map(|&(_, c)| c).collect();
    let n_true = y.iter().filter(|&&c| c).count();
    if n_true == 0 || n_true == y.len() {
        return Err(Error::invalid("classifier needs both classes present"));
    }
    let (x, scaler, kernel) = prepare(&inputs, cfg)?;

    let k = cfg.calibration_folds;
    let min_class = n_true.min(y.len() - n_true);
    let oof = if k >= 2 && min_class >= k {
        let fold = stratified_folds(&y, k, cfg.seed);
        let mut out = vec![0.0; y.len()];
        for f in 0..k {
            let train: Vec<usize> = (0..y.len()).filter(|&i| fold[i] != f).collect();
            let test: Vec<usize> = (0..y.len()).filter(|&i| fold[i] == f).collect();
            let xt = x.select(Axis(0), &train);
            let yt: Vec<bool> = train.iter().map(|&i| y[i]).collect();
            let dv = if yt.iter().all(|&c| c == yt[0]) {
                let v = if yt[0] { 1.0 } else { -1.0 };
                Array1::from_elem(test.len(), v)
            } else {
                train_svc(xt.view(), &yt, kernel, cfg).decision_batch(x.select(Axis(0), &test).view())
            };
            for (&i, v) in test.iter().zip(dv) {
                out[i] = v;
            }
        }
        Some(out)
    } else {
        None
    };

    let expansion = train_svc(x.view(), &y, kernel, cfg);
    let decision = oof.unwrap_or_else(|| {
        // too few rows per class for held-out folds
        tracing::warn!(min_class, "calibrating on in-sample decision values");
        expansion.decision_batch(x.view()).to_vec()
    });
    let calibration = Sigmoid::fit(&decision, &y);
    Ok(ChoiceModel {
        inner: Prepared { scaler, expansion },
        calibration,
        seed: cfg.seed,
    })
}

pub fn fit_regressor(rows: &[(TransferInput, f64)], cfg: &TransferConfig) -> Result<RtModel> {
    if let Some((i, &(_, rt))) = rows
        .iter()
        .enumerate()
        .find(|(_, (_, rt))| !(rt.is_finite() && *rt > 0.0 && *rt <= MAX_RT))
    {
        return Err(Error::invalid(format!("row {i}: rt {rt} outside (0, {MAX_RT}]")));
    }
    let inputs: Vec<TransferInput> = rows.iter().map(|(i, _)| i.clone()).collect();
    let (x, scaler, kernel) = prepare(&inputs, cfg)?;
    let l = rows.len();
    let mut index = Vec::with_capacity(2 * l);
    let mut y = Vec::with_capacity(2 * l);
    let mut p = Vec::with_capacity(2 * l);
    for (i, &(_, z)) in rows.iter().enumerate() {
        index.push(i);
        y.push(1.0);
        p.push(cfg.epsilon - z);
    }
    for (i, &(_, z)) in rows.iter().enumerate() {
        index.push(i);
        y.push(-1.0);
        p.push(cfg.epsilon + z);
    }
    let prob = smo::DualProblem {
        cache: kernel::KernelCache::new(x.view(), kernel, budget(cfg)),
        index,
        y,
        p,
        c: cfg.c,
    };
    let sol = smo::solve(prob, cfg.tol, cfg.max_iter);
    if !sol.converged {
        tracing::warn!(iterations = sol.iterations, "regressor hit the iteration cap");
    }
    let coef = (0..l).map(|i| sol.alpha[i] - sol.alpha[i + l]).collect();
    Ok(RtModel {
        inner: Prepared {
            scaler,
            expansion: Expansion::from_dual(x.view(), coef, sol.rho, kernel),
        },
        seed: cfg.seed,
    })
}

/// Clamps a regression output into the supported response-time range.
pub fn clamp_rt(raw: f64) -> f64 {
    if raw.is_nan() {
        return MIN_RT;
    }
    raw.clamp(MIN_RT, MAX_RT)
}

pub fn predict_baseline(
    choice: &ChoiceModel,
    rt: &RtModel,
    inputs: &[TransferInput],
) -> Result<Vec<BaselinePrediction>> {
    let c = choice.predict(inputs)?;
    let r = rt.predict_raw(inputs)?;
    Ok(c
        .into_iter()
        .zip(r)
        .map(|((choice, r_p), raw)| BaselinePrediction {
            choice,
            r_p,
            r_t: clamp_rt(raw),
        })
        .collect())
}
