//! Recurrent reasoning agent.
//!
//! A single LSTM layer reads the 11 one-hot characters of a question and a
//! softmax layer over the 17 dictionary classes reads the final hidden state.
//! Training is plain minibatch Adam on the categorical cross-entropy, with
//! hand-written backpropagation through time. The final hidden state doubles
//! as the question's feature vector for the transfer stage.

use std::ops::ControlFlow;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, ParamLayout};
use crate::scalar::Scalar;
use crate::taskgen::{EncodedQuestion, MathQuestion, DICT_LEN, SEQ_LEN};

pub const CHECKPOINT_KIND: &[u8; 4] = b"RSNR";
pub const SUPPORTED_HIDDEN: [usize; 4] = [32, 64, 128, 256];
pub const N_CLASSES: usize = DICT_LEN;

const W_X: usize = 0;
const W_H: usize = 1;
const BIAS: usize = 2;
const W_O: usize = 3;
const B_O: usize = 4;

pub type Tokens = [usize; SEQ_LEN];

/// One training example: question tokens and the remainder class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Tokens,
    pub answer: usize,
}

impl Sample {
    pub fn new(encoded: &EncodedQuestion, answer: u8) -> Self {
        Self {
            tokens: encoded.indices(),
            answer: answer as usize,
        }
    }

    pub fn from_question(q: &MathQuestion) -> Self {
        Self::new(&q.encode(), q.answer())
    }
}

/// Final hidden state of the recurrent layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T>(pub Vec<T>);

impl<T> FeatureVector<T> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub class: usize,
    pub probs: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            epochs: 100,
            lr: 1e-3,
            batch: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasonerModel<T> {
    hidden: usize,
    seed: u64,
    layout: ParamLayout,
    params: Vec<T>,
}

struct StepCache<T> {
    i: Array2<T>,
    f: Array2<T>,
    g: Array2<T>,
    o: Array2<T>,
    c: Array2<T>,
    tanh_c: Array2<T>,
    h: Array2<T>,
}

struct Forward<T> {
    steps: Vec<StepCache<T>>,
    probs: Array2<T>,
}

fn layout_for(hidden: usize) -> ParamLayout {
    let mut l = ParamLayout::new();
    l.push("w_x", DICT_LEN, 4 * hidden);
    l.push("w_h", hidden, 4 * hidden);
    l.push("bias", 4 * hidden, 1);
    l.push("w_o", hidden, N_CLASSES);
    l.push("b_o", N_CLASSES, 1);
    l
}

impl<T: Scalar> ReasonerModel<T> {
    /// Fresh model with weights drawn from `U(-1/sqrt(H), 1/sqrt(H))`.
    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("hidden size must be positive"));
        }
        let layout = layout_for(hidden);
        let mut params = vec![T::zero(); layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        nn::uniform_init(&mut params, 1.0 / (hidden as f64).sqrt(), &mut rng);
        Ok(Self {
            hidden,
            seed,
            layout,
            params,
        })
    }

    /// `17*4H + H*4H + 4H + H*17 + 17`.
    pub fn param_count(hidden: usize) -> usize {
        layout_for(hidden).total()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn forward(&self, tokens: &[Tokens]) -> Forward<T> {
        let h = self.hidden;
        let n = tokens.len();
        let w_x = self.layout.mat(W_X, &self.params);
        let w_h = self.layout.mat(W_H, &self.params);
        let bias = self.layout.vec(BIAS, &self.params);

        let mut steps: Vec<StepCache<T>> = Vec::with_capacity(SEQ_LEN);
        for t in 0..SEQ_LEN {
            let mut z = Array2::<T>::zeros((n, 4 * h));
            for (mut row, tok) in z.rows_mut().into_iter().zip(tokens) {
                Zip::from(&mut row)
                    .and(&w_x.row(tok[t]))
                    .and(&bias)
                    .for_each(|z, &w, &b| *z = w + b);
            }
            if let Some(prev) = steps.last() {
                general_mat_mul(T::one(), &prev.h, &w_h, T::one(), &mut z);
            }
            let i = z.slice(s![.., 0..h]).mapv(Scalar::sigmoid);
            let f = z.slice(s![.., h..2 * h]).mapv(Scalar::sigmoid);
            let g = z.slice(s![.., 2 * h..3 * h]).mapv(T::tanh);
            let o = z.slice(s![.., 3 * h..4 * h]).mapv(Scalar::sigmoid);
            let mut c = &i * &g;
            if let Some(prev) = steps.last() {
                Zip::from(&mut c)
                    .and(&f)
                    .and(&prev.c)
                    .for_each(|c, &f, &cp| *c += f * cp);
            }
            let tanh_c = c.mapv(T::tanh);
            let hh = &o * &tanh_c;
            steps.push(StepCache {
                i,
                f,
                g,
                o,
                c,
                tanh_c,
                h: hh,
            });
        }

        let last = &steps[SEQ_LEN - 1].h;
        let mut probs = last.dot(&self.layout.mat(W_O, &self.params));
        probs += &self.layout.vec(B_O, &self.params);
        nn::softmax_rows(probs.view_mut());
        Forward { steps, probs }
    }

    /// Mean cross-entropy over `batch`.
    pub fn loss(&self, batch: &[Sample]) -> T {
        let tokens: Vec<Tokens> = batch.iter().map(|s| s.tokens).collect();
        let fw = self.forward(&tokens);
        cross_entropy(&fw.probs.view(), batch)
    }

    /// Mean loss, number of correct argmax predictions, and the gradient of
    /// the mean loss with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[Sample]) -> (T, usize, Vec<T>) {
        let h = self.hidden;
        let n = batch.len();
        let tokens: Vec<Tokens> = batch.iter().map(|s| s.tokens).collect();
        let fw = self.forward(&tokens);
        let loss = cross_entropy(&fw.probs.view(), batch);
        let correct = batch
            .iter()
            .zip(fw.probs.rows())
            .filter(|(s, p)| argmax(p.as_slice().expect("contiguous")) == s.answer)
            .count();

        let mut grad = vec![T::zero(); self.layout.total()];
        let inv_n = T::one() / T::from_usize(n).expect("usize fits");
        let mut dlogits = fw.probs.clone();
        for (mut row, s) in dlogits.rows_mut().into_iter().zip(batch) {
            row[s.answer] -= T::one();
            row.mapv_inplace(|v| v * inv_n);
        }
        let last_h = &fw.steps[SEQ_LEN - 1].h;
        {
            let mut dw_o = self.layout.mat_mut(W_O, &mut grad);
            general_mat_mul(T::one(), &last_h.t(), &dlogits, T::zero(), &mut dw_o);
        }
        self.layout
            .vec_mut(B_O, &mut grad)
            .assign(&dlogits.sum_axis(Axis(0)));

        let w_h = self.layout.mat(W_H, &self.params);
        let mut dh = dlogits.dot(&self.layout.mat(W_O, &self.params).t());
        let mut dc = Array2::<T>::zeros((n, h));
        let mut dz = Array2::<T>::zeros((n, 4 * h));
        let one = T::one();

        for t in (0..SEQ_LEN).rev() {
            let st = &fw.steps[t];
            let c_prev = (t > 0).then(|| &fw.steps[t - 1].c);
            {
                let (mut dzi, rest) = dz.view_mut().split_at(Axis(1), h);
                let (mut dzf, rest) = rest.split_at(Axis(1), h);
                let (mut dzg, mut dzo) = rest.split_at(Axis(1), h);
                Zip::from(&mut dc)
                    .and(&dh)
                    .and(&st.o)
                    .and(&st.tanh_c)
                    .and(&mut dzo)
                    .for_each(|dc, &dh, &o, &tc, dzo| {
                        *dzo = dh * tc * o * (one - o);
                        *dc += dh * o * (one - tc * tc);
                    });
                Zip::from(&mut dzi)
                    .and(&mut dzg)
                    .and(&dc)
                    .and(&st.i)
                    .and(&st.g)
                    .for_each(|dzi, dzg, &dc, &i, &g| {
                        *dzi = dc * g * i * (one - i);
                        *dzg = dc * i * (one - g * g);
                    });
                match c_prev {
                    Some(cp) => Zip::from(&mut dzf)
                        .and(&dc)
                        .and(&st.f)
                        .and(cp)
                        .for_each(|dzf, &dc, &f, &cp| *dzf = dc * cp * f * (one - f)),
                    None => dzf.fill(T::zero()),
                }
            }
            dc *= &st.f;

            {
                let mut b = self.layout.vec_mut(BIAS, &mut grad);
                b += &dz.sum_axis(Axis(0));
            }
            {
                let mut dw_x = self.layout.mat_mut(W_X, &mut grad);
                for (row, tok) in dz.rows().into_iter().zip(&tokens) {
                    let mut target = dw_x.row_mut(tok[t]);
                    target += &row;
                }
            }
            if t > 0 {
                let h_prev = &fw.steps[t - 1].h;
                let mut dw_h = self.layout.mat_mut(W_H, &mut grad);
                general_mat_mul(one, &h_prev.t(), &dz, one, &mut dw_h);
                general_mat_mul(one, &dz, &w_h.t(), T::zero(), &mut dh);
            }
        }
        (loss, correct, grad)
    }

    pub fn predict(&self, q: &EncodedQuestion) -> Prediction<T> {
        self.predict_batch(std::slice::from_ref(q))
            .pop()
            .expect("one prediction")
    }

    pub fn predict_batch(&self, qs: &[EncodedQuestion]) -> Vec<Prediction<T>> {
        let tokens: Vec<Tokens> = qs.iter().map(|q| q.indices()).collect();
        let mut out = Vec::with_capacity(qs.len());
        for chunk in tokens.chunks(1024) {
            let fw = self.forward(chunk);
            out.extend(fw.probs.rows().into_iter().map(|p| {
                let probs = p.to_vec();
                Prediction {
                    class: argmax(&probs),
                    probs,
                }
            }));
        }
        out
    }

    /// Fraction of samples whose argmax class equals the answer.
    pub fn accuracy(&self, samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let mut correct = 0;
        for chunk in samples.chunks(1024) {
            let tokens: Vec<Tokens> = chunk.iter().map(|s| s.tokens).collect();
            let fw = self.forward(&tokens);
            correct += chunk
                .iter()
                .zip(fw.probs.rows())
                .filter(|(s, p)| argmax(p.as_slice().expect("contiguous")) == s.answer)
                .count();
        }
        correct as f64 / samples.len() as f64
    }

    pub fn extract_features(&self, q: &EncodedQuestion) -> FeatureVector<T> {
        let m = self.extract_features_batch(std::slice::from_ref(q));
        FeatureVector(m.row(0).to_vec())
    }

    /// One row of `H` features per question.
    pub fn extract_features_batch(&self, qs: &[EncodedQuestion]) -> Array2<T> {
        let mut out = Array2::zeros((qs.len(), self.hidden));
        for (ci, chunk) in qs.chunks(1024).enumerate() {
            let tokens: Vec<Tokens> = chunk.iter().map(|q| q.indices()).collect();
            let fw = self.forward(&tokens);
            out.slice_mut(s![ci * 1024..ci * 1024 + chunk.len(), ..])
                .assign(&fw.steps[SEQ_LEN - 1].h);
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, self.seed).with_meta(vec![self.hidden as u64]);
        ck.push_array("params", self.params.iter().map(|v| v.to_f64_lossy()).collect());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: "<reasoner>".into(),
            reason,
        };
        if &ck.kind != CHECKPOINT_KIND {
            return Err(bad("not a reasoner checkpoint".into()));
        }
        let hidden = *ck.meta.first().ok_or_else(|| bad("missing hidden size".into()))? as usize;
        let values = ck.array("params").ok_or_else(|| bad("missing params".into()))?;
        let layout = layout_for(hidden);
        if values.len() != layout.total() {
            return Err(bad(format!(
                "expected {} params for H={hidden}, found {}",
                layout.total(),
                values.len()
            )));
        }
        Ok(Self {
            hidden,
            seed: ck.seed,
            layout,
            params: values.iter().map(|&v| T::lit(v)).collect(),
        })
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> ReasonerModel<U> {
        ReasonerModel {
            hidden: self.hidden,
            seed: self.seed,
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

fn cross_entropy<T: Scalar>(probs: &ArrayView2<'_, T>, batch: &[Sample]) -> T {
    let floor = T::min_positive_value();
    let total: T = batch
        .iter()
        .zip(probs.rows())
        .map(|(s, p)| {
            let p = p[s.answer];
            // keep NaN visible; Float::max would swallow it
            -(if p.is_nan() { p } else { p.max(floor) }).ln()
        })
        .sum();
    total / T::from_usize(batch.len()).expect("usize fits")
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Trains a fresh model. `on_epoch` sees each epoch's stats and the current
/// model and may stop training early by returning `ControlFlow::Break`.
pub fn train<T, F>(
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(ReasonerModel<T>, Vec<EpochStats>)>
where
    T: Scalar,
    F: FnMut(&EpochStats, &ReasonerModel<T>) -> ControlFlow<()>,
{
    if samples.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if let Some(s) = samples.iter().find(|s| s.answer > N_CLASSES - 1) {
        return Err(Error::invalid(format!("answer {} out of range", s.answer)));
    }
    let mut model = ReasonerModel::<T>::new(cfg.hidden, cfg.seed)?;
    let mut opt = Adam::new(model.params.len(), AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for idx in order.chunks(cfg.batch) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| samples[i]));
            let (loss, ok, grad) = model.loss_and_grad(&batch);
            let loss = nn::ensure_finite("reasoner loss", loss).map_err(|e| {
                Error::NonFinite(format!("{e} at epoch {epoch}; try a lower learning rate"))
            })?;
            loss_sum += loss.to_f64_lossy() * batch.len() as f64;
            correct += ok;
            opt.step(&mut model.params, &grad);
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        };
        debug!(epoch, loss = stats.loss, accuracy = stats.accuracy, "reasoner epoch");
        curve.push(stats);
        if on_epoch(&stats, &model).is_break() {
            break;
        }
    }
    Ok((model, curve))
}

/// Seeded 80/20 split of the question enumeration.
pub fn split_questions(questions: &[MathQuestion], seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut idx: Vec<usize> = (0..questions.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (questions.len() as f64 * 0.8).round() as usize;
    let to_samples = |ids: &[usize]| -> Vec<Sample> {
        ids.iter().map(|&i| Sample::from_question(&questions[i])).collect()
    };
    (to_samples(&idx[..n_train]), to_samples(&idx[n_train..]))
}

pub fn write_curve_csv<W: std::io::Write>(curve: &[EpochStats], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in curve {
        wtr.serialize(s)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
