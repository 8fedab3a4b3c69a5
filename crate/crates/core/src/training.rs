//! Joint minimization of `L = L_pred + lambda * L_int` by mini-batch SGD.
//!
//! `L_pred` is the batch RMSE of the rating predictions and `L_int` the mean
//! distance `||v_hat - u||` between each item embedding and its attention
//! reconstruction. Gradients are derived by hand:
//!
//! * `L_pred` flows into user/item embeddings and biases. With per-example
//!   error `e_t = r_hat_t - r_t` and `L = sqrt(sum e^2 / N)`, the prediction
//!   receives `e_t / (N L)`.
//! * `L_int` flows into the aspect rows and the bilinear scorer. Softmax mode
//!   back-propagates through the scores `e_k = u^T W psi_hat_k / sqrt(n)`;
//!   linear mode uses the envelope identity `d||r||/dpsi_hat_k = a_k (v_hat - u) / ||r||`,
//!   exact because the weights are the least-squares optimum.
//! * With shielding on (the default) nothing from `L_int` reaches the item
//!   embeddings, so the rating model follows exactly the trajectory it would
//!   with `lambda = 0`.
//!
//! Weight decay `l2` is applied per occurrence in the batch, to the rows that
//! the batch touches, as `l2 / N * theta`. It is not part of the reported loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AspectCatalog, DatasetSplit, IdMap, Interaction};
use crate::eval;
use crate::linalg::{self, axpy, dot, norm};
use crate::model::{softmax, AmcfModel, AttentionMode, Hyper, Matrix, ModelError};

/// RNG stream used for parameter initialization.
pub const INIT_STREAM: u64 = 0;
/// RNG stream used to re-draw collapsed aspect rows.
pub const JITTER_STREAM: u64 = 1;
/// Epoch `e` shuffles with stream `SHUFFLE_STREAM_BASE + e`.
pub const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

/// Aspect rows whose norm drops below this are re-drawn.
const COLLAPSE_NORM: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in {parameter}")]
    NonFiniteGradient { parameter: &'static str },
    #[error("invalid training config: {field} {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("training split is empty")]
    EmptyTrain,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub shield: bool,
    /// Standard deviation of the normal initializer.
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            l2: 0.05,
            lambda: 0.05,
            batch_size: 256,
            max_epochs: 100,
            patience: 5,
            seed: 42,
            shield: true,
            init_std: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, message: &str| {
            Err(TrainError::InvalidConfig {
                field,
                message: message.to_string(),
            })
        };
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return bad("l2", "must be non-negative");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda", "must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be positive");
        }
        if self.patience == 0 {
            return bad("patience", "must be positive");
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pred: f64,
    pub l_int: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_pred: f64, l_int: f64, lambda: f64) -> Self {
        Self {
            l_pred,
            l_int,
            total: l_pred + lambda * l_int,
        }
    }
}

/// One line of training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_pred: f64,
    pub l_int: f64,
    pub total: f64,
    pub val_rmse: Option<f64>,
}

/// `epoch,l_pred,l_int,total,val_rmse`, one row per epoch.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,l_pred,l_int,total,val_rmse\n");
    for r in history {
        let val = r.val_rmse.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.l_pred, r.l_int, r.total, val));
    }
    out
}

/// Losses on `batch` under the model's own `lambda`.
pub fn compute_loss(model: &AmcfModel, batch: &[Interaction]) -> LossBreakdown {
    assert!(!batch.is_empty(), "loss of an empty batch");
    let unit = model.unit_aspects();
    let mut sq = 0.0;
    let mut dist = 0.0;
    for x in batch {
        let e = model.predict_rating(x.user as usize, x.item as usize) - x.rating;
        sq += e * e;
        let u = model.item_emb.row(x.item as usize);
        let att = model.attend_vector(x.item as usize, u, &unit);
        let d: Vec<f64> = att.reconstruction.iter().zip(u).map(|(v, u)| v - u).collect();
        dist += norm(&d);
    }
    let n = batch.len() as f64;
    LossBreakdown::new((sq / n).sqrt(), dist / n, model.hyper.lambda)
}

/// Gradient buffers shaped like the model. Embedding rows are only valid for
/// the indices listed in `touched_users` / `touched_items`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub user_emb: Matrix,
    pub item_emb: Matrix,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    pub aspect_emb: Matrix,
    pub attn_bilinear: Matrix,
    pub touched_users: Vec<usize>,
    pub touched_items: Vec<usize>,
    user_mark: Vec<bool>,
    item_mark: Vec<bool>,
    /// Per-aspect accumulator `sum_t c * delta_tk * u_t / sqrt(n)`.
    score_acc: Matrix,
    /// Per-aspect gradient with respect to the normalized row `psi_hat_k`.
    unit_grad: Matrix,
}

impl Gradients {
    pub fn zeros_like(model: &AmcfModel) -> Self {
        let n = model.hyper.dim;
        let m = model.hyper.aspects;
        Self {
            user_emb: Matrix::zeros(model.user_count(), n),
            item_emb: Matrix::zeros(model.item_count(), n),
            user_bias: vec![0.0; model.user_count()],
            item_bias: vec![0.0; model.item_count()],
            aspect_emb: Matrix::zeros(m, n),
            attn_bilinear: Matrix::zeros(n, n),
            touched_users: Vec::new(),
            touched_items: Vec::new(),
            user_mark: vec![false; model.user_count()],
            item_mark: vec![false; model.item_count()],
            score_acc: Matrix::zeros(m, n),
            unit_grad: Matrix::zeros(m, n),
        }
    }

    fn touch(&mut self, user: usize, item: usize) {
        if !self.user_mark[user] {
            self.user_mark[user] = true;
            self.touched_users.push(user);
        }
        if !self.item_mark[item] {
            self.item_mark[item] = true;
            self.touched_items.push(item);
        }
    }

    fn clear(&mut self) {
        for &u in &self.touched_users {
            self.user_emb.row_mut(u).fill(0.0);
            self.user_bias[u] = 0.0;
            self.user_mark[u] = false;
        }
        for &i in &self.touched_items {
            self.item_emb.row_mut(i).fill(0.0);
            self.item_bias[i] = 0.0;
            self.item_mark[i] = false;
        }
        self.touched_users.clear();
        self.touched_items.clear();
        self.aspect_emb.as_mut_slice().fill(0.0);
        self.attn_bilinear.as_mut_slice().fill(0.0);
        self.score_acc.as_mut_slice().fill(0.0);
        self.unit_grad.as_mut_slice().fill(0.0);
    }
}

/// Normalized aspect rows and, for softmax mode, `W psi_hat_k`, fixed for one step.
struct AspectView {
    unit: Vec<Vec<f64>>,
    norms: Vec<f64>,
    w_unit: Vec<Vec<f64>>,
}

impl AspectView {
    fn new(model: &AmcfModel) -> Self {
        let m = model.hyper.aspects;
        let n = model.hyper.dim;
        let norms: Vec<f64> = (0..m).map(|k| norm(model.aspect_emb.row(k))).collect();
        let unit: Vec<Vec<f64>> = (0..m)
            .map(|k| model.aspect_emb.row(k).iter().map(|x| x / norms[k]).collect())
            .collect();
        let w_unit = match model.hyper.attn_mode {
            AttentionMode::Softmax => unit
                .iter()
                .map(|psi| {
                    let mut out = vec![0.0; n];
                    model.attn_bilinear.mul_vec(psi, &mut out);
                    out
                })
                .collect(),
            AttentionMode::Linear => Vec::new(),
        };
        Self { unit, norms, w_unit }
    }
}

/// Accumulates the gradient of the total loss on `batch` (plus `l2` decay)
/// into `grads` and returns the batch losses.
fn accumulate(
    model: &AmcfModel,
    batch: &[Interaction],
    shield: bool,
    l2: f64,
    grads: &mut Gradients,
) -> (LossBreakdown, f64, f64) {
    let n_dim = model.hyper.dim;
    let lambda = model.hyper.lambda;
    let count = batch.len() as f64;
    let sqrt_n = (n_dim as f64).sqrt();

    // rating branch
    let errors: Vec<f64> = batch
        .iter()
        .map(|x| model.predict_rating(x.user as usize, x.item as usize) - x.rating)
        .collect();
    let sq: f64 = errors.iter().map(|e| e * e).sum();
    let l_pred = (sq / count).sqrt();
    let decay = l2 / count;
    for (x, &e) in batch.iter().zip(&errors) {
        let (u, i) = (x.user as usize, x.item as usize);
        grads.touch(u, i);
        let coef = if l_pred > 0.0 { e / (count * l_pred) } else { 0.0 };
        grads.user_bias[u] += coef + decay * model.user_bias[u];
        grads.item_bias[i] += coef + decay * model.item_bias[i];
        let q = model.user_emb.row(u);
        let p = model.item_emb.row(i);
        {
            let gq = grads.user_emb.row_mut(u);
            for d in 0..n_dim {
                gq[d] += coef * p[d] + decay * q[d];
            }
        }
        let gp = grads.item_emb.row_mut(i);
        for d in 0..n_dim {
            gp[d] += coef * q[d] + decay * p[d];
        }
    }

    // interpretation branch
    let view = AspectView::new(model);
    let c = lambda / count;
    let backward = lambda > 0.0;
    let mut dist_sum = 0.0;
    let mut recon = vec![0.0; n_dim];
    let mut diff = vec![0.0; n_dim];
    for x in batch {
        let item = x.item as usize;
        let u = model.item_emb.row(item);
        let attended = model.attended_aspects(item);
        let weights: Vec<f64> = match model.hyper.attn_mode {
            AttentionMode::Softmax => {
                let scores: Vec<f64> = attended.iter().map(|&k| dot(u, &view.w_unit[k]) / sqrt_n).collect();
                softmax(&scores)
            }
            AttentionMode::Linear => {
                let cols: Vec<&[f64]> = attended.iter().map(|&k| view.unit[k].as_slice()).collect();
                linalg::least_squares_slices(&cols, u, 0.0)
                    .or_else(|_| linalg::least_squares_slices(&cols, u, crate::model::LINEAR_FALLBACK_RIDGE))
                    .expect("ridge system is positive definite")
            }
        };
        recon.fill(0.0);
        for (&k, &a) in attended.iter().zip(&weights) {
            axpy(a, &view.unit[k], &mut recon);
        }
        for d in 0..n_dim {
            diff[d] = recon[d] - u[d];
        }
        let dist = norm(&diff);
        dist_sum += dist;
        if !backward || dist == 0.0 {
            continue;
        }
        // g = (v_hat - u) / ||v_hat - u||
        let g: Vec<f64> = diff.iter().map(|d| d / dist).collect();
        match model.hyper.attn_mode {
            AttentionMode::Softmax => {
                let h: Vec<f64> = attended.iter().map(|&k| dot(&g, &view.unit[k])).collect();
                let h_bar: f64 = weights.iter().zip(&h).map(|(a, h)| a * h).sum();
                let mut du = if shield { None } else { Some(vec![0.0; n_dim]) };
                for (idx, &k) in attended.iter().enumerate() {
                    let a = weights[idx];
                    let delta = a * (h[idx] - h_bar);
                    axpy(c * a, &g, grads.unit_grad.row_mut(k));
                    axpy(c * delta / sqrt_n, u, grads.score_acc.row_mut(k));
                    if let Some(du) = du.as_mut() {
                        axpy(delta / sqrt_n, &view.w_unit[k], du);
                    }
                }
                if let Some(mut du) = du {
                    axpy(-1.0, &g, &mut du);
                    axpy(c, &du, grads.item_emb.row_mut(item));
                }
            }
            AttentionMode::Linear => {
                for (&k, &a) in attended.iter().zip(&weights) {
                    axpy(c * a, &g, grads.unit_grad.row_mut(k));
                }
                if !shield {
                    axpy(-c, &g, grads.item_emb.row_mut(item));
                }
            }
        }
    }

    if backward {
        let m = model.hyper.aspects;
        let mut tmp = vec![0.0; n_dim];
        for k in 0..m {
            if model.hyper.attn_mode == AttentionMode::Softmax {
                // d e_k / d psi_hat_k = W^T u / sqrt(n), d e_k / dW = u psi_hat_k^T / sqrt(n)
                model.attn_bilinear.tmul_vec(grads.score_acc.row(k), &mut tmp);
                axpy(1.0, &tmp, grads.unit_grad.row_mut(k));
                if !model.hyper.freeze_attention {
                    let acc = grads.score_acc.row(k).to_vec();
                    for (r, &ar) in acc.iter().enumerate() {
                        if ar != 0.0 {
                            axpy(ar, &view.unit[k], grads.attn_bilinear.row_mut(r));
                        }
                    }
                }
            }
            // through psi_hat = psi / ||psi||
            let gu = grads.unit_grad.row(k);
            let radial = dot(gu, &view.unit[k]);
            let out = grads.aspect_emb.row_mut(k);
            for d in 0..n_dim {
                out[d] = (gu[d] - radial * view.unit[k][d]) / view.norms[k];
            }
        }
    }

    let l_int = dist_sum / count;
    (LossBreakdown::new(l_pred, l_int, lambda), sq, dist_sum)
}

/// Analytic gradient of the total loss on `batch`, without weight decay.
pub fn loss_gradients(model: &AmcfModel, batch: &[Interaction], shield: bool) -> (LossBreakdown, Gradients) {
    let mut grads = Gradients::zeros_like(model);
    let (loss, _, _) = accumulate(model, batch, shield, 0.0, &mut grads);
    (loss, grads)
}

fn check_finite(grads: &Gradients) -> Result<(), TrainError> {
    let rows_finite = |m: &Matrix, rows: &[usize]| rows.iter().all(|&r| m.row(r).iter().all(|x| x.is_finite()));
    if !rows_finite(&grads.user_emb, &grads.touched_users) {
        return Err(TrainError::NonFiniteGradient { parameter: "user_emb" });
    }
    if !rows_finite(&grads.item_emb, &grads.touched_items) {
        return Err(TrainError::NonFiniteGradient { parameter: "item_emb" });
    }
    if !grads.touched_users.iter().all(|&u| grads.user_bias[u].is_finite()) {
        return Err(TrainError::NonFiniteGradient { parameter: "user_bias" });
    }
    if !grads.touched_items.iter().all(|&i| grads.item_bias[i].is_finite()) {
        return Err(TrainError::NonFiniteGradient { parameter: "item_bias" });
    }
    if !grads.aspect_emb.is_finite() {
        return Err(TrainError::NonFiniteGradient { parameter: "aspect_emb" });
    }
    if !grads.attn_bilinear.is_finite() {
        return Err(TrainError::NonFiniteGradient { parameter: "attn_bilinear" });
    }
    Ok(())
}

/// Applies one SGD update from `grads`, then clears the buffers.
fn apply(model: &mut AmcfModel, grads: &mut Gradients, lr: f64, update_aspects: bool) {
    for &u in &grads.touched_users {
        axpy(-lr, grads.user_emb.row(u), model.user_emb.row_mut(u));
        model.user_bias[u] -= lr * grads.user_bias[u];
    }
    for &i in &grads.touched_items {
        axpy(-lr, grads.item_emb.row(i), model.item_emb.row_mut(i));
        model.item_bias[i] -= lr * grads.item_bias[i];
    }
    if update_aspects {
        axpy(-lr, grads.aspect_emb.as_slice(), model.aspect_emb.as_mut_slice());
        let trains_w = model.hyper.attn_mode == AttentionMode::Softmax && !model.hyper.freeze_attention;
        if trains_w {
            axpy(-lr, grads.attn_bilinear.as_slice(), model.attn_bilinear.as_mut_slice());
        }
    }
    grads.clear();
}

/// What a training observer is told after every step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Mini-batch SGD driver holding the reusable gradient buffers.
pub struct Trainer {
    config: TrainConfig,
    grads: Gradients,
    jitter_rng: ChaCha8Rng,
    /// How many times a collapsed aspect row was re-drawn.
    pub rejitters: usize,
}

impl Trainer {
    pub fn new(model: &AmcfModel, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut jitter_rng = ChaCha8Rng::seed_from_u64(config.seed);
        jitter_rng.set_stream(JITTER_STREAM);
        Ok(Self {
            grads: Gradients::zeros_like(model),
            config,
            jitter_rng,
            rejitters: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One gradient step on `batch`; returns the losses before the update.
    pub fn step(&mut self, model: &mut AmcfModel, batch: &[Interaction]) -> Result<LossBreakdown, TrainError> {
        let (loss, _, _) = self.step_raw(model, batch)?;
        Ok(loss)
    }

    fn step_raw(&mut self, model: &mut AmcfModel, batch: &[Interaction]) -> Result<(LossBreakdown, f64, f64), TrainError> {
        assert!(!batch.is_empty(), "sgd step on an empty batch");
        model.hyper.lambda = self.config.lambda;
        let out = accumulate(model, batch, self.config.shield, self.config.l2, &mut self.grads);
        if let Err(e) = check_finite(&self.grads) {
            self.grads.clear();
            return Err(e);
        }
        apply(model, &mut self.grads, self.config.lr, self.config.lambda > 0.0);
        self.rejitter(model);
        Ok(out)
    }

    fn rejitter(&mut self, model: &mut AmcfModel) {
        let normal = Normal::new(0.0, self.config.init_std).expect("validated std");
        for k in 0..model.hyper.aspects {
            while norm(model.aspect_emb.row(k)) < COLLAPSE_NORM {
                for x in model.aspect_emb.row_mut(k) {
                    *x = normal.sample(&mut self.jitter_rng);
                }
                self.rejitters += 1;
            }
        }
    }

    /// One pass over `train` in a freshly shuffled order.
    pub fn epoch(
        &mut self,
        model: &mut AmcfModel,
        train: &[Interaction],
        epoch: usize,
        observer: &mut dyn FnMut(StepInfo, &AmcfModel),
    ) -> Result<LossBreakdown, TrainError> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(SHUFFLE_STREAM_BASE + epoch as u64);
        order.shuffle(&mut rng);
        let mut batch = Vec::with_capacity(self.config.batch_size);
        let mut sq = 0.0;
        let mut dist = 0.0;
        for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i]));
            let (loss, s, d) = self.step_raw(model, &batch)?;
            sq += s;
            dist += d;
            observer(StepInfo { epoch, step, loss }, model);
        }
        let n = train.len() as f64;
        Ok(LossBreakdown::new((sq / n).sqrt(), dist / n, self.config.lambda))
    }
}

/// One SGD step with a throwaway workspace.
pub fn sgd_step(model: &mut AmcfModel, batch: &[Interaction], config: &TrainConfig) -> Result<LossBreakdown, TrainError> {
    Trainer::new(model, config.clone())?.step(model, batch)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation RMSE.
    pub model: AmcfModel,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch the returned model comes from.
    pub best_epoch: usize,
    pub rejitters: usize,
}

/// Trains `model` on `split.train`, early-stopping on validation RMSE.
pub fn train_model(
    model: AmcfModel,
    split: &DatasetSplit,
    config: &TrainConfig,
    observer: &mut dyn FnMut(StepInfo, &AmcfModel),
) -> Result<TrainOutcome, TrainError> {
    if split.train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let mut model = model;
    model.hyper.lambda = config.lambda;
    let mut trainer = Trainer::new(&model, config.clone())?;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, AmcfModel)> = None;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let loss = trainer.epoch(&mut model, &split.train, epoch, observer)?;
        let val_rmse = (!split.validation.is_empty()).then(|| eval::rmse(&model, &split.validation));
        history.push(EpochRecord {
            epoch,
            l_pred: loss.l_pred,
            l_int: loss.l_int,
            total: loss.total,
            val_rmse,
        });
        match val_rmse {
            Some(v) => {
                if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                    best = Some((v, epoch, model.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.patience {
                        break;
                    }
                }
            }
            None => best = Some((f64::NAN, epoch, model.clone())),
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        rejitters: trainer.rejitters,
    })
}

/// Initializes a model for `split` and trains it.
pub fn train(
    split: &DatasetSplit,
    catalog: &AspectCatalog,
    users: &IdMap,
    items: &IdMap,
    hyper: Hyper,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let model = AmcfModel::new(
        Hyper {
            lambda: config.lambda,
            ..hyper
        },
        catalog.clone(),
        users.clone(),
        items.clone(),
        &split.train,
        config.init_std,
        config.seed,
    )?;
    train_model(model, split, config, &mut |_, _| {})
}
