//! The AMCF model: a biased matrix-factorization rating predictor whose item
//! embeddings are also reconstructed from a learned aspect basis by an
//! attention head.
//!
//! Rating prediction is `mu + b_user + b_item + q_user . u_item`. The aspect
//! rows `psi_k` are stored unnormalized and normalized wherever they are used.
//! Attention over an item's aspects produces weights `a` and the
//! reconstruction `v_hat = sum_k a_k psi_hat_k`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AspectCatalog, IdMap, Interaction};
use crate::linalg::{self, dot, norm};

/// Ridge used when unmasked aspect rows are (numerically) dependent in linear attention.
pub const LINEAR_FALLBACK_RIDGE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// `a = softmax(u^T W psi_hat_k / sqrt(n))` over the attended aspects.
    Softmax,
    /// `a = argmin ||sum_k a_k psi_hat_k - u||`, solved exactly.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Attend only to the item's declared aspects; all-zero items fall back to every aspect.
    Masked,
    Unmasked,
}

impl std::str::FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown attention mode {other:?} (expected softmax|linear)")),
        }
    }
}

impl std::str::FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "masked" => Ok(Self::Masked),
            "unmasked" => Ok(Self::Unmasked),
            other => Err(format!("unknown mask mode {other:?} (expected masked|unmasked)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Latent dimension `n`.
    pub dim: usize,
    /// Number of aspects `m`.
    pub aspects: usize,
    /// Weight of the interpretation loss.
    pub lambda: f64,
    pub mask_mode: MaskMode,
    pub attn_mode: AttentionMode,
    /// Keep the bilinear scorer fixed at the identity (plain scaled dot-product).
    pub freeze_attention: bool,
    /// Largest possible rating; predictions are clamped to `[1, max_rating]` when evaluated.
    pub max_rating: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            dim: 120,
            aspects: 18,
            lambda: 0.05,
            mask_mode: MaskMode::Masked,
            attn_mode: AttentionMode::Softmax,
            freeze_attention: false,
            max_rating: 5.0,
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * x`
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    /// `self^T * x`
    pub fn tmul_vec(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, xi) in x.iter().enumerate() {
            linalg::axpy(*xi, self.row(i), out);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Per-aspect preference weights, general or item-specific.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceVector {
    values: Vec<f64>,
    /// Set when the user or item had no training data and the vector is all zeros.
    cold: bool,
}

impl PreferenceVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, cold: false }
    }

    pub fn cold(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
            cold: true,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_cold(&self) -> bool {
        self.cold
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Scaled to unit l1 norm; an all-zero vector is returned unchanged.
    pub fn l1_normalized(&self) -> Vec<f64> {
        let l1: f64 = self.values.iter().map(|x| x.abs()).sum();
        if l1 == 0.0 {
            return self.values.clone();
        }
        self.values.iter().map(|x| x / l1).collect()
    }
}

/// Output of the attention head for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// Length `m`; exactly zero outside the attended set.
    pub weights: Vec<f64>,
    /// `sum_k weights[k] * psi_hat_k`, length `n`.
    pub reconstruction: Vec<f64>,
    /// Aspect indices the head attended to.
    pub attended: Vec<usize>,
    /// Linear mode only: the exact solve was singular and the ridge fallback was used.
    pub ridge_fallback: bool,
}

/// Anything that predicts ratings and explains them per aspect. Implemented
/// by [`AmcfModel`] and [`crate::baseline::LrBaseline`].
pub trait Recommender {
    /// Unclamped rating prediction.
    fn predict(&self, user: usize, item: usize) -> f64;

    fn max_rating(&self) -> f64;

    fn aspect_count(&self) -> usize;

    fn general_preference(&self, user: usize) -> PreferenceVector;

    fn specific_preference(&self, user: usize, item: usize) -> PreferenceVector;

    /// Prediction clamped to `[1, max_rating]`, as used for evaluation.
    fn predict_clamped(&self, user: usize, item: usize) -> f64 {
        self.predict(user, item).clamp(1.0, self.max_rating())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmcfModel {
    pub hyper: Hyper,
    /// `U x n`, rows `q_i`.
    pub user_emb: Matrix,
    /// `V x n`, rows `u_j`.
    pub item_emb: Matrix,
    /// `m x n`, rows `psi_k`, unnormalized.
    pub aspect_emb: Matrix,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    pub global_mean: f64,
    /// Bilinear attention scorer `W`, `n x n`.
    pub attn_bilinear: Matrix,
    pub user_seen: Vec<bool>,
    pub item_seen: Vec<bool>,
    pub catalog: AspectCatalog,
    pub users: IdMap,
    pub items: IdMap,
}

const CHECKPOINT_FORMAT: &str = "amcf-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: AmcfModel,
}

impl AmcfModel {
    /// Fresh model: embeddings i.i.d. `N(0, init_std^2)`, biases zero, `W = I`,
    /// `mu` the training mean. Entities absent from `train` are marked cold.
    pub fn new(
        hyper: Hyper,
        catalog: AspectCatalog,
        users: IdMap,
        items: IdMap,
        train: &[Interaction],
        init_std: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if hyper.dim == 0 {
            return Err(ModelError::InvalidHyper("dim must be positive".into()));
        }
        if hyper.aspects != catalog.aspect_count() {
            return Err(ModelError::InvalidHyper(format!(
                "model has {} aspects but the catalog has {}",
                hyper.aspects,
                catalog.aspect_count()
            )));
        }
        if catalog.item_count() != items.len() {
            return Err(ModelError::InvalidHyper(format!(
                "catalog covers {} items but the id map has {}",
                catalog.item_count(),
                items.len()
            )));
        }
        if !(init_std.is_finite() && init_std > 0.0) {
            return Err(ModelError::InvalidHyper(format!("init_std must be positive, got {init_std}")));
        }
        let n = hyper.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(crate::training::INIT_STREAM);
        let user_emb = Matrix::random_normal(users.len(), n, init_std, &mut rng);
        let item_emb = Matrix::random_normal(items.len(), n, init_std, &mut rng);
        let aspect_emb = Matrix::random_normal(hyper.aspects, n, init_std, &mut rng);
        let mut user_seen = vec![false; users.len()];
        let mut item_seen = vec![false; items.len()];
        let mut sum = 0.0;
        for x in train {
            user_seen[x.user as usize] = true;
            item_seen[x.item as usize] = true;
            sum += x.rating;
        }
        let global_mean = if train.is_empty() { 0.0 } else { sum / train.len() as f64 };
        Ok(Self {
            hyper,
            user_bias: vec![0.0; users.len()],
            item_bias: vec![0.0; items.len()],
            user_emb,
            item_emb,
            aspect_emb,
            global_mean,
            attn_bilinear: Matrix::identity(n),
            user_seen,
            item_seen,
            catalog,
            users,
            items,
        })
    }

    pub fn user_count(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn item_count(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn is_cold_user(&self, user: usize) -> bool {
        !self.user_seen.get(user).copied().unwrap_or(false)
    }

    pub fn is_cold_item(&self, item: usize) -> bool {
        !self.item_seen.get(item).copied().unwrap_or(false)
    }

    /// `mu + b_i + b_j + q_i . u_j`; a cold side contributes neither bias nor embedding.
    pub fn predict_rating(&self, user: usize, item: usize) -> f64 {
        let cold_user = self.is_cold_user(user);
        let cold_item = self.is_cold_item(item);
        let mut r = self.global_mean;
        if !cold_user {
            r += self.user_bias[user];
        }
        if !cold_item {
            r += self.item_bias[item];
        }
        if !cold_user && !cold_item {
            r += dot(self.user_emb.row(user), self.item_emb.row(item));
        }
        r
    }

    /// Unit-normalized aspect row `psi_hat_k`.
    pub fn unit_aspect(&self, k: usize) -> Vec<f64> {
        let row = self.aspect_emb.row(k);
        let len = norm(row);
        row.iter().map(|x| x / len).collect()
    }

    /// All unit-normalized aspect rows.
    pub fn unit_aspects(&self) -> Vec<Vec<f64>> {
        (0..self.hyper.aspects).map(|k| self.unit_aspect(k)).collect()
    }

    /// Aspects the head attends to for `item` under the configured mask mode.
    pub fn attended_aspects(&self, item: usize) -> Vec<usize> {
        let m = self.hyper.aspects;
        match self.hyper.mask_mode {
            MaskMode::Unmasked => (0..m).collect(),
            MaskMode::Masked => {
                let active = if item < self.catalog.item_count() {
                    self.catalog.active(item)
                } else {
                    Vec::new()
                };
                if active.is_empty() {
                    (0..m).collect()
                } else {
                    active
                }
            }
        }
    }

    /// Attention weights and reconstruction for `item`'s embedding.
    pub fn attend(&self, item: usize) -> AttentionResult {
        let unit = self.unit_aspects();
        self.attend_vector(item, self.item_emb.row(item), &unit)
    }

    /// Attends against an arbitrary embedding `u`, using `item` only for the mask.
    pub fn attend_vector(&self, item: usize, u: &[f64], unit: &[Vec<f64>]) -> AttentionResult {
        let attended = self.attended_aspects(item);
        let m = self.hyper.aspects;
        let n = self.hyper.dim;
        let mut weights = vec![0.0; m];
        let mut ridge_fallback = false;
        match self.hyper.attn_mode {
            AttentionMode::Softmax => {
                let mut wt_u = vec![0.0; n];
                self.attn_bilinear.tmul_vec(u, &mut wt_u);
                let scale = (n as f64).sqrt();
                let scores: Vec<f64> = attended.iter().map(|&k| dot(&wt_u, &unit[k]) / scale).collect();
                for (&k, a) in attended.iter().zip(softmax(&scores)) {
                    weights[k] = a;
                }
            }
            AttentionMode::Linear => {
                let cols: Vec<&[f64]> = attended.iter().map(|&k| unit[k].as_slice()).collect();
                let coeffs = match linalg::least_squares_slices(&cols, u, 0.0) {
                    Ok(c) => c,
                    Err(_) => {
                        ridge_fallback = true;
                        linalg::least_squares_slices(&cols, u, LINEAR_FALLBACK_RIDGE)
                            .expect("ridge system is positive definite")
                    }
                };
                for (&k, c) in attended.iter().zip(coeffs) {
                    weights[k] = c;
                }
            }
        }
        let mut reconstruction = vec![0.0; n];
        for &k in &attended {
            linalg::axpy(weights[k], &unit[k], &mut reconstruction);
        }
        AttentionResult {
            weights,
            reconstruction,
            attended,
            ridge_fallback,
        }
    }

    /// Debiased score of a pure-aspect virtual item: `q_i . psi_hat_k` for each `k`.
    pub fn general_preference(&self, user: usize) -> PreferenceVector {
        if self.is_cold_user(user) {
            return PreferenceVector::cold(self.hyper.aspects);
        }
        let q = self.user_emb.row(user);
        PreferenceVector::new((0..self.hyper.aspects).map(|k| dot(q, &self.unit_aspect(k))).collect())
    }

    /// Debiased score of virtual items `a_k psi_hat_k` built from `item`'s attention weights.
    pub fn specific_preference(&self, user: usize, item: usize) -> PreferenceVector {
        if self.is_cold_user(user) || self.is_cold_item(item) {
            return PreferenceVector::cold(self.hyper.aspects);
        }
        let general = self.general_preference(user);
        let attention = self.attend(item);
        PreferenceVector::new(
            attention
                .weights
                .iter()
                .zip(general.values())
                .map(|(a, p)| a * p)
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.is_finite()
            && self.item_emb.is_finite()
            && self.aspect_emb.is_finite()
            && self.attn_bilinear.is_finite()
            && self.user_bias.iter().chain(&self.item_bias).all(|x| x.is_finite())
            && self.global_mean.is_finite()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Malformed(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::Malformed(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let m = ckpt.model;
        let n = m.hyper.dim;
        let shapes_ok = m.user_emb.cols() == n
            && m.item_emb.cols() == n
            && m.aspect_emb.cols() == n
            && m.aspect_emb.rows() == m.hyper.aspects
            && m.attn_bilinear.rows() == n
            && m.attn_bilinear.cols() == n
            && m.user_bias.len() == m.user_emb.rows()
            && m.item_bias.len() == m.item_emb.rows()
            && m.users.len() == m.user_emb.rows()
            && m.items.len() == m.item_emb.rows()
            && m.catalog.item_count() == m.item_emb.rows()
            && m.user_seen.len() == m.user_emb.rows()
            && m.item_seen.len() == m.item_emb.rows();
        if !shapes_ok {
            return Err(ModelError::Malformed("parameter shapes are inconsistent".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

impl Recommender for AmcfModel {
    fn predict(&self, user: usize, item: usize) -> f64 {
        self.predict_rating(user, item)
    }

    fn max_rating(&self) -> f64 {
        self.hyper.max_rating
    }

    fn aspect_count(&self) -> usize {
        self.hyper.aspects
    }

    fn general_preference(&self, user: usize) -> PreferenceVector {
        AmcfModel::general_preference(self, user)
    }

    fn specific_preference(&self, user: usize, item: usize) -> PreferenceVector {
        AmcfModel::specific_preference(self, user, item)
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
