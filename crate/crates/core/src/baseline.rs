//! Per-user linear regression on item aspects, the interpretable baseline.
//!
//! Each user gets their own `(w_i, c_i)` fitted by ridge least squares of
//! their training ratings on the rated items' multi-hot vectors. The intercept
//! is not penalized, so as the ridge grows `w_i -> 0` and `c_i` tends to the
//! user's mean rating.

use crate::data::{AspectCatalog, Interaction};
use crate::linalg::{self, LinalgError};
use crate::model::{PreferenceVector, Recommender};

/// Ridge applied when an unregularized per-user system is singular.
const SINGULAR_FALLBACK_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LrBaseline {
    weights: Vec<Vec<f64>>,
    intercepts: Vec<f64>,
    trained: Vec<bool>,
    ridge: f64,
    global_mean: f64,
    max_rating: f64,
    catalog: AspectCatalog,
}

impl LrBaseline {
    pub fn weights(&self, user: usize) -> &[f64] {
        &self.weights[user]
    }

    pub fn intercept(&self, user: usize) -> f64 {
        self.intercepts[user]
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn user_count(&self) -> usize {
        self.weights.len()
    }

    fn aspects_of(&self, item: usize) -> Vec<f64> {
        self.catalog
            .multi_hot_f64(item)
            .unwrap_or_else(|| vec![0.0; self.catalog.aspect_count()])
    }
}

/// Fits one ridge regression per user. Users without training ratings get
/// `w = 0` and `c = global mean`.
pub fn fit_lr_baseline(
    train: &[Interaction],
    catalog: &AspectCatalog,
    user_count: usize,
    ridge: f64,
    max_rating: f64,
) -> Result<LrBaseline, LinalgError> {
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(LinalgError::InvalidRidge(ridge));
    }
    let m = catalog.aspect_count();
    let global_mean = if train.is_empty() {
        0.0
    } else {
        train.iter().map(|x| x.rating).sum::<f64>() / train.len() as f64
    };
    let mut by_user: Vec<Vec<&Interaction>> = vec![Vec::new(); user_count];
    for x in train {
        by_user[x.user as usize].push(x);
    }
    let mut weights = vec![vec![0.0; m]; user_count];
    let mut intercepts = vec![global_mean; user_count];
    let mut trained = vec![false; user_count];
    for (user, rows) in by_user.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let count = rows.len() as f64;
        let mean_rating = rows.iter().map(|x| x.rating).sum::<f64>() / count;
        let mut aspect_counts = vec![0u32; m];
        for x in rows {
            for (acc, &s) in aspect_counts.iter_mut().zip(catalog.multi_hot(x.item as usize)) {
                *acc += u32::from(s);
            }
        }
        let mean_aspects: Vec<f64> = aspect_counts.iter().map(|&c| f64::from(c) / count).collect();
        // centered design columns and target; the intercept is recovered afterwards
        let columns: Vec<Vec<f64>> = (0..m)
            .map(|k| {
                rows.iter()
                    .map(|x| f64::from(catalog.multi_hot(x.item as usize)[k]) - mean_aspects[k])
                    .collect()
            })
            .collect();
        let target: Vec<f64> = rows.iter().map(|x| x.rating - mean_rating).collect();
        let cols: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
        let w = match linalg::least_squares_slices(&cols, &target, ridge) {
            Ok(w) => w,
            Err(LinalgError::SingularSystem { .. }) => {
                linalg::least_squares_slices(&cols, &target, ridge.max(SINGULAR_FALLBACK_RIDGE))?
            }
            Err(e) => return Err(e),
        };
        intercepts[user] = mean_rating - linalg::dot(&w, &mean_aspects);
        weights[user] = w;
        trained[user] = true;
    }
    Ok(LrBaseline {
        weights,
        intercepts,
        trained,
        ridge,
        global_mean,
        max_rating,
        catalog: catalog.clone(),
    })
}

impl Recommender for LrBaseline {
    fn predict(&self, user: usize, item: usize) -> f64 {
        if user >= self.weights.len() {
            return self.global_mean;
        }
        self.intercepts[user] + linalg::dot(&self.weights[user], &self.aspects_of(item))
    }

    fn max_rating(&self) -> f64 {
        self.max_rating
    }

    fn aspect_count(&self) -> usize {
        self.catalog.aspect_count()
    }

    /// The regression coefficients `w_i`.
    fn general_preference(&self, user: usize) -> PreferenceVector {
        match self.trained.get(user) {
            Some(true) => PreferenceVector::new(self.weights[user].clone()),
            _ => PreferenceVector::cold(self.catalog.aspect_count()),
        }
    }

    /// `w_i` masked by the item's aspects.
    fn specific_preference(&self, user: usize, item: usize) -> PreferenceVector {
        let general = self.general_preference(user);
        if general.is_cold() {
            return general;
        }
        let s = self.aspects_of(item);
        PreferenceVector::new(general.values().iter().zip(&s).map(|(w, s)| w * s).collect())
    }
}
