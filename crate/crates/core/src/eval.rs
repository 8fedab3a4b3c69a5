//! Rating accuracy and explanation quality.
//!
//! Explanation metrics compare a model's per-aspect preference vectors with a
//! surrogate truth built from debiased training ratings. For each user `i`
//! and rated item `j`:
//!
//! ```text
//! w_ij = (r_ij - b^u_i - b^v_j - r_bar) / A
//! p_i  = sum_j w_ij s_j,   then divided by ||p_i||_1
//! ```
//!
//! where `b^u_i` and `b^v_j` are the user's and item's mean offsets from the
//! global training mean `r_bar`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AspectCatalog, Interaction};
use crate::linalg::{cosine, norm, ZERO_NORM_TOL};
use crate::model::Recommender;

/// `(M, K)` pairs reported by default.
pub const DEFAULT_PAIRS: [(usize, usize); 2] = [(1, 3), (3, 5)];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("invalid recall arguments: need 1 <= M ({m}) <= K ({k}) <= aspects ({aspects})")]
    InvalidArgs { m: usize, k: usize, aspects: usize },
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    Top,
    Bottom,
}

/// Per-user aspect preferences reconstructed from training ratings.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateTruth {
    prefs: Vec<Vec<f64>>,
    degenerate: Vec<bool>,
    catalog: AspectCatalog,
}

impl SurrogateTruth {
    /// l1-normalizes raw vectors; rows with (numerically) zero mass are flagged degenerate.
    pub fn from_vectors(raw: Vec<Vec<f64>>, catalog: AspectCatalog) -> Self {
        let mut degenerate = Vec::with_capacity(raw.len());
        let prefs = raw
            .into_iter()
            .map(|p| {
                let mass: f64 = p.iter().map(|x| x.abs()).sum();
                let zero = mass < ZERO_NORM_TOL;
                degenerate.push(zero);
                if zero {
                    vec![0.0; p.len()]
                } else {
                    p.into_iter().map(|x| x / mass).collect()
                }
            })
            .collect();
        Self {
            prefs,
            degenerate,
            catalog,
        }
    }

    pub fn user_count(&self) -> usize {
        self.prefs.len()
    }

    pub fn is_degenerate(&self, user: usize) -> bool {
        self.degenerate.get(user).copied().unwrap_or(true)
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }

    /// `p_i`, or `None` for degenerate and unknown users.
    pub fn general(&self, user: usize) -> Option<&[f64]> {
        (!self.is_degenerate(user)).then(|| self.prefs[user].as_slice())
    }

    /// `p_i * s_j`, or `None` when it is zero under the cosine's zero-norm rule.
    pub fn specific(&self, user: usize, item: usize) -> Option<Vec<f64>> {
        let p = self.general(user)?;
        let s = self.catalog.multi_hot_f64(item)?;
        let out: Vec<f64> = p.iter().zip(&s).map(|(p, s)| p * s).collect();
        (norm(&out) >= ZERO_NORM_TOL).then_some(out)
    }
}

/// Surrogate truth over `user_count` users from the training ratings.
pub fn surrogate_truth(train: &[Interaction], catalog: &AspectCatalog, user_count: usize, max_rating: f64) -> SurrogateTruth {
    let m = catalog.aspect_count();
    let items = catalog.item_count();
    if train.is_empty() {
        return SurrogateTruth::from_vectors(vec![vec![0.0; m]; user_count], catalog.clone());
    }
    let r_bar = train.iter().map(|x| x.rating).sum::<f64>() / train.len() as f64;
    let mut user_sum = vec![0.0; user_count];
    let mut user_n = vec![0usize; user_count];
    let mut item_sum = vec![0.0; items];
    let mut item_n = vec![0usize; items];
    for x in train {
        user_sum[x.user as usize] += x.rating;
        user_n[x.user as usize] += 1;
        item_sum[x.item as usize] += x.rating;
        item_n[x.item as usize] += 1;
    }
    let offset = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 - r_bar };
    let mut raw = vec![vec![0.0; m]; user_count];
    for x in train {
        let (u, j) = (x.user as usize, x.item as usize);
        let w = (x.rating - offset(user_sum[u], user_n[u]) - offset(item_sum[j], item_n[j]) - r_bar) / max_rating;
        for (acc, &s) in raw[u].iter_mut().zip(catalog.multi_hot(j)) {
            if s != 0 {
                *acc += w;
            }
        }
    }
    SurrogateTruth::from_vectors(raw, catalog.clone())
}

fn ranking(values: &[f64], mode: RankMode) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let primary = match mode {
            RankMode::Top => values[b].partial_cmp(&values[a]),
            RankMode::Bottom => values[a].partial_cmp(&values[b]),
        };
        primary.unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    idx
}

/// Fraction of the `m_top` extreme truth aspects found among the `k` extreme predicted ones.
pub fn top_bottom_recall(truth: &[f64], pred: &[f64], m_top: usize, k: usize, mode: RankMode) -> Result<f64, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::LengthMismatch(truth.len(), pred.len()));
    }
    if m_top == 0 || m_top > k || k > truth.len() {
        return Err(EvalError::InvalidArgs {
            m: m_top,
            k,
            aspects: truth.len(),
        });
    }
    let want = &ranking(truth, mode)[..m_top];
    let got = &ranking(pred, mode)[..k];
    let hits = want.iter().filter(|a| got.contains(a)).count();
    Ok(hits as f64 / m_top as f64)
}

/// A recall metric averaged over users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallSummary {
    pub value: f64,
    pub users: usize,
    /// Users with fewer than `M` nonzero truth entries, a cold prediction, or degenerate truth.
    pub excluded: usize,
}

/// Mean recall of `model`'s general preferences over all users of `truth`.
pub fn general_recall(
    truth: &SurrogateTruth,
    model: &dyn Recommender,
    m_top: usize,
    k: usize,
    mode: RankMode,
) -> Result<RecallSummary, EvalError> {
    let aspects = model.aspect_count();
    if m_top == 0 || m_top > k || k > aspects {
        return Err(EvalError::InvalidArgs { m: m_top, k, aspects });
    }
    let mut sum = 0.0;
    let mut users = 0;
    let mut excluded = 0;
    for user in 0..truth.user_count() {
        let Some(t) = truth.general(user) else {
            excluded += 1;
            continue;
        };
        let pred = model.general_preference(user);
        if pred.is_cold() || t.iter().filter(|&&x| x != 0.0).count() < m_top {
            excluded += 1;
            continue;
        }
        sum += top_bottom_recall(t, pred.values(), m_top, k, mode)?;
        users += 1;
    }
    let value = if users == 0 { 0.0 } else { sum / users as f64 };
    Ok(RecallSummary { value, users, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecificScore {
    pub value: f64,
    pub pairs: usize,
    /// Pairs with all-zero truth or a cold prediction.
    pub skipped: usize,
}

/// Mean cosine between `p_i * s_j` and the model's specific preference over `pairs`.
pub fn specific_score(truth: &SurrogateTruth, model: &dyn Recommender, pairs: &[(usize, usize)]) -> SpecificScore {
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for &(user, item) in pairs {
        let Some(t) = truth.specific(user, item) else {
            skipped += 1;
            continue;
        };
        let pred = model.specific_preference(user, item);
        if pred.is_cold() {
            skipped += 1;
            continue;
        }
        sum += cosine(&t, pred.values());
        used += 1;
    }
    SpecificScore {
        value: if used == 0 { 0.0 } else { sum / used as f64 },
        pairs: used,
        skipped,
    }
}

/// RMSE of clamped predictions. Panics on an empty test set.
pub fn rmse(model: &dyn Recommender, test: &[Interaction]) -> f64 {
    assert!(!test.is_empty(), "rmse of an empty test set");
    let sq: f64 = test
        .iter()
        .map(|x| (model.predict_clamped(x.user as usize, x.item as usize) - x.rating).powi(2))
        .sum();
    (sq / test.len() as f64).sqrt()
}

/// Expected recall of a uniformly random ranking: `K / m`.
pub fn random_recall(k: usize, aspects: usize) -> f64 {
    k as f64 / aspects as f64
}

/// Monte Carlo recall of random rankings against a fixed truth ranking.
pub fn simulate_random_recall(aspects: usize, m_top: usize, k: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..aspects).map(|a| (aspects - a) as f64).collect();
    let mut pred: Vec<f64> = truth.clone();
    let mut total = 0.0;
    for _ in 0..trials {
        pred.shuffle(&mut rng);
        total += top_bottom_recall(&truth, &pred, m_top, k, RankMode::Top).expect("valid arguments");
    }
    total / trials as f64
}

/// Mean cosine between two models' general preferences over users both can score.
pub fn preference_agreement(a: &dyn Recommender, b: &dyn Recommender, users: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for user in 0..users {
        let (pa, pb) = (a.general_preference(user), b.general_preference(user));
        if pa.is_cold() || pb.is_cold() {
            continue;
        }
        sum += cosine(pa.values(), pb.values());
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `T1@3`, `B3@5`, ...
pub fn metric_key(mode: RankMode, m_top: usize, k: usize) -> String {
    let prefix = match mode {
        RankMode::Top => 'T',
        RankMode::Bottom => 'B',
    };
    format!("{prefix}{m_top}@{k}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    /// Absent for the analytic random row.
    pub rmse: Option<f64>,
    pub tmk: BTreeMap<String, f64>,
    pub bmk: BTreeMap<String, f64>,
    pub score_s: f64,
    /// Users excluded per recall metric.
    pub excluded_users: BTreeMap<String, usize>,
    pub skipped_pairs: usize,
    pub degenerate_users: usize,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Evaluates `model` on the test split against `truth`.
    pub fn evaluate(
        label: &str,
        model: &dyn Recommender,
        truth: &SurrogateTruth,
        test: &[Interaction],
        pairs: &[(usize, usize)],
        config: serde_json::Value,
    ) -> Result<Self, EvalError> {
        let mut tmk = BTreeMap::new();
        let mut bmk = BTreeMap::new();
        let mut excluded_users = BTreeMap::new();
        for &(m_top, k) in pairs {
            for (mode, map) in [(RankMode::Top, &mut tmk), (RankMode::Bottom, &mut bmk)] {
                let r = general_recall(truth, model, m_top, k, mode)?;
                let key = metric_key(mode, m_top, k);
                excluded_users.insert(key.clone(), r.excluded);
                map.insert(key, r.value);
            }
        }
        let test_pairs: Vec<(usize, usize)> = test.iter().map(|x| (x.user as usize, x.item as usize)).collect();
        let score = specific_score(truth, model, &test_pairs);
        Ok(Self {
            model: label.to_string(),
            rmse: (!test.is_empty()).then(|| rmse(model, test)),
            tmk,
            bmk,
            score_s: score.value,
            excluded_users,
            skipped_pairs: score.skipped,
            degenerate_users: truth.degenerate_count(),
            config,
        })
    }

    /// Analytic random-ranking row.
    pub fn random(aspects: usize, pairs: &[(usize, usize)], config: serde_json::Value) -> Self {
        let mut tmk = BTreeMap::new();
        let mut bmk = BTreeMap::new();
        for &(m_top, k) in pairs {
            tmk.insert(metric_key(RankMode::Top, m_top, k), random_recall(k, aspects));
            bmk.insert(metric_key(RankMode::Bottom, m_top, k), random_recall(k, aspects));
        }
        Self {
            model: "random".to_string(),
            rmse: None,
            tmk,
            bmk,
            score_s: 0.0,
            excluded_users: BTreeMap::new(),
            skipped_pairs: 0,
            degenerate_users: 0,
            config,
        }
    }

    /// Recall by key, looking in both maps.
    pub fn recall(&self, key: &str) -> Option<f64> {
        self.tmk.get(key).or_else(|| self.bmk.get(key)).copied()
    }

    /// Column names for [`EvalReport::csv_row`] under the given `(M, K)` pairs.
    pub fn csv_header(pairs: &[(usize, usize)]) -> Vec<String> {
        let mut out = vec!["model".to_string(), "rmse".to_string()];
        for &(m_top, k) in pairs {
            out.push(metric_key(RankMode::Top, m_top, k));
            out.push(metric_key(RankMode::Bottom, m_top, k));
        }
        out.extend(["score_s", "skipped_pairs", "degenerate_users"].map(String::from));
        out
    }

    pub fn csv_row(&self, pairs: &[(usize, usize)]) -> Vec<String> {
        let mut out = vec![self.model.clone(), self.rmse.map(|v| v.to_string()).unwrap_or_default()];
        for &(m_top, k) in pairs {
            for mode in [RankMode::Top, RankMode::Bottom] {
                let key = metric_key(mode, m_top, k);
                out.push(self.recall(&key).map(|v| v.to_string()).unwrap_or_default());
            }
        }
        out.push(self.score_s.to_string());
        out.push(self.skipped_pairs.to_string());
        out.push(self.degenerate_users.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PreferenceVector;

    fn x(user: u32, item: u32, rating: f64) -> Interaction {
        Interaction {
            user,
            item,
            rating,
            timestamp: 0,
        }
    }

    fn two_genre_catalog() -> AspectCatalog {
        AspectCatalog::new(vec!["g1".into(), "g2".into()], vec![vec![1, 0], vec![0, 1]])
    }

    struct Fixed {
        general: Vec<Vec<f64>>,
        specific: Option<Vec<f64>>,
    }

    impl Recommender for Fixed {
        fn predict(&self, _: usize, _: usize) -> f64 {
            3.0
        }
        fn max_rating(&self) -> f64 {
            5.0
        }
        fn aspect_count(&self) -> usize {
            self.general[0].len()
        }
        fn general_preference(&self, user: usize) -> PreferenceVector {
            PreferenceVector::new(self.general[user].clone())
        }
        fn specific_preference(&self, user: usize, _: usize) -> PreferenceVector {
            PreferenceVector::new(self.specific.clone().unwrap_or_else(|| self.general[user].clone()))
        }
    }

    #[test]
    fn toy_surrogate_truth() {
        let train = vec![x(0, 0, 5.0), x(0, 1, 1.0), x(1, 0, 3.0), x(1, 1, 3.0)];
        let truth = surrogate_truth(&train, &two_genre_catalog(), 2, 5.0);
        // r_bar = 3, user offsets 0, item offsets +1 / -1; w = (0.2, -0.2) for U1
        assert_eq!(truth.general(0).unwrap(), &[0.5, -0.5]);
        // U2: w = (3-0-1-3)/5 = -0.2 on item A, +0.2 on item B
        assert_eq!(truth.general(1).unwrap(), &[-0.5, 0.5]);
    }

    #[test]
    fn perfectly_debiased_user_is_degenerate() {
        let train = vec![x(0, 0, 3.0), x(0, 1, 3.0)];
        let truth = surrogate_truth(&train, &two_genre_catalog(), 1, 5.0);
        assert!(truth.is_degenerate(0));
        assert_eq!(truth.general(0), None);
        assert_eq!(truth.degenerate_count(), 1);
    }

    #[test]
    fn rating_scale_cancels() {
        let train = vec![x(0, 0, 5.0), x(0, 1, 2.0), x(1, 0, 4.0), x(1, 1, 1.0), x(1, 0, 2.0)];
        let a = surrogate_truth(&train, &two_genre_catalog(), 2, 5.0);
        let b = surrogate_truth(&train, &two_genre_catalog(), 2, 10.0);
        assert_eq!(a, b);
    }

    #[test]
    fn worked_recall_example() {
        // Action, Adventure, Children's, Comedy, Crime, Drama, Thriller, Western
        let truth = [0.0, 0.9, 0.0, 0.0, 0.0, 0.5, 0.4, 0.1];
        let pred = [0.0, 0.9, 0.6, 0.7, 0.5, 0.8, 0.0, 0.0];
        let t35 = top_bottom_recall(&truth, &pred, 3, 5, RankMode::Top).unwrap();
        assert!((t35 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(top_bottom_recall(&truth, &pred, 1, 3, RankMode::Top).unwrap(), 1.0);
    }

    #[test]
    fn perfect_prediction_recalls_everything() {
        let v = [0.3, -0.1, 0.25, -0.2, 0.15];
        for k in 1..=5 {
            for m in 1..=k {
                for mode in [RankMode::Top, RankMode::Bottom] {
                    assert_eq!(top_bottom_recall(&v, &v, m, k, mode).unwrap(), 1.0);
                }
            }
        }
    }

    #[test]
    fn recall_rejects_bad_arguments() {
        let v = [1.0, 2.0, 3.0];
        assert_eq!(
            top_bottom_recall(&v, &v, 3, 2, RankMode::Top),
            Err(EvalError::InvalidArgs { m: 3, k: 2, aspects: 3 })
        );
        assert!(top_bottom_recall(&v, &v, 1, 4, RankMode::Top).is_err());
        assert!(top_bottom_recall(&v, &v, 0, 1, RankMode::Top).is_err());
    }

    #[test]
    fn ties_break_by_index() {
        let flat = [0.0; 4];
        let truth = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(top_bottom_recall(&truth, &flat, 2, 2, RankMode::Top).unwrap(), 1.0);
        assert_eq!(top_bottom_recall(&truth, &flat, 2, 2, RankMode::Bottom).unwrap(), 0.0);
    }

    #[test]
    fn random_baseline_values() {
        assert!((random_recall(3, 18) - 0.167).abs() < 5e-4);
        assert!((random_recall(5, 18) - 0.278).abs() < 5e-4);
        assert!((random_recall(3, 29) - 0.103).abs() < 5e-4);
        assert!((random_recall(5, 29) - 0.172).abs() < 5e-4);
    }

    #[test]
    fn rmse_examples() {
        let model = Fixed { general: vec![vec![0.0]], specific: None };
        assert_eq!(rmse(&model, &[x(0, 0, 3.0), x(0, 1, 3.0)]), 0.0);
        assert_eq!(rmse(&model, &[x(0, 0, 4.0), x(0, 1, 2.0)]), 1.0);
    }

    #[test]
    fn specific_score_parallel_and_orthogonal() {
        let cat = AspectCatalog::new(vec!["a".into(), "b".into(), "c".into()], vec![vec![1, 1, 0], vec![0, 0, 1]]);
        let truth = SurrogateTruth::from_vectors(vec![vec![0.5, -0.25, 0.25]], cat);
        let parallel = Fixed { general: vec![vec![0.0; 3]], specific: Some(vec![1.0, -0.5, 0.0]) };
        let s = specific_score(&truth, &parallel, &[(0, 0)]);
        assert!((s.value - 1.0).abs() < 1e-12 && s.pairs == 1);
        let orth = Fixed { general: vec![vec![0.0; 3]], specific: Some(vec![1.0, 2.0, 0.0]) };
        assert!(specific_score(&truth, &orth, &[(0, 0)]).value.abs() < 1e-12);
    }

    #[test]
    fn zero_truth_pairs_are_skipped() {
        let cat = AspectCatalog::new(vec!["a".into(), "b".into()], vec![vec![1, 0], vec![0, 0]]);
        let truth = SurrogateTruth::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 0.0]], cat);
        let model = Fixed { general: vec![vec![1.0, 0.0]; 2], specific: None };
        let s = specific_score(&truth, &model, &[(0, 0), (0, 1), (1, 0)]);
        assert_eq!((s.pairs, s.skipped), (1, 2));
    }

    #[test]
    fn random_row_and_csv() {
        let r = EvalReport::random(18, &DEFAULT_PAIRS, serde_json::json!({}));
        assert_eq!(r.recall("T1@3"), Some(3.0 / 18.0));
        assert_eq!(r.recall("B3@5"), Some(5.0 / 18.0));
        let header = EvalReport::csv_header(&DEFAULT_PAIRS);
        assert_eq!(header.join(","), "model,rmse,T1@3,B1@3,T3@5,B3@5,score_s,skipped_pairs,degenerate_users");
        assert_eq!(r.csv_row(&DEFAULT_PAIRS).len(), header.len());
    }
}
