//! Attentive multitask collaborative filtering.
//!
//! A biased matrix-factorization recommender whose item embeddings are also
//! reconstructed, through attention, from embeddings of interpretable item
//! aspects (genres). The attention weights and the aspect embeddings turn the
//! latent model into per-aspect user preferences that can be scored against a
//! surrogate ground truth.
//!
//! ```
//! use amcf::linalg::{project_onto_span, Basis, DenseVector};
//!
//! let basis = Basis::from_rows(&[&[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0]]).unwrap();
//! let p = project_onto_span(&DenseVector::from_slice(&[2.0, 3.0, 4.0]).unwrap(), &basis).unwrap();
//! assert_eq!(p.residual.as_slice(), &[0.0, 0.0, 4.0]);
//! ```

pub mod baseline;
pub mod data;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod training;

pub use baseline::{fit_lr_baseline, LrBaseline};
pub use data::{AspectCatalog, DatasetSplit, IdMap, Interaction, RatingData, SplitFractions};
pub use eval::{EvalReport, RankMode, SurrogateTruth};
pub use model::{AmcfModel, AttentionMode, Hyper, MaskMode, PreferenceVector, Recommender};
pub use training::{train, train_model, LossBreakdown, TrainConfig, TrainError, TrainOutcome};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/projection.md")]
    mod projection {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
