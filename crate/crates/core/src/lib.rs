//! Alternating least squares for matrix completion, with core-elements
//! sketching of the per-row regressions, row-subsampling baselines,
//! synthetic benchmark data, ranking metrics and image restoration.

pub mod als;
pub mod baselines;
pub mod ces;
pub mod cli;
pub mod config;
pub mod core_als;
pub mod diagnostics;
pub mod error;
pub mod factors;
pub mod imaging;
pub mod linalg;
pub mod metrics;
pub mod ratings;
pub mod report;
pub mod synth;

pub use als::{fit, objective, update_item_full, update_user_full};
pub use baselines::{fit_sampled, leverage_scores, sample_leverage, sample_uniform, update_row_sampled, RowSample};
pub use ces::{ces_sketch, SparseSketch};
pub use config::{InitScheme, Method, SolverConfig};
pub use core_als::{fit_core, fit_fast_core, update_item_core, update_user_core};
pub use diagnostics::{compute_diagnostics, DiagnosticsRecord, Side};
pub use error::{Error, Result};
pub use factors::FactorPair;
pub use imaging::{mask_image, psnr, restore, GrayImage, RestoreConfig};
pub use metrics::{hit_at_k, ndcg_at_k, prmse, rmse, EvalResult, TestSets};
pub use ratings::{split_holdout, HoldoutSplit, RatingMatrix};
pub use report::{FitReport, Timings};
pub use synth::{generate_rating_matrix, FactorDist, SyntheticConfig, SyntheticData};
