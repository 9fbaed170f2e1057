//! Trace-density language models.
//!
//! A trace-density model assigns each vocabulary word a `d×d` complex matrix
//! and scores a phrase by `q(x) = tr(P_L A P_R A*)`, where `A` is the product
//! of the phrase's matrices and `P_L`, `P_R` are boundary densities. Two
//! fixed-point constraints on the dictionary make `q` a consistent family of
//! joint distributions over phrases of every length:
//!
//! * right: `Σ M_i P_R M_i* = P_R` gives `Σ_{|x| = k} q(x) = 1`;
//! * left: `Σ M_i* P_L M_i = P_L` together with the right constraint makes
//!   shorter-phrase probabilities marginals of longer ones.
//!
//! Modules: [`corpus`] (ingestion and phrase statistics), [`model`]
//! (evaluation), [`channels`] (transfer maps, fixed points, projections,
//! gauge), [`training`] (constrained maximum likelihood), [`io`] (model and
//! report files).

pub mod channels;
pub mod corpus;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod training;

pub use channels::{
    apply_left_channel, apply_right_channel, gauge_transform, project_isometry,
    random_isometric_dictionary, solve_right_density, solve_right_density_from, FixedPointResult,
};
pub use corpus::{
    build_vocab, empirical_dist, extract_phrases, tokenize, Corpus, EmpiricalDist, IngestConfig,
    PhraseTable, Vocabulary,
};
pub use error::{Result, TdmError};
pub use model::{
    constraint_residuals, Density, Dictionary, LogLikelihood, Residuals, ScaledMatrix,
    ScaledValue, TraceDensityModel,
};
pub use training::{evaluate, nll_gradient, riemannian_step, train, EvalReport, TrainConfig, TrainReport};
