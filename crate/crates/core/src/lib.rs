//! Entire-chain uplift modeling toolkit.
//!
//! Implements chain outcome modeling (CTR / CTCVR) with treatment-enhanced
//! feature adaptation and task-prior gating, trained over the entire
//! impression space, together with ranking-based uplift evaluation
//! (AUUC / Qini), segment uplift analysis, and a synthetic randomized-trial
//! generator with analytically known treatment effects.

pub mod checkpoint;
pub mod data;
pub mod ecenet;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod report;
pub mod optim;
pub mod params;
pub mod schema;
pub mod synth;
pub mod tape;
pub mod tenet;
pub mod tensor;
pub mod train;

pub use data::{dataset_stats, load_csv, segment_uplift, split, Dataset, Instance, StatsTable};
pub use ecenet::{
    counterfactual_profiles, predict_ite, predict_ite_batch, predict_probs, predict_probs_batch,
    ChainPrediction, CounterfactualProfile, IteEstimate,
};
pub use error::{EcupError, Result};
pub use model::{EcupModel, ModelConfig, Variant};
pub use params::ParamStore;
pub use schema::{FeatureSchema, FieldRole, FieldSpec};
pub use report::{evaluate, Evaluation, UpliftReport};
pub use synth::{generate_synthetic, GroundTruth, Preset, SyntheticSpec};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainHistory};
