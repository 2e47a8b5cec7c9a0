//! Training and adversarial evaluation of sparse boolean-feature malware
//! classifiers with non-negative weight defenses.
//!
//! The crate covers the whole pipeline: a planted-rule synthetic corpus
//! ([`dataset`]), a hand-written MLP with sigmoid and temperature-softmax
//! heads ([`network`]), N1/N2 penalties and hard non-negative projection
//! ([`constraints`]), SGD training and distillation ([`training`]), the
//! enable-only manifest-feature attack ([`attack`]) and metrics, grid
//! search and monotonicity certificates ([`evaluation`]).

pub mod attack;
pub mod constraints;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod training;

pub use attack::{craft, misclassification_rate, transfer_rate, AttackConfig, AttackResult, AttackSummary};
pub use constraints::{negative_mass, n1, n2, project_nonnegative, ConstraintConfig, HardScope, Placement};
pub use dataset::{generate_synthetic, Dataset, FeatureSpace, Label, Sample, SplitTag, SynthSpec};
pub use error::{Error, Result};
pub use evaluation::{certify_monotone, evaluate, fallback_predict, grid_search, CertifyScope, GridSpec, Metrics};
pub use network::{Architecture, HeadKind, InitMode, InitScheme, ModelParams};
pub use training::{train, train_distilled, DistillConfig, TrainConfig, TrainLog};
