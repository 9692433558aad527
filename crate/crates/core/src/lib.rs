//! Hyperbolic compositional embeddings.
//!
//! Lorentz-model geometry, entailment cones, the hierarchical compositional
//! contrastive and entailment losses, a small reverse-mode training engine,
//! hierarchical evaluation, geodesic interpolation and a synthetic data
//! generator with a known concept tree.
//!
//! Numerical code is generic over the scalar type ([`scalar::Real`]); the
//! aliases below fix it to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cones;
pub mod data;
pub mod error;
pub mod geo;
pub mod hiereval;
pub mod histogram;
pub mod losses;
pub mod manifold;
pub mod net;
pub mod scalar;
pub mod seed;
pub mod trainer;

pub use cones::{entailment_penalty, exterior_angle, half_aperture, ApertureParams};
pub use data::{generate_synthetic, SynthSpec, SyntheticWorld};
pub use error::{Error, Result};
pub use geo::{interpolate, root_point, traverse, Dedup, PathOptions, TraversalStep};
pub use hiereval::{MetricReport, TaxonomyGraph};
pub use losses::{hc_loss, hcc_loss, hce_loss, LossTerm};
pub use manifold::{exp_map, geodesic_distance, log_map, project_to_manifold};
pub use scalar::Real;
pub use trainer::{KappaMode, TrainConfig};

pub type Curvature = manifold::Curvature<f64>;
pub type HyperPoint = manifold::HyperPoint<f64>;
pub type TangentVector = manifold::TangentVector<f64>;
pub type Quadruple = data::Quadruple<f64>;
pub type Dataset = data::Dataset<f64>;
pub type EmbeddedBatch = losses::EmbeddedBatch<f64>;
pub type LossConfig = losses::LossConfig<f64>;
pub type LossWeights = losses::LossWeights<f64>;
pub type ModelState = trainer::ModelState<f64>;
