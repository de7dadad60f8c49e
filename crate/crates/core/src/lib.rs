//! Lorentz-model hyperbolic geometry, mixed Euclidean/hyperbolic
//! similarity with its contrastive objective, referential decoupling,
//! anchor grounding and generalized grounding metrics.

pub mod checks;
pub mod contrastive;
pub mod decoupling;
pub mod error;
pub mod estimator;
pub mod grounding;
pub mod hemix;
pub mod io;
pub mod lorentz;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
pub use hemix::{FeatureVector, MixParams, ProjectionBundle};
pub use lorentz::{CurvedPoint, TangentVector};
