//! Safe lifelong policy-gradient learning.
//!
//! Tasks share a latent basis `L`; each task's policy parameters are
//! `alpha_t = L s_t`. Every round the learner rolls out the sampled task,
//! updates `(L, S)` in closed form (or by policy-gradient steps), and
//! projects the result onto the set of parameters satisfying each task's
//! safety polytope and a spectral box on `L^T L`.

pub mod barrier;
pub mod dynamics;
pub mod error;
pub mod lifelong;
pub mod linalg;
pub mod policy;
pub mod projection;
pub mod regret;
pub mod harness;

pub use dynamics::{Domain, SystemParams, TaskSpec, Trajectory};
pub use error::{Error, Result};
pub use lifelong::{KnowledgeBase, RoundHistory, ThetaKind, ThetaVector, UpdateMode};
pub use policy::{BaseLearner, FeatureMap, GaussianPolicy, PgGradient};
pub use projection::{ProjectionParams, SafetyConstraint, SlackVars, SpectralBox};
