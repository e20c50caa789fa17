//! Stochastic primal-dual planning for discounted MDPs with linear features
//! and core state-action sets, together with exact small-scale oracles and
//! audits of the planner's guarantees.
//!
//! The modules build on each other:
//!
//! - [`mdp`]: finite MDPs, policies, exact evaluation and optimal values.
//! - [`features`]: feature maps, core sets, linear-MDP generators and
//!   approximation-error functionals.
//! - [`sampling`]: the generative model and seeded random streams.
//! - [`planner`]: the primal-dual planner and its step-size tuner.
//! - [`diagnostics`]: dense evaluation of Lagrangians, gradients, duality gaps,
//!   LP certificates and regret audits.

pub mod diagnostics;
pub mod error;
pub mod features;
pub mod linalg;
pub mod mdp;
pub mod planner;
pub mod sampling;

pub use error::{Error, Result};
pub use features::{CoreSet, FeatureMap, LinearInstance, LinearMdpWitness};
pub use mdp::{evaluate_policy, optimal_values, Mdp, Policy};
pub use planner::{run, tune_hyperparameters, PlannerConfig, RunOutput, RunTrace, SoftmaxPolicy};
pub use sampling::GenerativeModel;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/mdps.md")]
    mod mdps {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/planner.md")]
    mod planner {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
