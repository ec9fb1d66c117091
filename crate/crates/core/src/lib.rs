//! Dirichlet regression for compositional data.
//!
//! The crate provides the Dirichlet distribution itself, a Bayesian
//! penalized-likelihood regression model with a Metropolis-within-Gibbs
//! sampler, a maximum-likelihood multivariate-logit baseline, compositional
//! fit metrics, and a harness for replicated simulation studies.

pub mod dataset;
pub mod dirichlet;
pub mod error;
pub mod io;
pub mod links;
pub mod linalg;
pub mod metrics;
pub mod ml;
pub mod model;
pub mod netball;
pub mod optim;
pub mod plotdata;
pub mod reference;
pub mod sampler;
pub mod seeding;
pub mod simstudy;
pub mod special;

pub use dataset::{CompositionDataset, Coding, Design, Term};
pub use dirichlet::{Composition, DirichletParams, MomentSummary};
pub use error::{Error, Result};
pub use model::{CoefficientSet, LatentState, ModelConfig};
