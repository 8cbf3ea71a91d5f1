//! Contextual queueing bandits with multinomial-logit feedback.
//!
//! A single queue of jobs, each carrying a context vector, is served one job
//! per round by an assortment of `K` out of `N` servers. The user either
//! accepts one of the offered servers (the job departs) or takes the outside
//! option (the job is retried). Acceptance follows an MNL choice model whose
//! parameters the agent learns online.
//!
//! Modules:
//! - [`mnl`]: choice probabilities, departure rates, the coupled choice sampler.
//! - [`env`]: instances, queue state, round dynamics.
//! - [`estimator`]: regularized MLE, design matrices, Thompson samples.
//! - [`policy`]: ACQB (shared and disjoint) and the baselines.
//! - [`sim`]: coupled agent/optimal runs over shared randomness.
//! - [`metrics`]: regret bookkeeping, multi-run aggregation, CSV output.
//! - [`contrastive`]: utility-aligned projection head trained with InfoNCE.

pub mod contrastive;
pub mod env;
pub mod error;
pub mod estimator;
pub mod metrics;
pub mod mnl;
pub mod policy;
pub mod rng;
pub mod sim;

pub use env::{Job, MnlInstance, QueueState, StepOutcome, TrueModel};
pub use error::{Error, Result};
pub use metrics::{AggregateSeries, RoundRecord};
pub use mnl::{Assortment, ChoiceDistribution, Utilities};
pub use policy::{Policy, PolicyDecision, PolicyKind, PolicyParams, Query};
pub use rng::{RoundRandomness, RunStreams};
pub use sim::coupled_run;
