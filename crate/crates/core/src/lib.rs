//! Graph-based offline reinforcement learning on patient trajectories.
//!
//! The pipeline turns each trajectory into a dynamic heterogeneous graph,
//! learns state encoders (an MLP baseline and SAGE / GATv2 style GNNs) by
//! next-observation prediction, trains a discrete batch-constrained
//! Q-learning policy on the encoded states, and scores policies with
//! weighted importance sampling.

pub mod cohort;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod par;
pub mod policy;
pub mod training;
pub mod trajgraph;

pub use error::{Error, Result};
