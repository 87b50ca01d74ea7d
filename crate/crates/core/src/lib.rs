//! Interaction priors, attention integration and kinematic action-space layers
//! for multi-agent trajectory prediction, with feasibility and accuracy tooling.

pub mod attention;
pub mod geom;
pub mod kinematics;
pub mod priors;
pub mod scene;
pub mod feasibility;
pub mod metrics;
pub mod reproduction;
