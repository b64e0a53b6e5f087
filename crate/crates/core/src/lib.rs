//! Deterministic UAV racing simulator with an end-to-end imitation-learning
//! pipeline: track compilation, flight dynamics, first-person rendering,
//! flight logs, viewpoint augmentation, a convolutional control regressor,
//! closed-loop evaluation and a binary network protocol.

pub mod augment;
pub mod bundled;
pub mod dynamics;
pub mod evalharness;
pub mod flightlog;
pub mod net;
pub mod pipeline;
pub mod render;
pub mod track;
pub mod wire;
