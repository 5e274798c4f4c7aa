//! Unsupervised adaptation of a detection head from an embodied agent's
//! detection stream: temporal instance clustering, refined pseudo-labels,
//! mean-teacher training with contrastive and KL terms, plus a synthetic
//! scenario generator and evaluation protocols.

pub mod adapt;
pub mod assoc;
pub mod cluster;
pub mod detstream;
pub mod numeric;
pub mod eval;
pub mod simenv;
