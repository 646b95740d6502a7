//! Filter-scaled sparse federated learning: local training, differential
//! update compression and federated averaging on a small CPU autograd engine.

pub mod codec;
pub mod data;
pub mod harness;
pub mod model;
pub mod protocol;
pub mod schedule;
pub mod sparsify;
pub mod tensor;
