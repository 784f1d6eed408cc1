//! GS-Net layers, model, training and gradient checking.

pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod model;
pub mod nonlocal;
pub mod ops;
pub mod optim;
pub mod refine;
pub mod train;
