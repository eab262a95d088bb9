#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod kernels;
pub mod matrix;
pub mod random_field;
pub mod darcy;
pub mod optim;
pub mod gp;
pub mod gradcheck;
pub mod gplvm;
pub mod deepgp;
pub mod dataset;
pub mod uq;
pub mod model_io;
