#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod data;
pub mod eval;
pub mod inference;
pub mod model;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod trainer;
