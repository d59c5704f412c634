// `!(x > 0.0)` is how the validators reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cavity;
pub mod channel;
pub mod ensemble;
pub mod error;
pub mod qstate;
pub mod repeater;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
pub use rng::RngStream;
