//! Difficulty estimation for programming problems with two coupled
//! transformer encoders: one reads the problem statement, the other a
//! solution's source code. Each encoder carries a second classification token
//! whose attention query is, in every layer, the other encoder's CLS query.

pub mod error;
pub mod lexer;
pub mod corpus;
pub mod numerics;
pub mod encoder;
pub mod metrics;
pub mod model;
pub mod features;
pub mod training;

pub use error::{Error, Result};
