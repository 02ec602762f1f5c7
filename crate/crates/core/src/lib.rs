pub mod anchor;
pub mod bank;
pub mod block;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod instrument;
pub mod model;
pub mod numerics;
pub mod ranking;
pub mod sae;
pub mod tokenizer;
pub mod train;
pub mod user_interest;

pub use error::{Result, SarmError};
