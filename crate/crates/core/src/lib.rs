//! Caption generation from image description + article context, scored with
//! a from-scratch CIDEr implementation.

pub mod cider;
pub mod cli;
pub mod corpus;
pub mod evalrunner;
mod digest;
pub mod finetune;
pub mod genclient;
pub mod promptgen;
pub mod textnorm;

pub use digest::sha256_hex;
