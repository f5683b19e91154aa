#![no_std]
extern crate alloc;

pub mod autodiff;
pub mod backbone;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod grounding;
pub mod harness;
pub mod intervention;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rationalizer;
pub mod rng;
pub mod synthgen;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Matrix;
