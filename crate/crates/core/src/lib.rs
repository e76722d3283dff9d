pub mod attention;
pub mod error;
pub mod harness;
pub mod init;
pub mod lab;
pub mod layers;
pub mod linalg;
pub mod network;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, ExtendedReal, NormKind, Vector};
