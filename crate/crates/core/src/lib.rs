//! Weighted contrastive hashing on a from-scratch tensor engine.

pub mod ablation;
pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod grad_suite;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod mutual_attention;
pub mod optim;
pub mod params;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod weighted_labels;

pub use error::{Result, WchError};
pub use tensor::{Real, Tensor};
