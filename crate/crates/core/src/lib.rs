//! Nuclear segmentation in H&E histology with fused encoder-decoder networks.
//!
//! The pipeline decomposes an RGB patch into stain concentrations, runs the
//! hematoxylin channel through a region network and a boundary network,
//! fuses their probability maps with a third network, and splits touching
//! nuclei with a marker-controlled watershed on the distance transform.

pub mod config;
pub mod data;
pub mod enet;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod nn;
pub mod nst;
pub mod optim;
pub mod post;
pub mod rng;
pub mod scalar;
pub mod stain;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{Dims, Tensor};
