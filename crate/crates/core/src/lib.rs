// SPDX-License-Identifier: MIT OR Apache-2.0

//! A desk-scale laboratory for selective latent steering against object
//! hallucination in a toy vision-language model.

pub mod analyze;
pub mod artifact;
pub mod degrade;
pub mod error;
pub mod model;
pub mod perturb;
pub mod pipeline;
pub mod steer;
pub mod supervision;
pub mod tensor;
pub mod world;

pub use error::{MesaError, Result};
