//! Learning and certifying discrete latent-space abstractions of
//! continuous-state Markov decision processes.

pub mod autodiff;
pub mod checker;
pub mod config;
pub mod env;
pub mod error;
pub mod latent;
pub mod mdp;
pub mod pac;
pub mod pipeline;
pub mod replay;
pub mod vae;

pub use error::{Error, Result};
