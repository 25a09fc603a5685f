//! Attentive WaveBlock dual networks for unsupervised domain adaptation of
//! re-identification embeddings.

pub mod attention;
pub mod awb;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod network;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod registry;
pub mod waveblock;

pub use error::{AwbError, CheckpointError, Result};
