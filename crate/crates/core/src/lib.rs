//! Action-motif learning across robot embodiments.
//!
//! The pipeline has three trained stages. Stage I learns a discrete motif
//! codebook from canonicalized end-effector windows. Stage II predicts motif
//! tokens from observations and instructions. Stage III is a flow-matching
//! action policy conditioned on the retrieved motifs. A synthetic planar
//! benchmark with heterogeneous embodiments and an interleaved few-shot
//! split drives training and evaluation.

pub mod canonicalize;
pub mod checkpoint;
pub mod data_synth;
pub mod error;
pub mod flow_policy;
pub mod geom;
pub mod harness;
pub mod motif_predictor;
pub mod motif_vq;
pub mod store;
pub mod train;

pub use error::{MotifError, Result};
