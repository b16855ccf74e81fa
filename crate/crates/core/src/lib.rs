//! Brain tissue segmentation with a U-Net whose fourth input channel is a
//! label prior: the ground truth of the most similar database slice,
//! rigidly registered to the query and accepted only above a similarity
//! threshold.
//!
//! Data flows `dataset` -> `retrieval` -> `registration` -> `training` /
//! `inference` -> `evaluation` -> `reports`. `commands` wires the stages
//! together the way the `priorseg` binary uses them.
//!
//! Runnable examples live in `examples/`:
//!
//! | example | shows |
//! |---|---|
//! | `phantom` | synthetic subject generation and raw volume I/O |
//! | `retrieval_query` | feature index and nearest-slice lookup |
//! | `registration_gate` | rigid registration and the similarity gate |
//! | `train_tiny` | patch sampling, Adam training, checkpoints |
//! | `segment_and_evaluate` | sliding-window inference and Dice |
//! | `reports` | box-plot data and the overlay panel |
//! | `prior_quality` | how good the registered prior is on its own |
//! | `compare_modes` | the three channel modes side by side |
//! | `pipeline` | every CLI stage in a scratch directory |

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod net;
pub mod registration;
pub mod reports;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
