//! Desk-scale semi-supervised crowd counting.
//!
//! Counting is cast as density-map regression: the predicted count of an
//! image is the spatial sum of its predicted density map. A small labeled
//! set supervises the density regressor directly, while a larger unlabeled
//! set trains only the shared feature extractor through surrogate binary
//! segmentation tasks ("is the density at this pixel above threshold
//! epsilon_k?"). Pseudo-labels for the unlabeled images are generated
//! online by a self-training rule that exploits the inter-relationship
//! between tasks: foreground under a high threshold implies foreground
//! under every lower one, so inconsistent predictions are suppressed
//! instead of being used as training signal.
//!
//! The crate is self-contained: [`tensor`] provides a dense f64 tensor with
//! reverse-mode autodiff sufficient for small convnets, [`nn`] builds the
//! shared-extractor/multi-head model with Adam and checkpointing, [`scene`]
//! generates synthetic crowd scenes with dot annotations, [`surrogate`]
//! derives threshold ladders and mask targets, [`pseudo`] implements the
//! pseudo-label generation rules, [`loss`] the training objectives
//! (including the L2R/UDA/MT/ICT baselines), and [`train`] the method
//! zoo's training loops, evaluation, and ablation drivers.

pub mod error;
pub mod loss;
pub mod nn;
pub mod pseudo;
pub mod scene;
pub mod surrogate;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use tensor::{grad_check, Tape, Tensor};
