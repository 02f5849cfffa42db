//! Ordinal semantic segmentation toolkit.
//!
//! Classes carry an order (a chain or a Hasse diagram) and segmentations are
//! judged by whether neighbouring pixels only switch between ordinally
//! adjacent classes. The crate provides:
//!
//! * [`order`]: class orders, path lengths, contact costs and pair sets;
//! * [`maps`]: masks, probability and logit maps, softmax;
//! * [`dt`]: thresholded activations and exact distance transforms;
//! * [`losses`]: cross-entropy, the unimodality margin term, the
//!   neighbour-product and distance-transform contact terms, their weighted
//!   sum and a finite-difference gradient checker;
//! * [`metrics`]: Dice, contact surface, unimodal pixels and the structural
//!   consistency predicate;
//! * [`encoding`]: cumulative ordinal encoding and its consistency
//!   correction;
//! * [`trainer`]: synthetic scenes, logit descent and λ sweeps;
//! * [`formats`]: OPM1 / PGM codecs and CSV number formatting;
//! * [`manifest`]: the record written next to every run's outputs.
//!
//! Class indices are 0-based everywhere.

pub mod dt;
pub mod encoding;
pub mod error;
pub mod formats;
pub mod losses;
pub mod manifest;
pub mod maps;
pub mod metrics;
pub mod order;
pub mod trainer;

pub use dt::{distance_transform, saturate, ActivationMask, DistanceMap, DistanceMetric};
pub use encoding::{consistency_correct, decode, ordinal_encode, CumulativeMap};
pub use error::{Error, Result};
pub use losses::{combined_loss, LossConfig, LossReport, Term};
pub use manifest::RunManifest;
pub use maps::{argmax_mask, one_hot, softmax, ChannelGrid, LogitMap, ProbabilityMap, SegmentationMask};
pub use metrics::{contact_surface, dice_macro, structural_consistency_check, unimodal_pixels, MetricReport};
pub use order::{ClassOrder, CostMatrix, OrdinalPairs, PathLengthTable};
