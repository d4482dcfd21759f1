//! Core library for SCOT: cross-city region-embedding alignment built on
//! Sinkhorn entropic optimal transport.
//!
//! The crate is organized bottom-up:
//!
//! | module     | contents                                                        |
//! |------------|-----------------------------------------------------------------|
//! | [`citydata`] | city graphs, mobility matrices, synthetic twin-city generator |
//! | [`encoder`]  | graph-propagation encoder and intra-city mobility loss        |
//! | [`sinkhorn`] | entropic OT solver (scaling and log-domain) and diagnostics   |
//! | [`align`]    | cross-city cost, OT loss, contrastive loss, combined step     |
//! | [`cycle`]    | cross-attention cycle-reconstruction regularizer              |
//! | [`hub`]      | shared-prototype hub for multi-source alignment               |
//! | [`trainer`]  | Adam, single/multi-source training loops, gradient checks     |
//! | [`eval`]     | ridge transfer readout, matching metrics, MAE bound verifier  |
//!
//! All numeric code is generic over the [`Scalar`] floating type; the
//! `*64` aliases at the crate root fix the default `f64` instantiation.

use ndarray::ScalarOperand;
use std::path::PathBuf;

pub mod align;
pub mod citydata;
pub mod cycle;
pub mod encoder;
pub mod eval;
pub mod hub;
pub mod sinkhorn;
pub mod trainer;

/// Floating-point scalar the numeric core is generic over.
///
/// Covers everything the algorithms need: IEEE arithmetic via
/// `num_traits::Float`, lossless construction from literals via `NumCast`
/// (`F::from(0.5).unwrap()`), scalar broadcasting for `ndarray` expressions,
/// and thread-safety bounds so per-city work can run in parallel.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + ScalarOperand
    + std::iter::Sum
    + std::fmt::Display
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Errors produced by any operation in the crate.
///
/// The CLI maps `Input`/`Parse`/`NotFound` to exit code 1 and
/// `Stability`/`Train` to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum ScotError {
    /// Invalid argument or malformed in-memory data.
    #[error("input error: {0}")]
    Input(String),

    /// Malformed file content, with location.
    #[error("parse error in {file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    /// A required file or directory is missing.
    #[error("not found: {0} (expected layout: edges.csv, trips.csv, optional labels.csv)")]
    NotFound(PathBuf),

    /// Numerical breakdown in a solver.
    #[error("numerical stability error: {0}")]
    Stability(String),

    /// Failure inside a training loop, with epoch context.
    #[error("training error at epoch {epoch}: {msg}")]
    Train { epoch: usize, msg: String },

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ScotError>;

/// Default `f64` instantiations of the core types.
pub type CityGraph64 = citydata::CityGraph<f64>;
pub type TwinCityTruth64 = citydata::TwinCityTruth<f64>;
pub type EncoderParams64 = encoder::EncoderParams<f64>;
pub type SinkhornConfig64 = sinkhorn::SinkhornConfig<f64>;
pub type Coupling64 = sinkhorn::Coupling<f64>;
pub type AlignConfig64 = align::AlignConfig<f64>;
pub type AlignResult64 = align::AlignResult<f64>;
pub type CycleParams64 = cycle::CycleParams<f64>;
pub type HubState64 = hub::HubState<f64>;
pub type HubConfig64 = hub::HubConfig<f64>;
pub type TrainConfig64 = trainer::TrainConfig<f64>;
pub type RidgeModel64 = eval::RidgeModel<f64>;
pub type BoundInstance64 = eval::BoundInstance<f64>;
