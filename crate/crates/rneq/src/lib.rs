//! Deterministic laboratory for simplified plain and residual convolutional
//! networks.
//!
//! The crate implements, in plain f64 with fixed summation order:
//!
//! * a small tensor engine ([`tensor`]) with exact backward kernels,
//! * the simplified architectures and their shared forward path ([`network`]),
//! * the parameter transformation between plain and residual coordinates,
//!   initializers, and weight statistics ([`init`]),
//! * deterministic SGD with standard/transferred weight decay and the
//!   equivalent-training pair harness ([`trainer`]),
//! * noise-stability measurements: per-sample layer and interlayer cushions
//!   ([`stability`]),
//! * dominant-gradient-flow measurements ([`gradflow`]),
//! * the matrix-product toy model, its analytic approximation, and the
//!   Gaussian inequality probability `phi(r)` ([`trivial`]),
//! * dataset ingestion, weight containers, and CSV emission ([`dataio`]).
//!
//! Every operation is bitwise reproducible for a fixed seed on a single
//! thread; the `rneq` binary exposes each experiment as a subcommand.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod gradflow;
pub mod init;
pub mod network;
pub mod oracle;
pub mod stability;
pub mod tensor;
pub mod trainer;
pub mod trivial;

pub use error::{Error, Result};
