//! Speech quality estimation with a jointly trained reconstruction and
//! classification network.
//!
//! The crate is organised bottom-up:
//!
//! * [`signal`]: waveforms, WAV I/O, STFT/iSTFT and log-power spectra.
//! * [`diffcore`]: tensors, a reverse-mode tape, the network primitives,
//!   Adam and checkpoints.
//! * [`labels`]: score quantization, one-hot and soft labels, decoders.
//! * [`losses`]: squared earth mover's distance, time-domain MSE, ranking.
//! * [`model`]: the network itself.
//! * [`data`]: synthetic corpora, mixing, reverberation, manifests.
//! * [`train`]: the training loop.
//! * [`metrics`]: MSE, LCC and SRCC.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
