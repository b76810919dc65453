//! Desk-scale low-resource text-to-speech.
//!
//! The pipeline runs in five stages, each in its own module:
//!
//! * [`corpus_prep`] re-segments long recordings at silences and drops
//!   utterances whose letter rate is implausible.
//! * [`frontend`] turns initial-final syllable transcripts into
//!   language-tagged letter tokens.
//! * [`features`] handles 16 kHz / 16-bit audio, 80-band log-mel
//!   extraction and a Griffin-Lim fallback synthesizer.
//! * [`acoustic`] is a location-sensitive attention encoder-decoder that
//!   maps tokens to log-mel frames and decides when to stop.
//! * [`vocoder`] is a conditional WaveNet with a discretized
//!   mixture-of-logistics output over the 16-bit sample grid.
//!
//! [`transfer`] chains them into the average-speaker pretrain / fine-tune
//! workflow, [`eval`] provides objective diagnostics and [`toycorpus`]
//! generates the synthetic tone-burst corpus used to exercise everything
//! on a laptop.

pub mod acoustic;
pub mod cli;
pub mod corpus_prep;
pub mod error;
pub mod eval;
pub mod features;
pub mod frontend;
pub mod nn;
pub mod toycorpus;
pub mod transfer;
pub mod vocoder;

pub use error::{Error, Result};
