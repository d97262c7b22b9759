//! Small encoder-decoder transformer with exact gradients.
//!
//! Pre-norm layers, learned absolute positions (initialized to sinusoids),
//! GELU feed-forward blocks, and one embedding matrix shared by encoder
//! input, decoder input and the output projection. All arithmetic is `f64` and single-threaded, so identical
//! inputs give bitwise-identical losses and gradients.

mod config;
mod layers;
mod network;
mod params;

pub use config::ModelConfig;
pub use network::{
    encoder_states, forward, log_softmax, loss, loss_and_grads, next_token_logits, softmax_rows,
    DecoderFeed, ForwardTrace, LossAndGrads, SeqPair,
};
pub use params::{Init, Layout, ParamEntry, ParameterSet};
