//! Neural building blocks: LSTM, sinusoidal positional encoding, scaled
//! dot-product attention, the position-wise feed-forward network, layer
//! normalization and the post-norm encoder block.
//!
//! Each block comes in two forms. The `*_graph` functions record onto a
//! [`Graph`](crate::numerics::Graph) and are what the models train through;
//! the plain functions evaluate a block once on frozen parameters.

mod encoder;
mod init;
mod lstm;

pub use encoder::{
    attention_head, attention_head_graph, attention_head_with_weights, encoder_block,
    encoder_block_graph, feed_forward, feed_forward_graph, layer_norm, multi_head_attention,
    multi_head_attention_graph, positional_encoding, positional_encoding_for_width, AttentionHead,
    Dropout, EncoderParams, EncoderVars, HeadVars, LAYER_NORM_EPS,
};
pub use init::{glorot, ones_vec, zeros_vec, Bind};
pub use lstm::{
    lstm_cell_step, lstm_cell_step_graph, lstm_layer, lstm_layer_graph, LstmParams, LstmState,
    LstmVars,
};

pub(crate) use init::bind;
