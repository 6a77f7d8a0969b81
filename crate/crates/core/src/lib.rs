//! Meme-incorporated open-domain dialogue, trained from scratch at desk scale:
//! response generation with a prefix-LM, cross-encoder meme retrieval with a
//! margin ranking loss, and meme emotion classification with emotion flow
//! and emotion-description prediction.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod tasks;
pub mod tensor;
pub mod textproc;

pub use error::{Error, Result};
