//! Multimodal (speech + textogram) training of RNN transducers and their
//! adaptation to spoken language understanding.

pub mod cli;
pub mod corpus;
pub mod evaluate;
pub mod experiment;
pub mod featpipe;
pub mod gradcheck;
pub mod linalg;
pub mod network;
pub mod rng;
pub mod symbols;
pub mod textogram;
pub mod trainer;
pub mod transducer;
