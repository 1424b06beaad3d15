//! Glocal attention cascading network for multi-image story generation.
//!
//! The crate is `no_std` and only needs `alloc`. It carries the whole numeric
//! side of the model: a define-by-run reverse-mode tape ([`tape`]), LSTM cells
//! and the bi-directional image-sequence encoder ([`lstm`]), glocal vector
//! assembly ([`glocal`]), the context-cascading sentence decoder ([`decoder`]),
//! the count-penalized word sampler ([`sampler`]), corpus and vocabulary
//! handling ([`corpus`]), Adam ([`optim`]) and the training / evaluation loop
//! ([`train`]). File formats and the command-line front end live in the
//! `glacnet` companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod decoder;
pub mod error;
pub mod glocal;
pub mod gradcheck;
pub mod lstm;
pub mod model;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{GlacNet, ModelConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Reserved token ids shared by the vocabulary, decoder and sampler.
pub mod special {
    pub const PAD: usize = 0;
    pub const START: usize = 1;
    pub const END: usize = 2;
    pub const UNK: usize = 3;
    pub const NAMES: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

    pub fn is_reserved(id: usize) -> bool {
        id < NAMES.len()
    }
}
