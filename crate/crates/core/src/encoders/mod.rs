//! The two modality encoders: a distance-biased transformer over atoms and
//! a `[CLS]`-pooled transformer over word tokens, each followed by a
//! projection MLP into the shared embedding space.

mod geometry;
mod text;
pub mod vocab;

pub use geometry::{
    atom_features, atom_type_ids, embed_molecule, encode_atoms, encode_geometry, project_geometry,
    rbf_expand, GeomEncoderConfig, GeomEncoding, MASK_ATOM_TYPE,
};
pub use text::{
    embed_text, encode_text, project_text, token_features, TextEncoderConfig, TextEncoding,
};
pub use vocab::{build_vocab, tokenize, words, Vocab};
