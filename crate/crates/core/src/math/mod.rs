//! Dense matrix type and the reverse-mode tape the encoder trains with.

pub mod mat;
pub mod tape;

pub use mat::Mat;
pub use tape::{ParamGrads, ParamId, ParamStore, RowTarget, Source, Tape};
