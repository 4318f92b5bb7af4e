pub mod attention;
pub mod ca;
pub mod embedding;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod mpo;
pub mod mps;
pub mod oracle;
pub mod tape;
pub mod tensor;
pub mod training;

pub use embedding::{decode, embed, EmbeddingSequence};
pub use error::{Error, Result};
pub use mpo::{Activation, MpoConfig, MpoLayer};
pub use mps::{MpsHead, MpsHeadConfig};
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::{batch_contract, contract, frobenius_norm, matrix_exp_2x2, Tensor};
