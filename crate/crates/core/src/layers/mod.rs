//! Neural building blocks: BiLSTM encoder, linear-chain CRF over {O, B, I},
//! attention pooling and a linear projection.

mod attention;
pub mod crf;
mod linear;
mod lstm;

pub use attention::{attention_pool, Attention};
pub use crf::{
    crf_log_partition, crf_nll, crf_path_score, crf_viterbi, Coarse, CoarseSequence, CrfLayer, CrfScores,
    FORBIDDEN_SCORE,
};
pub use linear::Linear;
pub use lstm::{bilstm_forward, BiLstm};
