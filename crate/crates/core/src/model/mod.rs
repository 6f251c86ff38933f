//! Small transformer encoder with masked-token, sequence-level and
//! token-level demographic heads, plus checkpoint persistence.

mod checkpoint;
mod encoder;
mod heads;
mod layers;
mod params;

pub use checkpoint::{Checkpoint, ClassifierInfo, Lineage, CHECKPOINT_FORMAT};
pub use encoder::{EncodedBatch, Encoder, EncoderConfig, ForwardCache, Mode};
pub use heads::{
    bce, bce_with_logit, dem_loss_seq, dem_loss_tok, mlm_loss, sigmoid, softmax_cross_entropy, ClassifierHead, DemHead,
    HeadLoss, MlmHead, CLS_HEAD, DEM_HEAD, MLM_HEAD, PROB_EPS,
};
pub use params::{ParamId, ParamSet};
