use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{EncodedBatch, Encoder, EncoderConfig};
use super::heads::{MlmHead, CLS_HEAD, DEM_HEAD, MLM_HEAD};
use super::params::ParamSet;
use crate::corpus::{Dimension, MaskedBatch, Tokenizer};
use crate::digest::digest_parts;
use crate::error::{Error, Result};
use crate::finetune::Task;
use crate::specialize::Method;

pub const CHECKPOINT_FORMAT: u32 = 1;
const CONFIG_FILE: &str = "config.json";
const VOCAB_FILE: &str = "vocab.txt";
const PARAMS_FILE: &str = "params.bin";

/// Where a checkpoint came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub method: Method,
    /// Name of the base model the chain started from.
    pub base_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<Dimension>,
    /// Digest of the corpus used for specialization, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specialization_corpus: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierInfo {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<Dimension>,
    pub labels: Vec<String>,
    /// Digest of the split manifest the classifier was trained on.
    pub split_digest: String,
    pub learning_rate: f64,
    pub dev_f1: f64,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    format_version: u32,
    encoder: EncoderConfig,
    heads: Vec<String>,
    tokenizer_digest: String,
    lineage: Lineage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classifier: Option<ClassifierInfo>,
}

/// Encoder weights, optional heads, tokenizer and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamSet,
    pub lineage: Lineage,
    pub classifier: Option<ClassifierInfo>,
}

impl Checkpoint {
    /// Randomly initialised encoder with a zero masked-token head.
    pub fn fresh(config: &EncoderConfig, tokenizer: Tokenizer, name: &str, seed: u64) -> Result<Self> {
        if config.vocab_size != tokenizer.vocab_size() {
            return Err(Error::InvalidArgument(format!(
                "encoder vocab_size {} differs from tokenizer size {}",
                config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        Encoder::init(config, &mut params, &mut rng)?;
        MlmHead::init(&mut params, config.hidden_dim, config.vocab_size);
        Ok(Self {
            config: config.clone(),
            tokenizer,
            params,
            lineage: Lineage {
                method: Method::Vanilla,
                base_model: name.to_string(),
                dimension: None,
                specialization_corpus: None,
                parent: None,
                seed,
            },
            classifier: None,
        })
    }

    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::bind(&self.config, &self.params)
    }

    /// Encoder tensors only.
    pub fn encoder_params(&self) -> ParamSet {
        self.params.filtered(Encoder::is_encoder_param)
    }

    pub fn heads(&self) -> Vec<String> {
        [MLM_HEAD, DEM_HEAD, CLS_HEAD]
            .iter()
            .filter(|h| self.params.id(&format!("{h}.weight")).is_some())
            .map(|h| h.to_string())
            .collect()
    }

    /// Content digest over configuration, vocabulary and parameter bytes.
    pub fn digest(&self) -> String {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let lineage = serde_json::to_string(&self.lineage).expect("lineage serializes");
        let classifier = serde_json::to_string(&self.classifier).expect("classifier serializes");
        digest_parts([
            config.as_bytes(),
            self.tokenizer.digest().as_bytes(),
            lineage.as_bytes(),
            classifier.as_bytes(),
            &self.params.to_bytes(),
        ])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = ConfigFile {
            format_version: CHECKPOINT_FORMAT,
            encoder: self.config.clone(),
            heads: self.heads(),
            tokenizer_digest: self.tokenizer.digest(),
            lineage: self.lineage.clone(),
            classifier: self.classifier.clone(),
        };
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        self.tokenizer.save(&dir.join(VOCAB_FILE))?;
        let params_path = dir.join(PARAMS_FILE);
        let file = File::create(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let mut out = BufWriter::new(file);
        self.params.write_archive(&mut out).map_err(|e| Error::io(&params_path, e))?;
        out.flush().map_err(|e| Error::io(&params_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Missing(format!("checkpoint directory {}", dir.display())));
        }
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg: ConfigFile = serde_json::from_str(&text).map_err(|e| Error::format("checkpoint config", e))?;
        if cfg.format_version != CHECKPOINT_FORMAT {
            return Err(Error::format("checkpoint config", format!("unsupported format {}", cfg.format_version)));
        }
        let tokenizer = Tokenizer::load(&dir.join(VOCAB_FILE))?;
        if tokenizer.digest() != cfg.tokenizer_digest {
            return Err(Error::DigestMismatch(format!("vocabulary in {} does not match its config", dir.display())));
        }
        let params_path = dir.join(PARAMS_FILE);
        let file = File::open(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let params = ParamSet::read_archive(&mut BufReader::new(file))?;
        let ckpt = Self { config: cfg.encoder, tokenizer, params, lineage: cfg.lineage, classifier: cfg.classifier };
        ckpt.encoder()?;
        Ok(ckpt)
    }

    /// Sequence states for `texts` in evaluation mode, one row per text.
    pub fn embed(&self, texts: &[&str], batch_size: usize) -> Result<Array2<f64>> {
        if texts.is_empty() {
            return Err(Error::InsufficientData("nothing to embed".into()));
        }
        let encoder = self.encoder()?;
        let mut out = Array2::zeros((texts.len(), self.config.hidden_dim));
        for (chunk_idx, chunk) in texts.chunks(batch_size.max(1)).enumerate() {
            let enc = self.encode_texts(&encoder, chunk)?;
            let start = chunk_idx * batch_size.max(1);
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&enc.sequence_state);
        }
        Ok(out)
    }

    fn encode_texts(&self, encoder: &Encoder, texts: &[&str]) -> Result<EncodedBatch> {
        let ids = self.tokenizer.encode_batch(texts.iter().copied(), self.config.max_seq_len);
        encoder.encode(&self.params, &MaskedBatch::unmasked(ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let tok = Tokenizer::build(["alpha beta gamma delta", "beta gamma"], 100);
        let mut cfg = EncoderConfig::tiny(tok.vocab_size());
        cfg.hidden_dim = 8;
        cfg.feedforward_dim = 8;
        Checkpoint::fresh(&cfg, tok, "fresh", 3).unwrap()
    }

    #[test]
    fn save_load_round_trip_preserves_everything() {
        let ckpt = tiny();
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.digest(), ckpt.digest());
        let a = ckpt.embed(&["alpha beta", "gamma"], 4).unwrap();
        let b = back.embed(&["alpha beta", "gamma"], 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tampered_vocabulary_is_detected() {
        let ckpt = tiny();
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let vocab = dir.path().join(VOCAB_FILE);
        let mut text = std::fs::read_to_string(&vocab).unwrap();
        text.push_str("extra\n");
        std::fs::write(&vocab, text).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::DigestMismatch(_))));
    }

    #[test]
    fn missing_directory_is_resource_missing() {
        let err = Checkpoint::load(Path::new("/nonexistent/ckpt")).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn different_seeds_embed_differently() {
        let a = tiny();
        let b = Checkpoint::fresh(&a.config, a.tokenizer.clone(), "fresh", 4).unwrap();
        assert_ne!(a.embed(&["alpha beta"], 1).unwrap(), b.embed(&["alpha beta"], 1).unwrap());
        assert_ne!(a.digest(), b.digest());
    }
}
