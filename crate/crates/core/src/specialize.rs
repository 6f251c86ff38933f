//! Intermediate specialization: masked-token training, optionally coupled
//! with a demographic objective whose weight is learned through a
//! per-task log-variance.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{mask_tokens_with, DemClass, Dimension, LabeledDocument, MaskedBatch, MaskingScheme};
use crate::digest::digest_parts;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, DemHead, Encoder, MlmHead, Mode, ParamSet, DEM_HEAD, MLM_HEAD};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::training::{derive_seed, encode_all, holdout, pad_rows, sequential_batches, shuffled_batches, EarlyStopping, Goal, Verdict};

/// How a model was (or was not) specialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "MLM")]
    Mlm,
    #[serde(rename = "DS-Seq")]
    DsSeq,
    #[serde(rename = "DS-Tok")]
    DsTok,
}

impl Method {
    pub const SPECIALIZED: [Method; 3] = [Method::Mlm, Method::DsSeq, Method::DsTok];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Mlm => "MLM",
            Method::DsSeq => "DS-Seq",
            Method::DsTok => "DS-Tok",
        }
    }

    pub fn uses_demographics(self) -> bool {
        matches!(self, Method::DsSeq | Method::DsTok)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "vanilla" | "none" => Ok(Method::Vanilla),
            "mlm" => Ok(Method::Mlm),
            "ds-seq" => Ok(Method::DsSeq),
            "ds-tok" => Ok(Method::DsTok),
            _ => Err(Error::UnknownCategory { group: "method".into(), value: s.into() }),
        }
    }
}

/// Learned log-variances of the two tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyState {
    pub eta_mlm: f64,
    pub eta_dem: f64,
}

fn check_inputs(loss: f64, eta: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite("task loss"));
    }
    if !eta.is_finite() {
        return Err(Error::NonFinite("log-variance"));
    }
    if loss < 0.0 {
        return Err(Error::InvalidArgument(format!("task loss {loss} is negative")));
    }
    Ok(())
}

/// `0.5 * (exp(-eta) * loss + eta)`.
pub fn weighted_loss(loss: f64, eta: f64) -> Result<f64> {
    check_inputs(loss, eta)?;
    Ok(0.5 * ((-eta).exp() * loss + eta))
}

/// Partial derivatives of [`weighted_loss`] with respect to `(loss, eta)`.
pub fn weighted_loss_grad(loss: f64, eta: f64) -> (f64, f64) {
    let w = (-eta).exp();
    (0.5 * w, 0.5 * (1.0 - w * loss))
}

/// Weight the task loss effectively receives, `0.5 * exp(-eta)`.
pub fn effective_weight(eta: f64) -> f64 {
    0.5 * (-eta).exp()
}

pub fn combined_loss(mlm_loss: f64, dem_loss: f64, state: &UncertaintyState) -> Result<f64> {
    Ok(weighted_loss(mlm_loss, state.eta_mlm)? + weighted_loss(dem_loss, state.eta_dem)?)
}

/// Gradient of [`combined_loss`] as `[d mlm_loss, d dem_loss, d eta_mlm, d eta_dem]`.
pub fn combined_loss_grad(mlm_loss: f64, dem_loss: f64, state: &UncertaintyState) -> [f64; 4] {
    let (lm, em) = weighted_loss_grad(mlm_loss, state.eta_mlm);
    let (ld, ed) = weighted_loss_grad(dem_loss, state.eta_dem);
    [lm, ld, em, ed]
}

/// Trains a single log-variance with Adam against a constant task loss and
/// returns its trajectory (initial value first).
pub fn fit_eta(loss: f64, lr: f64, steps: usize) -> Result<Vec<f64>> {
    check_inputs(loss, 0.0)?;
    let mut p = ParamSet::new();
    let id = p.add("eta", Array2::zeros((1, 1)));
    let mut adam = Adam::new(&p, AdamConfig::with_lr(lr));
    let mut path = vec![0.0];
    for _ in 0..steps {
        let mut g = p.zeros_like();
        g.get_mut(id)[[0, 0]] = weighted_loss_grad(loss, p.get(id)[[0, 0]]).1;
        adam.step(&mut p, &g);
        path.push(p.get(id)[[0, 0]]);
    }
    Ok(path)
}

fn default_mask_rate() -> f64 {
    0.15
}
fn default_method() -> Method {
    Method::Mlm
}
fn default_dimension() -> Dimension {
    Dimension::Gender
}
fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    32
}
fn default_lr_grid() -> Vec<f64> {
    vec![5e-5, 1e-5, 1e-6]
}
fn default_patience() -> usize {
    3
}
fn default_dev_fraction() -> f64 {
    0.05
}
fn default_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecializationConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_dimension")]
    pub dimension: Dimension,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Learning rate for the log-variances; defaults to the trial rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_lr: Option<f64>,
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
    /// Decoupled weight decay on encoder and head weights (never on eta).
    #[serde(default)]
    pub weight_decay: f64,
    /// Global gradient-norm cap for encoder and head weights.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub masking: MaskingScheme,
}

impl SpecializationConfig {
    pub fn new(method: Method, dimension: Dimension) -> Self {
        Self {
            method,
            dimension,
            mask_rate: default_mask_rate(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr_grid: default_lr_grid(),
            patience: default_patience(),
            seed: 0,
            eta_lr: None,
            dev_fraction: default_dev_fraction(),
            weight_decay: 0.0,
            clip_norm: default_clip(),
            masking: MaskingScheme::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.method == Method::Vanilla {
            return bad("vanilla is not a specialization method");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if self.lr_grid.is_empty() {
            return bad("lr_grid must not be empty");
        }
        if self.lr_grid.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return bad("mask_rate must be in (0, 1]");
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return bad("dev_fraction must be in (0, 1)");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mlm_loss: f64,
    pub dem_loss: Option<f64>,
    pub eta_mlm: f64,
    pub eta_dem: f64,
    pub dev_objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub lr: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_dev_objective: f64,
    pub state: UncertaintyState,
}

#[derive(Clone, Debug)]
pub struct SpecializationOutcome {
    pub checkpoint: Checkpoint,
    /// Records of every trial, in grid order.
    pub log: Vec<EpochLog>,
    pub trials: Vec<TrialSummary>,
    pub chosen: usize,
    pub config: SpecializationConfig,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config: &'a SpecializationConfig,
    chosen_lr: f64,
    trials: &'a [TrialSummary],
    base: &'a str,
    corpus_digest: &'a Option<String>,
}

impl SpecializationOutcome {
    pub fn winner(&self) -> &TrialSummary {
        &self.trials[self.chosen]
    }

    /// Checkpoint files plus `training_log.jsonl` and `specialization.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.checkpoint.save(dir)?;
        let log_path = dir.join("training_log.jsonl");
        let mut out = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
        for rec in &self.log {
            writeln!(out, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&log_path, e))?;
        }
        out.flush().map_err(|e| Error::io(&log_path, e))?;
        let summary = RunSummary {
            config: &self.config,
            chosen_lr: self.winner().lr,
            trials: &self.trials,
            base: self.checkpoint.lineage.parent.as_deref().unwrap_or(""),
            corpus_digest: &self.checkpoint.lineage.specialization_corpus,
        };
        let path = dir.join("specialization.json");
        std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))
    }
}

pub fn read_training_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format("training log", e)))
        .collect()
}

pub fn corpus_digest(docs: &[LabeledDocument]) -> String {
    digest_parts(docs.iter().flat_map(|d| [d.id.as_bytes(), d.text.as_bytes()]))
}

/// Masks with `rate`, re-drawing with successive seeds until at least one
/// position is selected.
pub(crate) fn mask_nonempty(
    ids: &Array2<u32>,
    rate: f64,
    seed: u64,
    scheme: MaskingScheme,
    vocab: usize,
) -> Result<MaskedBatch> {
    for k in 0..256u64 {
        let b = mask_tokens_with(ids, rate, seed.wrapping_add(k), scheme, vocab)?;
        if b.masked_count() > 0 {
            return Ok(b);
        }
    }
    Err(Error::NoMaskedPositions)
}

struct Data<'a> {
    seqs: Vec<Vec<u32>>,
    labels: Vec<Option<DemClass>>,
    train: Vec<usize>,
    dev_batches: Vec<MaskedBatch>,
    vocab: usize,
    config: &'a SpecializationConfig,
}

struct Trial {
    params: ParamSet,
    log: Vec<EpochLog>,
    summary: TrialSummary,
}

struct Heads {
    mlm: MlmHead,
    dem: Option<DemHead>,
}

fn losses(
    encoder: &Encoder,
    heads: &Heads,
    method: Method,
    params: &ParamSet,
    batch: &MaskedBatch,
    mode: Mode<'_>,
    grads: Option<(&mut ParamSet, &UncertaintyState)>,
) -> Result<(f64, Option<f64>)> {
    let (enc, cache) = encoder.forward(params, batch, mode)?;
    let Some((grads, state)) = grads else {
        let mlm = heads.mlm.compute(params, None, &enc, batch)?.value;
        let dem = match (method, heads.dem) {
            (Method::DsSeq, Some(d)) => Some(d.compute_seq(params, None, &enc, &batch.sequence_labels)?.value),
            (Method::DsTok, Some(d)) => Some(d.compute_tok(params, None, &enc, batch, &batch.sequence_labels)?.value),
            _ => None,
        };
        return Ok((mlm, dem));
    };
    let m = heads.mlm.compute(params, Some(grads), &enc, batch)?;
    let d = match (method, heads.dem) {
        (Method::DsSeq, Some(d)) => Some(d.compute_seq(params, Some(grads), &enc, &batch.sequence_labels)?),
        (Method::DsTok, Some(d)) => Some(d.compute_tok(params, Some(grads), &enc, batch, &batch.sequence_labels)?),
        _ => None,
    };
    let mut d_packed = m.d_packed.expect("gradient requested");
    let mut d_sequence = None;
    if let Some(d) = &d {
        let [wm, wd, _, _] = combined_loss_grad(m.value, d.value, state);
        for (name, v) in [(MLM_HEAD, wm), (DEM_HEAD, wd)] {
            for suffix in ["weight", "bias"] {
                let id = grads.id(&format!("{name}.{suffix}")).expect("head registered");
                grads.get_mut(id).mapv_inplace(|g| g * v);
            }
        }
        d_packed *= wm;
        if let Some(dp) = &d.d_packed {
            d_packed.scaled_add(wd, dp);
        }
        d_sequence = d.d_sequence.as_ref().map(|ds| ds * wd);
    }
    encoder.backward(params, grads, &cache, Some(&d_packed), d_sequence.as_ref());
    Ok((m.value, d.map(|d| d.value)))
}

fn dev_objective(
    encoder: &Encoder,
    heads: &Heads,
    data: &Data<'_>,
    params: &ParamSet,
    state: &UncertaintyState,
) -> Result<f64> {
    let method = data.config.method;
    let (mut mlm_sum, mut mlm_n, mut dem_sum, mut dem_n) = (0.0, 0.0, 0.0, 0.0);
    for batch in &data.dev_batches {
        let (m, d) = losses(encoder, heads, method, params, batch, Mode::Eval, None)?;
        let masked = batch.masked_count() as f64;
        mlm_sum += m * masked;
        mlm_n += masked;
        if let Some(d) = d {
            let n = if method == Method::DsSeq { batch.batch_size() as f64 } else { masked };
            dem_sum += d * n;
            dem_n += n;
        }
    }
    let mlm = mlm_sum / mlm_n;
    if method.uses_demographics() {
        combined_loss(mlm, dem_sum / dem_n, state)
    } else {
        Ok(mlm)
    }
}

fn run_trial(base: &ParamSet, encoder: &Encoder, heads: &Heads, data: &Data<'_>, lr: f64, seed: u64) -> Result<Trial> {
    let cfg = data.config;
    let mut params = base.clone();
    let mut adam = Adam::new(&params, AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::with_lr(lr) });
    let mut eta = ParamSet::new();
    let eta_m = eta.add("eta.mlm", Array2::zeros((1, 1)));
    let eta_d = eta.add("eta.dem", Array2::zeros((1, 1)));
    let mut eta_adam = Adam::new(&eta, AdamConfig::with_lr(cfg.eta_lr.unwrap_or(lr)));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dropout"));
    let mut stopper = EarlyStopping::new(cfg.patience, Goal::Minimize);
    let mut best = (params.clone(), UncertaintyState::default());
    let mut log = Vec::new();
    let state_of = |eta: &ParamSet| UncertaintyState { eta_mlm: eta.get(eta_m)[[0, 0]], eta_dem: eta.get(eta_d)[[0, 0]] };

    let mut grads = params.zeros_like();
    for epoch in 1..=cfg.epochs {
        let order = shuffled_batches(data.train.len(), cfg.batch_size, derive_seed(seed, &format!("order-{epoch}")));
        let (mut mlm_total, mut dem_total) = (0.0, 0.0);
        for (b, rows) in order.iter().enumerate() {
            let rows: Vec<usize> = rows.iter().map(|&i| data.train[i]).collect();
            let ids = pad_rows(&data.seqs, &rows);
            let mask_seed = derive_seed(seed, &format!("mask-{epoch}-{b}"));
            let batch = mask_nonempty(&ids, cfg.mask_rate, mask_seed, cfg.masking, data.vocab)?
                .with_labels(rows.iter().map(|&r| data.labels[r]).collect());
            let state = state_of(&eta);
            grads.fill_zero();
            let (m, d) =
                losses(encoder, heads, cfg.method, &params, &batch, Mode::Train(&mut dropout_rng), Some((&mut grads, &state)))?;
            if !grads.all_finite() {
                return Err(Error::NonFinite("gradients"));
            }
            clip_grad_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut params, &grads);
            mlm_total += m;
            if let Some(d) = d {
                dem_total += d;
                let [_, _, gm, gd] = combined_loss_grad(m, d, &state);
                let mut eg = eta.zeros_like();
                eg.get_mut(eta_m)[[0, 0]] = gm;
                eg.get_mut(eta_d)[[0, 0]] = gd;
                eta_adam.step(&mut eta, &eg);
            }
        }
        let n = order.len() as f64;
        let state = state_of(&eta);
        let dev = dev_objective(encoder, heads, data, &params, &state)?;
        log.push(EpochLog {
            epoch,
            lr,
            mlm_loss: mlm_total / n,
            dem_loss: cfg.method.uses_demographics().then_some(dem_total / n),
            eta_mlm: state.eta_mlm,
            eta_dem: state.eta_dem,
            dev_objective: dev,
        });
        match stopper.observe(epoch, dev) {
            Verdict::Improved => best = (params.clone(), state),
            Verdict::NoImprovement => {}
            Verdict::Stop => break,
        }
    }
    let summary = TrialSummary {
        lr,
        epochs_run: log.len(),
        best_epoch: stopper.best_epoch(),
        best_dev_objective: stopper.best().unwrap_or(f64::INFINITY),
        state: best.1,
    };
    Ok(Trial { params: best.0, log, summary })
}

/// Runs one trial per learning rate and keeps the one with the lowest
/// development objective. The demographic head is dropped from the result.
pub fn specialize(base: &Checkpoint, docs: &[LabeledDocument], config: &SpecializationConfig) -> Result<SpecializationOutcome> {
    config.validate()?;
    if docs.len() < 2 {
        return Err(Error::InsufficientData(format!("{} specialization document(s); need at least 2", docs.len())));
    }
    let labels: Vec<Option<DemClass>> = docs.iter().map(|d| d.demographic(config.dimension)).collect();
    if config.method.uses_demographics() {
        let missing = labels.iter().filter(|l| l.is_none()).count();
        if missing > 0 {
            return Err(Error::MissingLabel { label: config.dimension.to_string(), count: missing });
        }
    }
    let ecfg = &base.config;
    let seqs = encode_all(&base.tokenizer, docs.iter().map(|d| d.text.as_str()), ecfg.max_seq_len);
    let (train, dev) = holdout(docs.len(), config.dev_fraction, derive_seed(config.seed, "dev-split"));
    let dev_batches = sequential_batches(dev.len(), config.batch_size)
        .into_iter()
        .enumerate()
        .map(|(b, rows)| {
            let rows: Vec<usize> = rows.iter().map(|&i| dev[i]).collect();
            let ids = pad_rows(&seqs, &rows);
            let seed = derive_seed(config.seed, &format!("dev-mask-{b}"));
            Ok(mask_nonempty(&ids, config.mask_rate, seed, config.masking, ecfg.vocab_size)?
                .with_labels(rows.iter().map(|&r| labels[r]).collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = Data { seqs, labels, train, dev_batches, vocab: ecfg.vocab_size, config };

    let mut params = base.encoder_params();
    let mlm = match MlmHead::bind(&base.params, ecfg.hidden_dim, ecfg.vocab_size) {
        Ok(_) => {
            for suffix in ["weight", "bias"] {
                let name = format!("{MLM_HEAD}.{suffix}");
                params.add(name.clone(), base.params.get(base.params.id(&name).expect("bound")).clone());
            }
            MlmHead::bind(&params, ecfg.hidden_dim, ecfg.vocab_size)?
        }
        Err(_) => MlmHead::init(&mut params, ecfg.hidden_dim, ecfg.vocab_size),
    };
    let dem = config.method.uses_demographics().then(|| DemHead::init(&mut params, ecfg.hidden_dim));
    let encoder = Encoder::bind(ecfg, &params)?;
    let heads = Heads { mlm, dem };

    let mut trials = Vec::with_capacity(config.lr_grid.len());
    for (i, &lr) in config.lr_grid.iter().enumerate() {
        let seed = derive_seed(config.seed, &format!("trial-{i}-{lr:e}"));
        trials.push(run_trial(&params, &encoder, &heads, &data, lr, seed)?);
    }
    let chosen = (0..trials.len())
        .min_by(|&a, &b| trials[a].summary.best_dev_objective.total_cmp(&trials[b].summary.best_dev_objective))
        .expect("non-empty grid");

    let winner = &trials[chosen];
    let checkpoint = Checkpoint {
        config: ecfg.clone(),
        tokenizer: base.tokenizer.clone(),
        params: winner.params.filtered(|n| !n.starts_with(DEM_HEAD)),
        lineage: crate::model::Lineage {
            method: config.method,
            base_model: base.lineage.base_model.clone(),
            dimension: Some(config.dimension),
            specialization_corpus: Some(corpus_digest(docs)),
            parent: Some(base.digest()),
            seed: config.seed,
        },
        classifier: None,
    };
    Ok(SpecializationOutcome {
        checkpoint,
        log: trials.iter().flat_map(|t| t.log.iter().cloned()).collect(),
        trials: trials.into_iter().map(|t| t.summary).collect(),
        chosen,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests;
