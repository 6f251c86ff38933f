use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::encoder::EncodedBatch;
use super::layers::Linear;
use super::params::ParamSet;
use crate::corpus::{DemClass, MaskedBatch};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

pub const MLM_HEAD: &str = "head.mlm";
pub const DEM_HEAD: &str = "head.dem";
pub const CLS_HEAD: &str = "head.cls";

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of probability `p` against target `y` in {0, 1}.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// BCE on a logit together with its derivative. The derivative is zero in
/// the clamped region, matching the clamped loss.
pub fn bce_with_logit(z: f64, y: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let grad = if p < PROB_EPS || p > 1.0 - PROB_EPS { 0.0 } else { p - y };
    (bce(p, y), grad)
}

/// Mean softmax cross-entropy over rows and `dL/dlogits`.
pub fn softmax_cross_entropy(logits: &ArrayView2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = targets.len();
    assert_eq!(n, logits.nrows());
    let floor = PROB_EPS.ln();
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for (i, (row, &t)) in logits.rows().into_iter().zip(targets).enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let logp = row[t] - max - z.ln();
        if logp < floor {
            total -= floor;
            continue;
        }
        total -= logp;
        let mut g = grad.row_mut(i);
        for (gj, &v) in g.iter_mut().zip(row.iter()) {
            *gj = (v - max).exp() / z / n as f64;
        }
        g[t] -= 1.0 / n as f64;
    }
    (total / n as f64, grad)
}

/// Loss value with its gradient with respect to the encoder outputs.
#[derive(Clone, Debug)]
pub struct HeadLoss {
    pub value: f64,
    /// Gradient for the packed token states, if the head reads them.
    pub d_packed: Option<Array2<f64>>,
    /// Gradient for the sequence states, if the head reads them.
    pub d_sequence: Option<Array2<f64>>,
}

fn gather(encoded: &EncodedBatch, idx: &[usize]) -> Array2<f64> {
    encoded.packed().select(Axis(0), idx)
}

fn scatter(encoded: &EncodedBatch, idx: &[usize], d: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(encoded.packed().dim());
    for (row, &i) in d.rows().into_iter().zip(idx) {
        let mut target = out.row_mut(i);
        target += &row;
    }
    out
}

fn masked_rows(encoded: &EncodedBatch, batch: &MaskedBatch) -> Result<Vec<(usize, usize)>> {
    let masked = batch.masked_indices();
    if masked.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    if batch.batch_size() != encoded.batch_size() {
        return Err(Error::InvalidArgument("encoded batch does not match masked batch".into()));
    }
    Ok(masked)
}

fn require_labels(labels: &[Option<DemClass>]) -> Result<Vec<f64>> {
    let missing = labels.iter().filter(|l| l.is_none()).count();
    if missing > 0 {
        return Err(Error::MissingLabel { label: "demographic".into(), count: missing });
    }
    Ok(labels.iter().map(|l| l.expect("checked").label()).collect())
}

/// Masked-token prediction: a linear map from token state to vocabulary
/// logits. Zero-initialised, so an untrained head predicts uniformly.
#[derive(Clone, Copy, Debug)]
pub struct MlmHead {
    proj: Linear,
}

impl MlmHead {
    pub fn init(params: &mut ParamSet, hidden: usize, vocab: usize) -> Self {
        Self { proj: Linear::zeros(params, MLM_HEAD, hidden, vocab) }
    }

    pub fn bind(params: &ParamSet, hidden: usize, vocab: usize) -> Result<Self> {
        Ok(Self { proj: Linear::bind(params, MLM_HEAD, hidden, vocab)? })
    }

    pub fn compute(
        &self,
        params: &ParamSet,
        grads: Option<&mut ParamSet>,
        encoded: &EncodedBatch,
        batch: &MaskedBatch,
    ) -> Result<HeadLoss> {
        let masked = masked_rows(encoded, batch)?;
        let idx: Vec<usize> = masked.iter().map(|&(r, p)| encoded.packed_index(r, p)).collect();
        let targets: Vec<usize> = masked.iter().map(|&ix| batch.original_ids[ix] as usize).collect();
        let x = gather(encoded, &idx);
        let logits = self.proj.forward(params, &x.view());
        let (value, dlogits) = softmax_cross_entropy(&logits.view(), &targets);
        if !value.is_finite() {
            return Err(Error::NonFinite("masked-token loss"));
        }
        let d_packed = grads.map(|g| scatter(encoded, &idx, &self.proj.backward(params, g, &x.view(), &dlogits)));
        Ok(HeadLoss { value, d_packed, d_sequence: None })
    }
}

/// Single-logit demographic classifier shared by the sequence-level and
/// token-level objectives.
#[derive(Clone, Copy, Debug)]
pub struct DemHead {
    proj: Linear,
}

impl DemHead {
    pub fn init(params: &mut ParamSet, hidden: usize) -> Self {
        Self { proj: Linear::zeros(params, DEM_HEAD, hidden, 1) }
    }

    pub fn bind(params: &ParamSet, hidden: usize) -> Result<Self> {
        Ok(Self { proj: Linear::bind(params, DEM_HEAD, hidden, 1)? })
    }

    fn bce_over(
        &self,
        params: &ParamSet,
        grads: Option<&mut ParamSet>,
        x: &Array2<f64>,
        targets: &[f64],
    ) -> Result<(f64, Option<Array2<f64>>)> {
        let z = self.proj.forward(params, &x.view());
        let n = targets.len() as f64;
        let mut total = 0.0;
        let mut dz = Array2::zeros(z.dim());
        for (i, (&zi, &y)) in z.column(0).iter().zip(targets).enumerate() {
            let (l, g) = bce_with_logit(zi, y);
            total += l;
            dz[[i, 0]] = g / n;
        }
        let value = total / n;
        if !value.is_finite() {
            return Err(Error::NonFinite("demographic loss"));
        }
        let dx = grads.map(|g| self.proj.backward(params, g, &x.view(), &dz));
        Ok((value, dx))
    }

    /// Mean BCE of each row's label predicted from its sequence state.
    pub fn compute_seq(
        &self,
        params: &ParamSet,
        grads: Option<&mut ParamSet>,
        encoded: &EncodedBatch,
        labels: &[Option<DemClass>],
    ) -> Result<HeadLoss> {
        if labels.len() != encoded.batch_size() {
            return Err(Error::InvalidArgument("one label per row required".into()));
        }
        let targets = require_labels(labels)?;
        let (value, d_sequence) = self.bce_over(params, grads, &encoded.sequence_state, &targets)?;
        Ok(HeadLoss { value, d_packed: None, d_sequence })
    }

    /// Mean BCE over masked positions of the row label predicted from each
    /// masked token state.
    pub fn compute_tok(
        &self,
        params: &ParamSet,
        grads: Option<&mut ParamSet>,
        encoded: &EncodedBatch,
        batch: &MaskedBatch,
        labels: &[Option<DemClass>],
    ) -> Result<HeadLoss> {
        let masked = masked_rows(encoded, batch)?;
        if labels.len() != encoded.batch_size() {
            return Err(Error::InvalidArgument("one label per row required".into()));
        }
        let row_targets = require_labels(labels)?;
        let idx: Vec<usize> = masked.iter().map(|&(r, p)| encoded.packed_index(r, p)).collect();
        let targets: Vec<f64> = masked.iter().map(|&(r, _)| row_targets[r]).collect();
        let x = gather(encoded, &idx);
        let (value, dx) = self.bce_over(params, grads, &x, &targets)?;
        let d_packed = dx.map(|d| scatter(encoded, &idx, &d));
        Ok(HeadLoss { value, d_packed, d_sequence: None })
    }

    /// Probability of the positive class for each row.
    pub fn predict_seq(&self, params: &ParamSet, encoded: &EncodedBatch) -> Array1<f64> {
        self.proj.forward(params, &encoded.sequence_state.view()).column(0).mapv(sigmoid)
    }
}

/// `k`-way linear classifier over the sequence state.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierHead {
    proj: Linear,
}

impl ClassifierHead {
    pub fn init(params: &mut ParamSet, hidden: usize, classes: usize) -> Self {
        Self { proj: Linear::zeros(params, CLS_HEAD, hidden, classes) }
    }

    pub fn bind(params: &ParamSet, hidden: usize, classes: usize) -> Result<Self> {
        Ok(Self { proj: Linear::bind(params, CLS_HEAD, hidden, classes)? })
    }

    pub fn logits(&self, params: &ParamSet, encoded: &EncodedBatch) -> Array2<f64> {
        self.proj.forward(params, &encoded.sequence_state.view())
    }

    pub fn compute(
        &self,
        params: &ParamSet,
        grads: Option<&mut ParamSet>,
        encoded: &EncodedBatch,
        targets: &[usize],
    ) -> Result<HeadLoss> {
        let x = &encoded.sequence_state;
        let logits = self.proj.forward(params, &x.view());
        let (value, dlogits) = softmax_cross_entropy(&logits.view(), targets);
        if !value.is_finite() {
            return Err(Error::NonFinite("classification loss"));
        }
        let d_sequence = grads.map(|g| self.proj.backward(params, g, &x.view(), &dlogits));
        Ok(HeadLoss { value, d_packed: None, d_sequence })
    }

    pub fn predict(&self, params: &ParamSet, encoded: &EncodedBatch) -> Vec<usize> {
        self.logits(params, encoded)
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Mean negative log-likelihood of the original token at masked positions.
pub fn mlm_loss(encoded: &EncodedBatch, batch: &MaskedBatch, params: &ParamSet) -> Result<f64> {
    let vocab = params
        .get(params.id(&format!("{MLM_HEAD}.weight")).ok_or_else(|| Error::Missing("masked-token head".into()))?)
        .ncols();
    let head = MlmHead::bind(params, encoded.hidden_dim(), vocab)?;
    Ok(head.compute(params, None, encoded, batch)?.value)
}

pub fn dem_loss_seq(encoded: &EncodedBatch, labels: &[Option<DemClass>], params: &ParamSet) -> Result<f64> {
    let head = DemHead::bind(params, encoded.hidden_dim())?;
    Ok(head.compute_seq(params, None, encoded, labels)?.value)
}

pub fn dem_loss_tok(
    encoded: &EncodedBatch,
    batch: &MaskedBatch,
    labels: &[Option<DemClass>],
    params: &ParamSet,
) -> Result<f64> {
    let head = DemHead::bind(params, encoded.hidden_dim())?;
    Ok(head.compute_tok(params, None, encoded, batch, labels)?.value)
}
