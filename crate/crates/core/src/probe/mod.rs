//! Document embeddings, a t-SNE projection for plotting, and silhouette
//! scores measuring how well a label separates the embedding space.

use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dimension, LabeledDocument};
use crate::error::{Error, Result};
use crate::model::Checkpoint;

/// Sequence states of `docs` in evaluation mode, one row per document.
pub fn embed_corpus(model: &Checkpoint, docs: &[LabeledDocument]) -> Result<Array2<f64>> {
    if docs.is_empty() {
        return Err(Error::InsufficientData("no documents to embed".into()));
    }
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    model.embed(&texts, 64)
}

/// Which document attribute colours a probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeLabel {
    Gender,
    Age,
    Language,
}

impl ProbeLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeLabel::Gender => "gender",
            ProbeLabel::Age => "age",
            ProbeLabel::Language => "language",
        }
    }

    /// The label of `doc`, if it has one.
    pub fn of(self, doc: &LabeledDocument) -> Option<String> {
        match self {
            ProbeLabel::Gender => doc.demographic(Dimension::Gender).map(|c| c.name(Dimension::Gender).to_string()),
            ProbeLabel::Age => doc.demographic(Dimension::Age).map(|c| c.name(Dimension::Age).to_string()),
            ProbeLabel::Language => Some(doc.language.clone()).filter(|l| !l.is_empty()),
        }
    }
}

impl FromStr for ProbeLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gender" => Ok(ProbeLabel::Gender),
            "age" => Ok(ProbeLabel::Age),
            "language" => Ok(ProbeLabel::Language),
            _ => Err(Error::UnknownCategory { group: "probe label".into(), value: s.into() }),
        }
    }
}

/// Integer class ids for string labels, with the sorted class names.
pub fn encode_labels(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut names: Vec<String> = labels.to_vec();
    names.sort();
    names.dedup();
    let ids = labels.iter().map(|l| names.binary_search(l).expect("present")).collect();
    (ids, names)
}

fn distance_matrix(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = euclidean(x.row(i), x.row(j));
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

fn check_classes(labels: &[usize]) -> Result<usize> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::InsufficientData(format!("silhouette needs two classes, found {present}")));
    }
    if let Some(c) = counts.iter().position(|&c| c == 1) {
        return Err(Error::InsufficientData(format!("class {c} has a single point")));
    }
    Ok(k)
}

fn silhouette(dist: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let mut sums = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            sums[labels[j]] += dist[[i, j]];
        }
        let own = labels[i];
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    total / n as f64
}

/// Mean silhouette coefficient of `labels` under Euclidean distance.
pub fn separation_score(x: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.len() != x.nrows() {
        return Err(Error::InvalidArgument(format!("{} labels for {} rows", labels.len(), x.nrows())));
    }
    let k = check_classes(labels)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding matrix"));
    }
    Ok(silhouette(&distance_matrix(x), labels, k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationNull {
    pub mean: f64,
    pub std: f64,
    pub scores: Vec<f64>,
}

/// Silhouette scores of `shuffles` random relabelings of `labels`.
pub fn permutation_null(x: &Array2<f64>, labels: &[usize], shuffles: usize, seed: u64) -> Result<PermutationNull> {
    if labels.len() != x.nrows() {
        return Err(Error::InvalidArgument(format!("{} labels for {} rows", labels.len(), x.nrows())));
    }
    let k = check_classes(labels)?;
    if shuffles == 0 {
        return Err(Error::InvalidArgument("shuffles must be positive".into()));
    }
    let dist = distance_matrix(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = labels.to_vec();
    let scores: Vec<f64> = (0..shuffles)
        .map(|_| {
            perm.shuffle(&mut rng);
            silhouette(&dist, &perm, k)
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / shuffles as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (shuffles.max(2) - 1) as f64;
    Ok(PermutationNull { mean, std: var.sqrt(), scores })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self { perplexity: 30.0, iterations: 500, learning_rate: 200.0, exaggeration: 12.0, exaggeration_iters: 100 }
    }
}

/// Conditional neighbour probabilities with per-row precision chosen by
/// bisection to hit `perplexity`.
fn affinities(d2: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d2.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    let mut row = vec![0.0; n];
    for i in 0..n {
        // A duplicate of an earlier point reuses that point's row with the
        // two positions swapped, so duplicates get bit-identical affinities.
        if let Some(k) = (0..i).find(|&k| d2[[i, k]] == 0.0) {
            let mut copy = p.row(k).to_owned();
            copy.swap(i, k);
            p.row_mut(i).assign(&copy);
            continue;
        }
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        let min_d = (0..n).filter(|&j| j != i).map(|j| d2[[i, j]]).fold(f64::INFINITY, f64::min);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d2[[i, j]] - min_d) * beta).exp() };
                sum += row[j];
                weighted += row[j] * (d2[[i, j]] - min_d);
            }
            let entropy = sum.ln() + beta * weighted / sum;
            if (entropy - target).abs() < 1e-6 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[[i, j]] = row[j] / sum;
        }
    }
    let sym = (&p + &p.t()) / (2.0 * n as f64);
    sym.mapv(|v| v.max(1e-12))
}

/// Starting point derived from the row's content, so identical rows start
/// (and stay) together.
fn initial_point(row: ArrayView1<f64>, seed: u64) -> [f64; 2] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for v in row {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    let normal = Normal::new(0.0, 1e-4).expect("valid sd");
    [normal.sample(&mut rng), normal.sample(&mut rng)]
}

/// Exact t-SNE projection to two dimensions; deterministic per seed.
pub fn project_2d(x: &Array2<f64>, seed: u64) -> Result<Array2<f64>> {
    project_2d_with(x, seed, &TsneConfig::default())
}

pub fn project_2d_with(x: &Array2<f64>, seed: u64, config: &TsneConfig) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n < 5 {
        return Err(Error::InsufficientData(format!("projection needs at least 5 points, got {n}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding matrix"));
    }
    let mut d2 = distance_matrix(x);
    d2.mapv_inplace(|v| v * v);
    let perplexity = config.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let p = affinities(&d2, perplexity);

    let mut y = Array2::zeros((n, 2));
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let [a, b] = initial_point(row, seed);
        y[[i, 0]] = a;
        y[[i, 1]] = b;
    }
    let mut velocity: Array2<f64> = Array2::zeros((n, 2));
    let mut gains: Array2<f64> = Array2::ones((n, 2));
    let mut num = Array2::zeros((n, n));
    for it in 0..config.iterations {
        let exag = if it < config.exaggeration_iters { config.exaggeration } else { 1.0 };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dy0 = y[[i, 0]] - y[[j, 0]];
                let dy1 = y[[i, 1]] - y[[j, 1]];
                let q = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                num[[i, j]] = q;
                num[[j, i]] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let (mut g0, mut g1) = (0.0, 0.0);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let q = num[[i, j]];
                let m = (exag * p[[i, j]] - q / z) * q;
                g0 += m * (y[[i, 0]] - y[[j, 0]]);
                g1 += m * (y[[i, 1]] - y[[j, 1]]);
            }
            for (c, g) in [(0, 4.0 * g0), (1, 4.0 * g1)] {
                let gain = &mut gains[[i, c]];
                *gain = if (g > 0.0) != (velocity[[i, c]] > 0.0) { *gain + 0.2 } else { (*gain * 0.8).max(0.01) };
                velocity[[i, c]] = momentum * velocity[[i, c]] - config.learning_rate * *gain * g;
            }
        }
        y += &velocity;
        let mean = y.mean_axis(Axis(0)).expect("n >= 5");
        y -= &mean;
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("projection"));
    }
    Ok(y)
}

/// Score summary written next to the points file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub checkpoint: String,
    pub label_dimension: ProbeLabel,
    pub silhouette: f64,
    pub permutation_null_mean: f64,
    pub permutation_null_std: f64,
    pub n: usize,
}

/// Embeds the labeled documents of `docs`, scores separation under
/// `label` and projects to 2D. Returns the summary, the points and their
/// labels.
pub fn probe(
    model: &Checkpoint,
    docs: &[LabeledDocument],
    label: ProbeLabel,
    shuffles: usize,
    seed: u64,
    tsne: &TsneConfig,
) -> Result<(ProbeSummary, Array2<f64>, Vec<String>)> {
    let kept: Vec<LabeledDocument> = docs.iter().filter(|d| label.of(d).is_some()).cloned().collect();
    let names: Vec<String> = kept.iter().map(|d| label.of(d).expect("filtered")).collect();
    if kept.is_empty() {
        return Err(Error::MissingLabel { label: label.as_str().into(), count: docs.len() });
    }
    let x = embed_corpus(model, &kept)?;
    let (ids, _) = encode_labels(&names);
    let silhouette = separation_score(&x, &ids)?;
    let null = permutation_null(&x, &ids, shuffles, seed)?;
    let points = project_2d_with(&x, seed, tsne)?;
    let summary = ProbeSummary {
        checkpoint: model.digest(),
        label_dimension: label,
        silhouette,
        permutation_null_mean: null.mean,
        permutation_null_std: null.std,
        n: kept.len(),
    };
    Ok((summary, points, names))
}

pub fn write_points_csv(path: &Path, points: &Array2<f64>, labels: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format("points csv", e))?;
    w.write_record(["x", "y", "label"]).map_err(|e| Error::format("points csv", e))?;
    for (row, label) in points.axis_iter(Axis(0)).zip(labels) {
        w.write_record([row[0].to_string(), row[1].to_string(), label.clone()]).map_err(|e| Error::format("points csv", e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
