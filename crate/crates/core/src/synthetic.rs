//! Synthetic corpora with a known, tunable demographic signal.
//!
//! Every token position independently emits one of: a marker of the
//! document's own demographic group (rate `marker_rate_a`), a marker of the
//! other group (rate `marker_rate_b`), a sentiment word of the document's
//! rating class, a topic word of the document's topic, or a base word drawn
//! from a Zipf-like unigram distribution. Because the two groups mirror each
//! other, the demographic signal vanishes exactly when the two rates agree,
//! and the optimal attribute classifier has a closed form (see
//! [`bayes_optimal_ac`]).

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AgeGroup, DemClass, Dimension, Gender, LabeledDocument};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DocLength {
    Fixed(usize),
    Range([usize; 2]),
}

impl DocLength {
    pub fn bounds(self) -> (usize, usize) {
        match self {
            DocLength::Fixed(l) => (l, l),
            DocLength::Range([lo, hi]) => (lo, hi),
        }
    }
}

const SENTIMENT_NAMES: [&str; 3] = ["neg", "neu", "pos"];
const RATINGS: [u8; 3] = [1, 3, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub doc_length: DocLength,
    /// Per-token rate of markers belonging to the document's own group.
    pub marker_rate_a: f64,
    /// Per-token rate of markers belonging to the other group.
    pub marker_rate_b: f64,
    pub n_marker_tokens: usize,
    pub topic_count: usize,
    pub sentiment_signal: f64,
    pub n_docs_per_group: usize,
    pub seed: u64,
    pub topic_signal: f64,
    /// Sentiment words per rating class.
    pub n_sentiment_tokens: usize,
    /// Topic words per topic.
    pub n_topic_tokens: usize,
    pub dimension: Dimension,
    pub country: String,
    pub language: String,
    pub domain_tag: String,
    /// Prepended to every word; distinct prefixes give disjoint pseudo-languages.
    pub token_prefix: String,
    pub zipf_exponent: f64,
    /// Non-zero values permute base-word frequency ranks, shifting the
    /// unigram distribution while keeping the vocabulary.
    pub domain_shift: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 400,
            doc_length: DocLength::Range([16, 24]),
            marker_rate_a: 0.0,
            marker_rate_b: 0.0,
            n_marker_tokens: 8,
            topic_count: 5,
            sentiment_signal: 0.1,
            n_docs_per_group: 500,
            seed: 0,
            topic_signal: 0.1,
            n_sentiment_tokens: 12,
            n_topic_tokens: 12,
            dimension: Dimension::Gender,
            country: "SYN".into(),
            language: "syn".into(),
            domain_tag: "reviews".into(),
            token_prefix: String::new(),
            zipf_exponent: 1.0,
            domain_shift: 0,
        }
    }
}

impl SyntheticSpec {
    fn signal_vocab(&self) -> usize {
        2 * self.n_marker_tokens
            + SENTIMENT_NAMES.len() * self.n_sentiment_tokens
            + self.topic_count * self.n_topic_tokens
    }

    pub fn base_vocab_size(&self) -> usize {
        self.vocab_size.saturating_sub(self.signal_vocab())
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("marker_rate_a", self.marker_rate_a),
            ("marker_rate_b", self.marker_rate_b),
            ("sentiment_signal", self.sentiment_signal),
            ("topic_signal", self.topic_signal),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!("{name} = {r} outside [0, 1]")));
            }
        }
        let total: f64 = rates.iter().map(|(_, r)| r).sum();
        if total > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!("per-token emission rates sum to {total} > 1")));
        }
        if self.vocab_size < self.signal_vocab() + 1 {
            return Err(Error::InvalidArgument(format!(
                "vocab_size {} leaves no base vocabulary after {} signal words",
                self.vocab_size,
                self.signal_vocab()
            )));
        }
        if (self.marker_rate_a > 0.0 || self.marker_rate_b > 0.0) && self.n_marker_tokens == 0 {
            return Err(Error::InvalidArgument("marker rates need n_marker_tokens > 0".into()));
        }
        if self.sentiment_signal > 0.0 && self.n_sentiment_tokens == 0 {
            return Err(Error::InvalidArgument("sentiment_signal needs n_sentiment_tokens > 0".into()));
        }
        if self.topic_signal > 0.0 && (self.topic_count == 0 || self.n_topic_tokens == 0) {
            return Err(Error::InvalidArgument("topic_signal needs topics with words".into()));
        }
        let (lo, hi) = self.doc_length.bounds();
        if lo == 0 || lo > hi {
            return Err(Error::InvalidArgument(format!("bad doc_length range [{lo}, {hi}]")));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(Error::InvalidArgument("zipf_exponent must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn marker_token(&self, group: DemClass, i: usize) -> String {
        let g = match group {
            DemClass::A => "ga",
            DemClass::B => "gb",
        };
        format!("{}{g}{i}", self.token_prefix)
    }

    pub fn sentiment_token(&self, class: usize, i: usize) -> String {
        format!("{}s{}{i}", self.token_prefix, SENTIMENT_NAMES[class])
    }

    pub fn topic_token(&self, topic: usize, i: usize) -> String {
        format!("{}t{topic}x{i}", self.token_prefix)
    }

    pub fn base_token(&self, i: usize) -> String {
        format!("{}w{i}", self.token_prefix)
    }

    /// Which group's marker vocabulary `token` belongs to, if any.
    pub fn marker_group(&self, token: &str) -> Option<DemClass> {
        let rest = token.strip_prefix(self.token_prefix.as_str())?;
        let (group, idx) = if let Some(i) = rest.strip_prefix("ga") {
            (DemClass::A, i)
        } else if let Some(i) = rest.strip_prefix("gb") {
            (DemClass::B, i)
        } else {
            return None;
        };
        idx.parse::<usize>().ok().filter(|&i| i < self.n_marker_tokens).map(|_| group)
    }
}

fn group_label(doc: &mut LabeledDocument, dimension: Dimension, class: DemClass) {
    match dimension {
        Dimension::Gender => {
            doc.gender = Some(match class {
                DemClass::A => Gender::F,
                DemClass::B => Gender::M,
            })
        }
        Dimension::Age => {
            doc.age_group = Some(match class {
                DemClass::A => AgeGroup::U35,
                DemClass::B => AgeGroup::O45,
            })
        }
    }
}

/// Generates `n_docs_per_group` documents per demographic class. Output is a
/// pure function of the spec.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Vec<LabeledDocument>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_base = spec.base_vocab_size();
    let mut rank_to_word: Vec<usize> = (0..n_base).collect();
    if spec.domain_shift != 0 {
        rank_to_word.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.domain_shift));
    }
    let weights: Vec<f64> = (0..n_base).map(|r| (r as f64 + 1.0).powf(-spec.zipf_exponent)).collect();
    let base = WeightedIndex::new(&weights).expect("positive weights");
    let (lo, hi) = spec.doc_length.bounds();

    let mut docs = Vec::with_capacity(2 * spec.n_docs_per_group);
    for class in [DemClass::A, DemClass::B] {
        let other = match class {
            DemClass::A => DemClass::B,
            DemClass::B => DemClass::A,
        };
        for _ in 0..spec.n_docs_per_group {
            let sentiment = rng.gen_range(0..SENTIMENT_NAMES.len());
            let topic = (spec.topic_count > 0).then(|| rng.gen_range(0..spec.topic_count));
            let len = rng.gen_range(lo..=hi);
            let mut words = Vec::with_capacity(len);
            for _ in 0..len {
                let mut u: f64 = rng.gen();
                let word = if u < spec.marker_rate_a {
                    spec.marker_token(class, rng.gen_range(0..spec.n_marker_tokens))
                } else if {
                    u -= spec.marker_rate_a;
                    u < spec.marker_rate_b
                } {
                    spec.marker_token(other, rng.gen_range(0..spec.n_marker_tokens))
                } else if {
                    u -= spec.marker_rate_b;
                    u < spec.sentiment_signal
                } {
                    spec.sentiment_token(sentiment, rng.gen_range(0..spec.n_sentiment_tokens))
                } else if {
                    u -= spec.sentiment_signal;
                    u < spec.topic_signal
                } {
                    spec.topic_token(topic.expect("validated"), rng.gen_range(0..spec.n_topic_tokens))
                } else {
                    spec.base_token(rank_to_word[base.sample(&mut rng)])
                };
                words.push(word);
            }
            let mut doc = LabeledDocument {
                id: String::new(),
                text: words.join(" "),
                country: spec.country.clone(),
                language: spec.language.clone(),
                gender: None,
                age_group: None,
                rating: Some(RATINGS[sentiment]),
                topic: topic.map(|t| format!("topic{t}")),
                domain_tag: spec.domain_tag.clone(),
            };
            group_label(&mut doc, spec.dimension, class);
            docs.push(doc);
        }
    }
    docs.shuffle(&mut rng);
    for (i, doc) in docs.iter_mut().enumerate() {
        doc.id = format!("{}-{}-{}-{i:06}", spec.country, spec.domain_tag, spec.seed);
    }
    Ok(docs)
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    for i in 1..=n {
        out[i] = out[i - 1] + (i as f64).ln();
    }
    out
}

/// Accuracy of the Bayes-optimal attribute classifier for documents of
/// exactly `len` tokens, by exact enumeration of the (own, other) marker
/// count distribution.
pub fn bayes_optimal_ac_at_length(own: f64, other: f64, len: usize) -> f64 {
    let none = (1.0 - own - other).max(0.0);
    let lf = ln_factorials(len);
    let ln = |p: f64, k: usize| if k == 0 { 0.0 } else if p <= 0.0 { f64::NEG_INFINITY } else { k as f64 * p.ln() };
    let pmf = |a: usize, b: usize, pa: f64, pb: f64| {
        let rest = len - a - b;
        (lf[len] - lf[a] - lf[b] - lf[rest] + ln(pa, a) + ln(pb, b) + ln(none, rest)).exp()
    };
    let mut acc = 0.0;
    for a in 0..=len {
        for b in 0..=len - a {
            // Counts (a, b) of A-markers and B-markers: class A emits A-markers
            // at the own rate, class B at the other rate.
            acc += pmf(a, b, own, other).max(pmf(a, b, other, own));
        }
    }
    (0.5 * acc).clamp(0.5, 1.0)
}

/// Best achievable attribute-classification accuracy on balanced classes,
/// averaged over the document-length range.
pub fn bayes_optimal_ac(spec: &SyntheticSpec) -> Result<f64> {
    spec.validate()?;
    let (lo, hi) = spec.doc_length.bounds();
    let total: f64 = (lo..=hi)
        .map(|l| bayes_optimal_ac_at_length(spec.marker_rate_a, spec.marker_rate_b, l))
        .sum();
    Ok(total / (hi - lo + 1) as f64)
}

/// Own-group marker rate that gives accuracy `(1 + m) / 2` for fixed-length
/// documents with no cross-group markers, i.e. `(1 - q)^len = 1 - m`.
pub fn one_sided_rate_for(m: f64, len: usize) -> f64 {
    1.0 - (1.0 - m).powf(1.0 / len as f64)
}
