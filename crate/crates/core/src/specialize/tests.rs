use proptest::prelude::*;

use super::*;
use crate::corpus::Tokenizer;
use crate::model::EncoderConfig;
use crate::synthetic::{generate_corpus, DocLength, SyntheticSpec};

#[test]
fn weighted_loss_examples() {
    assert_eq!(weighted_loss(2.0, 0.0).unwrap(), 1.0);
    let v = weighted_loss(4.0, 4f64.ln()).unwrap();
    assert!((v - 1.193_147_180_559_945_3).abs() < 1e-12, "{v}");
}

#[test]
fn combined_loss_examples() {
    let zero = UncertaintyState::default();
    assert_eq!(combined_loss(2.0, 2.0, &zero).unwrap(), 2.0);
    assert_eq!(combined_loss(0.0, 0.0, &zero).unwrap(), 0.0);
    let s = UncertaintyState { eta_mlm: 4f64.ln(), eta_dem: 0.0 };
    assert!((combined_loss(4.0, 1.0, &s).unwrap() - 1.693_147_180_559_945_3).abs() < 1e-12);
}

/// Golden-section search on a unimodal function.
fn argmin(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - r * (hi - lo);
        let b = lo + r * (hi - lo);
        if f(a) < f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn minimizing_eta_recovers_log_loss() {
    for l in [0.1, 0.5, 1.0, 4.0, 30.0] {
        let eta = argmin(|e| weighted_loss(l, e).unwrap(), -10.0, 10.0);
        assert!((eta - f64::ln(l)).abs() < 1e-6, "L={l}: {eta}");
    }
}

#[test]
fn non_finite_inputs_are_rejected() {
    assert!(weighted_loss(f64::NAN, 0.0).is_err());
    assert!(weighted_loss(1.0, f64::INFINITY).is_err());
    assert!(weighted_loss(-1.0, 0.0).is_err());
    assert!(combined_loss(1.0, f64::NAN, &UncertaintyState::default()).is_err());
}

proptest! {
    #[test]
    fn combined_gradient_matches_finite_differences(
        lm in 0.01f64..10.0, ld in 0.01f64..10.0, em in -3.0f64..3.0, ed in -3.0f64..3.0
    ) {
        let s = UncertaintyState { eta_mlm: em, eta_dem: ed };
        let g = combined_loss_grad(lm, ld, &s);
        let h = 1e-6;
        let f = |a: f64, b: f64, c: f64, d: f64| combined_loss(a, b, &UncertaintyState { eta_mlm: c, eta_dem: d }).unwrap();
        let fd = [
            (f(lm + h, ld, em, ed) - f(lm - h, ld, em, ed)) / (2.0 * h),
            (f(lm, ld + h, em, ed) - f(lm, ld - h, em, ed)) / (2.0 * h),
            (f(lm, ld, em + h, ed) - f(lm, ld, em - h, ed)) / (2.0 * h),
            (f(lm, ld, em, ed + h) - f(lm, ld, em, ed - h)) / (2.0 * h),
        ];
        for (a, n) in g.iter().zip(fd) {
            prop_assert!((a - n).abs() <= 1e-5 * a.abs().max(n.abs()) + 1e-9, "{a} vs {n}");
        }
    }

    #[test]
    fn effective_weight_strictly_decreases(a in -20.0f64..20.0, d in 1e-6f64..5.0) {
        prop_assert!(effective_weight(a + d) < effective_weight(a));
    }
}

#[test]
fn eta_converges_to_log_of_constant_loss() {
    for l in [0.5, 1.0, 4.0] {
        let path = fit_eta(l, 0.01, 2000).unwrap();
        let last = *path.last().unwrap();
        assert!((last - f64::ln(l)).abs() <= 0.1, "L={l}: {last}");
    }
}

fn small_corpus(marker: f64, seed: u64) -> Vec<LabeledDocument> {
    let spec = SyntheticSpec {
        vocab_size: 120,
        doc_length: DocLength::Range([10, 14]),
        marker_rate_a: marker,
        n_docs_per_group: 80,
        seed,
        ..SyntheticSpec::default()
    };
    generate_corpus(&spec).unwrap()
}

fn small_base(docs: &[LabeledDocument]) -> Checkpoint {
    let tok = Tokenizer::build(docs.iter().map(|d| d.text.as_str()), 1000);
    let cfg = EncoderConfig {
        vocab_size: tok.vocab_size(),
        hidden_dim: 16,
        num_layers: 1,
        num_heads: 2,
        feedforward_dim: 32,
        max_seq_len: 16,
        dropout: 0.1,
        has_sequence_token: true,
    };
    Checkpoint::fresh(&cfg, tok, "fresh", 1).unwrap()
}

fn quick(method: Method) -> SpecializationConfig {
    SpecializationConfig {
        epochs: 4,
        batch_size: 16,
        lr_grid: vec![3e-3],
        dev_fraction: 0.1,
        ..SpecializationConfig::new(method, Dimension::Gender)
    }
}

#[test]
fn mlm_training_lowers_held_out_loss() {
    let docs = small_corpus(0.0, 3);
    let base = small_base(&docs);
    let out = specialize(&base, &docs, &quick(Method::Mlm)).unwrap();
    let first = out.log[0].dev_objective;
    let best = out.winner().best_dev_objective;
    // the untrained head sits at ln V, the epoch-one value is already lower
    let initial = (base.config.vocab_size as f64).ln();
    assert!(first < initial);
    assert!(best <= 0.95 * initial, "{best} vs {initial}");
    assert!(out.log.iter().all(|r| r.dem_loss.is_none() && r.eta_mlm == 0.0));
    assert!(out.checkpoint.params.id("head.dem.weight").is_none());
    assert_eq!(out.checkpoint.lineage.method, Method::Mlm);
}

#[test]
fn mlm_specialization_is_reproducible() {
    let docs = small_corpus(0.0, 4);
    let base = small_base(&docs);
    let cfg = SpecializationConfig { epochs: 2, ..quick(Method::Mlm) };
    let a = specialize(&base, &docs, &cfg).unwrap();
    let b = specialize(&base, &docs, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.digest(), b.checkpoint.digest());
}

#[test]
fn ds_tok_eta_tracks_plateaued_demographic_loss() {
    // No demographic signal: the demographic loss stays near ln 2 and the
    // log-variance settles at the log of that loss.
    let docs = small_corpus(0.0, 5);
    let base = small_base(&docs);
    let cfg = SpecializationConfig { epochs: 8, patience: 8, eta_lr: Some(0.05), ..quick(Method::DsTok) };
    let out = specialize(&base, &docs, &cfg).unwrap();
    let last = out.log.last().unwrap();
    let c = last.dem_loss.unwrap();
    assert!((c - 2f64.ln()).abs() < 0.05, "dem loss {c}");
    assert!((last.eta_dem - c.ln()).abs() <= 0.1, "eta {} vs ln c {}", last.eta_dem, c.ln());
}

#[test]
fn ds_seq_runs_and_logs_both_losses() {
    let docs = small_corpus(0.3, 6);
    let base = small_base(&docs);
    let out = specialize(&base, &docs, &SpecializationConfig { epochs: 2, ..quick(Method::DsSeq) }).unwrap();
    assert!(out.log.iter().all(|r| r.dem_loss.is_some() && r.dev_objective.is_finite()));
}

#[test]
fn each_learning_rate_is_a_trial() {
    let docs = small_corpus(0.0, 7);
    let base = small_base(&docs);
    let cfg = SpecializationConfig { epochs: 1, lr_grid: vec![1e-6, 3e-3], ..quick(Method::Mlm) };
    let out = specialize(&base, &docs, &cfg).unwrap();
    assert_eq!(out.trials.len(), 2);
    assert_eq!(out.log.len(), 2);
    assert_eq!(out.winner().lr, 3e-3);
}

#[test]
fn demographic_methods_need_labels() {
    let mut docs = small_corpus(0.0, 8);
    docs[3].gender = None;
    let base = small_base(&docs);
    assert!(matches!(specialize(&base, &docs, &quick(Method::DsTok)), Err(Error::MissingLabel { count: 1, .. })));
    assert!(specialize(&base, &docs, &SpecializationConfig { epochs: 1, ..quick(Method::Mlm) }).is_ok());
}

#[test]
fn outcome_round_trips_through_disk() {
    let docs = small_corpus(0.0, 9);
    let base = small_base(&docs);
    let out = specialize(&base, &docs, &SpecializationConfig { epochs: 1, ..quick(Method::Mlm) }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.save(dir.path()).unwrap();
    assert_eq!(read_training_log(&dir.path().join("training_log.jsonl")).unwrap(), out.log);
    assert_eq!(Checkpoint::load(dir.path()).unwrap(), out.checkpoint);
}

#[test]
fn method_names_parse() {
    assert_eq!("ds-tok".parse::<Method>().unwrap(), Method::DsTok);
    assert_eq!("MLM".parse::<Method>().unwrap(), Method::Mlm);
    assert!("gpt".parse::<Method>().is_err());
    assert_eq!(serde_json::to_string(&Method::DsSeq).unwrap(), "\"DS-Seq\"");
}
