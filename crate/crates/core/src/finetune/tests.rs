use super::*;
use crate::corpus::{make_split, Tokenizer};
use crate::model::EncoderConfig;
use crate::synthetic::{generate_corpus, DocLength, SyntheticSpec};

fn corpus(marker: f64, per_group: usize, seed: u64) -> Vec<LabeledDocument> {
    generate_corpus(&SyntheticSpec {
        vocab_size: 150,
        doc_length: DocLength::Range([10, 14]),
        marker_rate_a: marker,
        n_docs_per_group: per_group,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn base(docs: &[LabeledDocument]) -> Checkpoint {
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
    Checkpoint::fresh(&cfg, tok, "fresh", 2).unwrap()
}

fn quick(task: Task, epochs: usize) -> FineTuneConfig {
    FineTuneConfig { epochs, batch_size: 16, lr_grid: vec![3e-3], patience: 3, ..FineTuneConfig::new(task) }
}

fn test_docs(docs: &[LabeledDocument], split: &CorpusSplit) -> Vec<LabeledDocument> {
    docs.iter().filter(|d| split.test.contains(&d.id)).cloned().collect()
}

#[test]
fn sentiment_mapping() {
    assert_eq!(sa_label(1).unwrap(), Sentiment::Negative);
    assert_eq!(sa_label(3).unwrap(), Sentiment::Neutral);
    assert_eq!(sa_label(5).unwrap(), Sentiment::Positive);
    assert!(sa_label(2).is_err());
}

#[test]
fn sentiment_head_has_three_outputs() {
    let docs = corpus(0.0, 100, 1);
    let split = make_split(&docs, Dimension::Gender, SplitTask::Sa, 1).unwrap();
    let out = finetune(&base(&docs), &docs, &split, &quick(Task::Sa, 1)).unwrap();
    let w = out.classifier.params.id("head.cls.weight").unwrap();
    assert_eq!(out.classifier.params.get(w).ncols(), 3);
    assert_eq!(out.classifier.classifier.as_ref().unwrap().labels, Sentiment::NAMES);
}

#[test]
fn zero_epochs_leave_the_encoder_untouched() {
    let docs = corpus(0.0, 60, 2);
    let split = make_split(&docs, Dimension::Gender, SplitTask::AcSa, 2).unwrap();
    let b = base(&docs);
    let out = finetune(&b, &docs, &split, &quick(Task::Ac, 0)).unwrap();
    assert_eq!(out.classifier.encoder_params(), b.encoder_params());
    assert!(out.log.is_empty());
}

#[test]
fn topic_detection_needs_five_topics() {
    let docs = generate_corpus(&SyntheticSpec { topic_count: 4, n_docs_per_group: 60, ..SyntheticSpec::default() }).unwrap();
    let opts = crate::corpus::SplitOptions { topics: 4, ..Default::default() };
    let split = crate::corpus::make_split_with(&docs, Dimension::Gender, SplitTask::Td, 1, &opts).unwrap();
    let err = finetune(&base(&docs), &docs, &split, &quick(Task::Td, 1)).unwrap_err();
    assert!(matches!(err, Error::LabelCardinality { expected: 5, found: 4 }));
}

#[test]
fn task_must_match_split() {
    let docs = corpus(0.0, 60, 3);
    let split = make_split(&docs, Dimension::Gender, SplitTask::Sa, 1).unwrap();
    assert!(finetune(&base(&docs), &docs, &split, &quick(Task::Td, 1)).is_err());
}

#[test]
fn attribute_classifier_learns_a_strong_marker() {
    let docs = corpus(0.3, 150, 4);
    let split = make_split(&docs, Dimension::Gender, SplitTask::AcSa, 4).unwrap();
    let out = finetune(&base(&docs), &docs, &split, &quick(Task::Ac, 6)).unwrap();
    let test = test_docs(&docs, &split);
    let eval = evaluate_detailed(&out.classifier, &test, Subset::Mixed).unwrap();
    assert!(eval.accuracy > 0.85, "{eval:?}");
}

#[test]
fn attribute_classifier_without_signal_is_near_chance() {
    let docs = corpus(0.0, 300, 5);
    let split = make_split(&docs, Dimension::Gender, SplitTask::AcSa, 5).unwrap();
    let out = finetune(&base(&docs), &docs, &split, &quick(Task::Ac, 3)).unwrap();
    let test = test_docs(&docs, &split);
    let eval = evaluate_detailed(&out.classifier, &test, Subset::Mixed).unwrap();
    assert!((0.25..=0.65).contains(&eval.f1), "{eval:?}");
    assert!((0.35..=0.65).contains(&eval.accuracy), "{eval:?}");
}

#[test]
fn evaluation_subsets_and_order_invariance() {
    let docs = corpus(0.0, 80, 6);
    let split = make_split(&docs, Dimension::Gender, SplitTask::Sa, 6).unwrap();
    let out = finetune(&base(&docs), &docs, &split, &quick(Task::Sa, 1)).unwrap();
    let mut test = test_docs(&docs, &split);
    let mixed = evaluate_detailed(&out.classifier, &test, Subset::Mixed).unwrap();
    let a = evaluate_detailed(&out.classifier, &test, Subset::ClassA).unwrap();
    let b = evaluate_detailed(&out.classifier, &test, Subset::ClassB).unwrap();
    assert_eq!(a.n + b.n, mixed.n);
    test.reverse();
    assert_eq!(evaluate(&out.classifier, &test, Subset::Mixed).unwrap(), mixed.f1);

    let only_a: Vec<_> = test.iter().filter(|d| d.demographic(Dimension::Gender) == Some(DemClass::A)).cloned().collect();
    assert!(matches!(evaluate(&out.classifier, &only_a, Subset::ClassB), Err(Error::EmptySubset(_))));
}

#[test]
fn classifier_survives_a_disk_round_trip() {
    let docs = corpus(0.0, 60, 7);
    let split = make_split(&docs, Dimension::Gender, SplitTask::Td, 7).unwrap();
    let out = finetune(&base(&docs), &docs, &split, &quick(Task::Td, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.classifier.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    let test = test_docs(&docs, &split);
    assert_eq!(evaluate(&back, &test, Subset::Mixed).unwrap(), evaluate(&out.classifier, &test, Subset::Mixed).unwrap());
}
