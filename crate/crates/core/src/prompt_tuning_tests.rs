use super::*;
use crate::testutil::{pair, sample, tiny_lm};
use crate::text::lm_tokens;

#[test]
fn init_copies_embedding_rows_cyclically() {
    let lm = tiny_lm::<f32>(1, 8, 128);
    let hard = "please generate query for document";
    let five = init_soft_prompt(hard, 5, &lm).unwrap();
    let ids = lm.vocab().encode(hard);
    assert_eq!(ids.len(), 5);
    for (i, &id) in ids.iter().enumerate() {
        assert_eq!(five.theta.row(i), lm.embedding_row(id).unwrap());
    }
    let fifty = init_soft_prompt(hard, 50, &lm).unwrap();
    assert_eq!(fifty.len(), 50);
    for i in 0..50 {
        assert_eq!(fifty.theta.row(i), five.theta.row(i % 5));
    }
    assert!(matches!(init_soft_prompt("zzz qqq", 5, &lm), Err(Error::Config(_))));
    assert!(init_soft_prompt(hard, 0, &lm).is_err());
}

#[test]
fn instance_template_and_mask() {
    let vocab = crate::testutil::vocab();
    let t = pair(0);
    let inst = build_instance(&[], &t, &vocab, 500).unwrap();
    let expected = vocab.encode(&format!("Document: {}\nQuery: {}", t.document, t.query));
    assert_eq!(&inst.ids[..inst.ids.len() - 1], expected.as_slice());
    assert_eq!(*inst.ids.last().unwrap(), EOS);
    let q = lm_tokens(&t.query).len();
    assert_eq!(inst.loss_mask.iter().filter(|&&m| m).count(), q + 1);
    assert!(inst.loss_mask[inst.ids.len() - q - 1..].iter().all(|&m| m));

    let two = build_instance(&[pair(1), pair(2)], &t, &vocab, 500).unwrap();
    let doc = vocab.id("document").unwrap();
    let query = vocab.id("query").unwrap();
    assert_eq!(two.ids.iter().filter(|&&i| i == doc).count(), 3);
    assert_eq!(two.ids.iter().filter(|&&i| i == query).count(), 3);
    assert_eq!(two.meta.examples, vec!["q1/d1", "q2/d2"]);
    assert_eq!(two.meta.target, "q0/d0");
    let first_doc = two.ids.iter().position(|&i| i == doc).unwrap();
    assert_eq!(first_doc, 0);
}

#[test]
fn mask_count_matches_tokenizer_for_many_pairs() {
    let vocab = crate::testutil::vocab();
    for i in 0..40 {
        let inst = build_instance(&[pair(i + 1)], &pair(i), &vocab, 500).unwrap();
        let n = inst.loss_mask.iter().filter(|&&m| m).count();
        assert_eq!(n, vocab.encode(&pair(i).query).len() + 1);
    }
}

#[test]
fn empty_target_query_rejected() {
    let vocab = crate::testutil::vocab();
    let mut t = pair(0);
    t.query = "  ".into();
    assert!(matches!(build_instance(&[], &t, &vocab, 500), Err(Error::Contract(_))));
}

#[test]
fn long_documents_truncated_queries_kept() {
    let vocab = crate::testutil::vocab();
    let mut t = pair(0);
    t.document = "red blue ".repeat(100);
    let ex = pair(1);
    let inst = build_instance(&[ex.clone()], &t, &vocab, 60).unwrap();
    assert_eq!(inst.ids.len(), 60);
    assert!(inst.meta.truncated);
    let q = vocab.encode(&t.query);
    let n = inst.ids.len();
    assert_eq!(&inst.ids[n - q.len() - 1..n - 1], q.as_slice());
    // the short example document survives whole
    let ex_doc = vocab.encode(&ex.document);
    assert_eq!(&inst.ids[2..2 + ex_doc.len()], ex_doc.as_slice());
    assert!(matches!(build_instance(&[ex], &t, &vocab, 10), Err(Error::Length { .. })));
}

#[test]
fn target_document_affects_loss() {
    let lm = tiny_lm::<f64>(2, 16, 128);
    let vocab = lm.vocab();
    let sp = init_soft_prompt(DEFAULT_HARD_PROMPT, 4, &lm).unwrap();
    let inst = build_instance(&[pair(1)], &pair(0), vocab, 120).unwrap();
    let base = lm.lm_loss(Some(&sp.theta), &inst.ids, &inst.loss_mask).unwrap();
    let target_doc_pos = inst.ids.iter().rposition(|&i| i == vocab.id("document").unwrap()).unwrap() + 3;
    let mut ids = inst.ids.clone();
    ids[target_doc_pos] = vocab.id("fish").unwrap();
    assert_ne!(ids, inst.ids);
    assert_ne!(lm.lm_loss(Some(&sp.theta), &ids, &inst.loss_mask).unwrap(), base);
}

#[test]
fn generation_prompt_reserves_room() {
    let vocab = crate::testutil::vocab();
    let mut doc = pair(0).document;
    doc.push_str(&" tree".repeat(200));
    let prompt = build_generation_prompt(&[pair(1)], &doc, &vocab, 100, 20).unwrap();
    assert_eq!(prompt.len(), 80);
    assert_eq!(&prompt[prompt.len() - 2..], vocab.encode("Query:").as_slice());
}

fn frozen_lm() -> DecoderLm<f32> {
    let mut lm = tiny_lm::<f32>(2, 16, 160);
    lm.freeze();
    lm
}

fn quick_cfg() -> TuningConfig {
    TuningConfig {
        examples_per_instance: 2,
        prompt_length: 6,
        max_epochs: 4,
        patience: 2,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn tune_requires_frozen_lm() {
    let mut lm = tiny_lm::<f32>(1, 8, 160);
    lm.unfreeze();
    assert!(matches!(tune(&lm, &sample(0..10), &sample(10..14), &quick_cfg()), Err(Error::Contract(_))));
    lm.freeze();
    let too_few = TuningConfig {
        examples_per_instance: 10,
        ..quick_cfg()
    };
    assert!(matches!(tune(&lm, &sample(0..10), &sample(10..14), &too_few), Err(Error::Config(_))));
}

#[test]
fn tune_touches_only_theta_and_is_deterministic() {
    let lm = frozen_lm();
    let before = lm.params().clone();
    let (sp, report) = tune(&lm, &sample(0..10), &sample(10..14), &quick_cfg()).unwrap();
    assert_eq!(lm.params(), &before);
    let epochs_run = report.epochs.len() - 1;
    assert_eq!(report.steps, 8 * epochs_run as u64);
    let min = report.epochs.iter().map(|e| e.eval_perplexity).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_perplexity, min);
    assert_eq!(report.epochs[report.best_epoch].eval_perplexity, min);
    assert!(report.best_perplexity < report.initial_perplexity());
    assert_ne!(sp.theta, init_soft_prompt(DEFAULT_HARD_PROMPT, 6, &lm).unwrap().theta);
    sp.check_lm(&lm).unwrap();

    let (sp2, report2) = tune(&lm, &sample(0..10), &sample(10..14), &quick_cfg()).unwrap();
    assert_eq!(sp2, sp);
    assert_eq!(report2, report);
}

#[test]
fn batches_average_gradients() {
    let lm = frozen_lm();
    let cfg = TuningConfig {
        batch_size: 4,
        max_epochs: 2,
        ..quick_cfg()
    };
    let (_, report) = tune(&lm, &sample(0..10), &sample(10..14), &cfg).unwrap();
    assert_eq!(report.steps, 2 * (report.epochs.len() as u64 - 1));
}

#[test]
fn stale_lm_detected() {
    let lm = frozen_lm();
    let sp = init_soft_prompt(DEFAULT_HARD_PROMPT, 3, &lm).unwrap();
    let other = tiny_lm::<f32>(1, 16, 160);
    assert!(matches!(sp.check_lm(&other), Err(Error::Stale(_))));
}

#[test]
fn checkpoint_and_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let lm = tiny_lm::<f32>(1, 16, 64);
    let mut sp = init_soft_prompt(DEFAULT_HARD_PROMPT, 7, &lm).unwrap();
    sp.theta = sp.theta.map(|v| v * 1.000_123 + 1e-7);
    let ck = dir.path().join("sp.ckpt");
    sp.save(&ck).unwrap();
    assert_eq!(SoftPrompt::<f32>::load(&ck).unwrap(), sp);

    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    export_prompt_embeddings(&sp, &a).unwrap();
    export_prompt_embeddings(&sp, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let back = read_prompt_embeddings(&a).unwrap();
    assert_eq!(back.shape(), &[7, 16]);
    let first = std::fs::read_to_string(&a).unwrap();
    assert_eq!(first.lines().next().unwrap().split(',').count(), 17);
    for (x, y) in back.data().iter().zip(sp.theta.data()) {
        assert_eq!(*x as f32, *y);
    }
}
