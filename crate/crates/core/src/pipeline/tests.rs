use super::*;

#[test]
fn depth_ties_go_to_smaller_k() {
    let dev = |k: usize| Some(if k == 10 { 0.2 } else { 0.5 });
    assert_eq!(select_depth(&[70, 30, 10, 50], dev), Some(30));
    assert_eq!(select_depth(&[10, 30], |k| (k == 30).then_some(0.1)), Some(30));
    assert_eq!(select_depth(&[10], |_| None), None);
}

#[test]
fn keys_change_only_downstream() {
    let a = PipelineConfig::synthetic();
    let mut b = a.clone();
    b.dr.seed += 1;
    let (ka, kb) = (Keys::new(&a), Keys::new(&b));
    for s in [Stage::Prepare, Stage::PretrainLm, Stage::TunePrompt, Stage::FilterPrompt, Stage::Generate, Stage::FilterWeak] {
        assert_eq!(ka.of(s), kb.of(s), "{s}");
    }
    assert_ne!(ka.train_dr, kb.train_dr);
    assert_ne!(ka.eval, kb.eval);

    let mut c = a.clone();
    c.splits.train_queries = 10;
    let kc = Keys::new(&c);
    assert_eq!(ka.pretrain, kc.pretrain);
    assert_ne!(ka.prepare, kc.prepare);
    assert_ne!(ka.tune, kc.tune);
}

#[test]
fn stage_dirs_live_under_the_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(PipelineConfig::synthetic(), tmp.path(), Some(tmp.path().join("c"))).unwrap();
    let d = p.stage_dir(Stage::Generate);
    assert!(d.starts_with(tmp.path().join("c").join("generate")));
    assert_ne!(d, p.stage_dir(Stage::FilterWeak));
}

#[test]
fn invalid_config_is_rejected_up_front() {
    let cfg = PipelineConfig {
        conditions: vec![],
        ..PipelineConfig::synthetic()
    };
    assert!(Pipeline::new(cfg, Path::new("unused"), None).is_err());
}
