use super::*;

fn tiny_run(out: &Path) -> RunConfig {
    let text = r#"
        seed = 3
        precision = "f64"
        threads = 1

        [model]
        d_model = 16
        n_layers = 1
        n_heads = 2
        d_ff = 32

        [data]
        n_train = 24
        n_eval = 12

        [train]
        batch_size = 4
        epochs = 1
        cold_start_steps = 4
        max_new_tokens = 6

        [eval]
        pool_size = 4
        n_seeds = 1

        [diagnostic]
        n_examples = 8

        [sweep]
        enabled = true
        ratios = ["1:1", "0"]
    "#;
    let mut cfg = RunConfig::from_toml(text, &[]).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

#[test]
fn overrides_reach_nested_fields() {
    let o = vec![
        ("train.epochs".to_string(), "7".to_string()),
        ("train.mode".to_string(), "baseline".to_string()),
        ("eval.target_reasoning".to_string(), "true".to_string()),
        ("seed".to_string(), "11".to_string()),
    ];
    let cfg = RunConfig::from_toml("", &o).unwrap();
    assert_eq!(cfg.train.epochs, 7);
    assert_eq!(cfg.train.mode, crate::train::SupervisionMode::Baseline);
    assert!(cfg.eval.target_reasoning);
    assert_eq!(cfg.resolved().model.seed, 11);
    assert_eq!(cfg.comparison_seeds(), vec![11, 12, 13]);
}

#[test]
fn env_variables_map_to_dotted_keys() {
    let vars = vec![
        ("RGE_TRAIN__EPOCHS".to_string(), "2".to_string()),
        ("HOME".to_string(), "/root".to_string()),
        ("RGE_LOG".to_string(), "debug".to_string()),
        ("RGE_SEED".to_string(), "5".to_string()),
    ];
    let o = env_overrides(vars);
    assert_eq!(
        o,
        vec![
            ("seed".to_string(), "5".to_string()),
            ("train.epochs".to_string(), "2".to_string())
        ]
    );
    let cfg = RunConfig::from_toml("", &o).unwrap();
    assert_eq!((cfg.seed, cfg.train.epochs), (5, 2));
}

#[test]
fn bad_configs_are_rejected() {
    assert!(matches!(
        RunConfig::from_toml("bogus = 1", &[]),
        Err(Error::Config(_))
    ));
    assert!(RunConfig::from_toml("[train]\nlearnin_rate = 1", &[]).is_err());
    assert!(RunConfig::from_toml("[model]\nvocab_size = 40", &[]).is_err());
    assert!(RunConfig::from_toml("[eval]\npool_size = 2", &[]).is_err());
    assert!(RunConfig::from_toml("seed = [", &[]).is_err());
    assert!(parse_assignment("novalue").is_err());
    assert_eq!(
        parse_assignment(" a.b = c ").unwrap(),
        ("a.b".into(), "c".into())
    );
    let mut t = toml::Table::new();
    set_path(&mut t, "seed", "1").unwrap();
    assert!(set_path(&mut t, "seed.x", "1").is_err());
    assert!(set_path(&mut t, "a..b", "1").is_err());
}

#[test]
fn fingerprint_tracks_results_relevant_fields() {
    let a = RunConfig::default();
    let mut b = a.clone();
    b.train.learning_rate *= 2.0;
    assert_ne!(a.fingerprint(), b.fingerprint());
    let mut c = a.clone();
    c.out_dir = PathBuf::from("elsewhere");
    c.threads = 4;
    assert_eq!(a.fingerprint(), c.fingerprint());
    assert_eq!(a.fingerprint().len(), 16);
    let round = RunConfig::from_toml(&a.to_toml(), &[]).unwrap();
    assert_eq!(round, a);
}

#[test]
fn missing_inputs_point_at_the_fix() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_split(dir.path(), Split::Train).unwrap_err();
    assert!(matches!(err, Error::Missing(_)));
    assert!(err.to_string().contains("gen-data"));
    assert!(matches!(
        require_checkpoint::<f32>(&dir.path().join("x.ckpt"), "run cold-start first"),
        Err(Error::Missing(_))
    ));
    assert!(write_report(&RunResults::new("f", 0), dir.path()).is_err());
}

#[test]
fn gen_data_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DataConfig {
        n_train: 10,
        n_eval: 5,
        ..DataConfig::default()
    };
    let (train, eval) = gen_data(&cfg, dir.path()).unwrap();
    assert_eq!(load_split(dir.path(), Split::Train).unwrap(), train);
    assert_eq!(load_split(dir.path(), Split::Eval).unwrap(), eval);
    assert!(dir.path().join("vocab.json").exists());
}

#[test]
fn results_merge_and_survive_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = RunResults::new("f", 1);
    a.cold_start = Some(ColdStartSummary {
        steps: 3,
        lm_first: 3.0,
        lm_last: 1.0,
        termination_rate: 1.0,
        n_audited: 2,
    });
    let mut b = RunResults::new("f", 1);
    b.cold_start = None;
    a.merge(b);
    assert!(a.cold_start.is_some());
    let path = dir.path().join("r.json");
    write_json(&path, &a).unwrap();
    assert_eq!(read_json::<RunResults>(&path).unwrap(), a);
    assert_eq!(a.tables().len(), 1);
}

#[test]
fn run_all_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_all(&tiny_run(a.path())).unwrap();
    let rb = run_all(&tiny_run(b.path())).unwrap();
    assert_eq!(ra.fingerprint, rb.fingerprint);
    assert_eq!(ra.results, rb.results);
    assert!(ra.report_files.len() >= 10);
    for (x, y) in ra.report_files.iter().zip(&rb.report_files) {
        assert_eq!(
            std::fs::read(x).unwrap(),
            std::fs::read(y).unwrap(),
            "{}",
            x.display()
        );
    }
    let models = ra.dir.join("models");
    for name in [
        "cold.ckpt",
        "baseline-seed3.ckpt",
        "oracle_leaky-seed3.ckpt",
        "self_generated-seed3.ckpt",
    ] {
        assert_eq!(
            std::fs::read(models.join(name)).unwrap(),
            std::fs::read(rb.dir.join("models").join(name)).unwrap()
        );
    }
    let manifest: Manifest = read_json(&ra.dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.fingerprint, ra.fingerprint);
    assert!(ra.results.sweep.as_ref().unwrap().rows.len() == 2);
}
