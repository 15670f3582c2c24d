use s2ut_core::experiment::{
    default_cells, report_tables, run_pipeline, ArtifactStore, CellSpec, ExperimentConfig,
};
use s2ut_core::targetprep::DatasetMode;

fn tiny(cells: Vec<CellSpec>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.world.corpus_sizes = (16, 4, 4);
    cfg.world.sentence_length_range = (2, 4);
    cfg.unitizer.k = 8;
    cfg.unitizer.n_init = 1;
    cfg.unitizer.fit_utterances = 0;
    cfg.model.encoder_layers = 1;
    cfg.model.decoder_layers = 1;
    cfg.model.hidden_dim = 8;
    cfg.model.attention_heads = 2;
    cfg.model.ffn_dim = 16;
    cfg.train.max_steps = 10;
    cfg.train.warmup_steps = 2;
    cfg.train.eval_every = 5;
    cfg.train.batch_size = 2;
    cfg.train.grad_accum = 1;
    cfg.decode.beam = 2;
    cfg.decode.max_len = 30;
    cfg.cells = cells;
    cfg
}

fn trained_models(store: &ArtifactStore) -> usize {
    std::fs::read_dir(store.root().join("train"))
        .map(|d| d.filter_map(|e| e.ok()).filter(|e| !e.file_name().to_string_lossy().starts_with('.')).count())
        .unwrap_or(0)
}

#[test]
fn single_cell_trains_exactly_one_model() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let cfg = tiny(vec![CellSpec {
        mode: DatasetMode::Single("G".into()),
        seeds: vec![1],
    }]);
    let reports = run_pipeline(&cfg, &store).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].seeds.len(), 1);
    assert!((0.0..=100.0).contains(&reports[0].bleu_mean));
    assert_eq!(trained_models(&store), 1);
}

#[test]
fn report_shape_follows_config() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let cfg = tiny(default_cells(&["B", "E", "G"], &[1, 2]));
    let reports = run_pipeline(&cfg, &store).unwrap();
    let modes: Vec<&str> = reports.iter().map(|r| r.mode.name()).collect();
    assert_eq!(modes, ["single", "single", "single", "combined", "multitask"]);
    for r in &reports {
        assert_eq!(r.seeds.len(), 2);
    }
    let multi = &reports[4];
    assert_eq!(multi.mode.systems(), ["B", "E", "G"]);
    for s in &multi.seeds {
        let branches: Vec<&str> = s.branches.iter().map(|b| b.system_id.as_str()).collect();
        assert_eq!(branches, ["B", "E", "G"]);
        assert_eq!(s.branches.iter().map(|b| b.selected).sum::<usize>(), 4);
    }
    assert_eq!(trained_models(&store), 10);
    let files = report_tables(&reports, &cfg.systems);
    assert_eq!(files.get("seeds.csv").unwrap().lines().count(), 11);
    assert_eq!(files.get("table4.csv").unwrap().lines().count(), 5);
    assert!(files.warnings.is_empty());
}

#[test]
fn fresh_and_cached_runs_give_identical_reports() {
    let cfg = tiny(default_cells(&["E", "G"], &[3]));
    let render = |root: &std::path::Path| {
        let store = ArtifactStore::open(root).unwrap();
        let reports = run_pipeline(&cfg, &store).unwrap();
        (reports.clone(), report_tables(&reports, &cfg.systems).files)
    };
    let dir = tempfile::tempdir().unwrap();
    let first = render(dir.path());
    let cached = render(dir.path());
    assert_eq!(first, cached);
    std::fs::remove_dir_all(dir.path()).unwrap();
    let rebuilt = render(dir.path());
    assert_eq!(first, rebuilt);
}
