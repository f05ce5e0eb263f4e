use super::*;
use crate::nn::LayerSpec;

fn blobs_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetConfig {
            name: "blobs".into(),
            source: DatasetSource::Blobs { classes: 8, per_class: 30, dim: 5, separation: 4.0, seed: 3 },
            sha256: vec![],
            scale: false,
        },
        n_known: 6,
        split_seeds: vec![0, 1, 2],
        repeats: 1,
        network: NetworkChoice::Inline(NetworkSpec {
            input_shape: vec![5],
            layers: vec![LayerSpec::Dense { units: 16 }, LayerSpec::BatchNorm, LayerSpec::Relu],
            z_dim: 6,
            head: None,
        }),
        losses: vec![BaseLoss::Ii, BaseLoss::CrossEntropy],
        extensions: vec![Extension::None, Extension::Mmf],
        lambda: None,
        train: TrainSettings {
            iterations: 20,
            batch_size: 32,
            learning_rate: 0.01,
            optimizer: OptimizerKind::default(),
            contamination: 0.01,
            margin: DEFAULT_MARGIN,
        },
        output_dir: dir.to_path_buf(),
    }
}

#[test]
fn presets_expand_published_settings() {
    let mnist = ExperimentConfig::preset("mnist").unwrap();
    assert_eq!(mnist.train.learning_rate, 0.001);
    assert_eq!(mnist.loss_config(BaseLoss::Ii, Extension::Mmf).lambda, 0.2);
    assert_eq!(mnist.loss_config(BaseLoss::Triplet, Extension::Mmf).lambda, 0.5);
    let mc = ExperimentConfig::preset("mc").unwrap();
    assert_eq!(mc.loss_config(BaseLoss::Ii, Extension::Mmf).lambda, 0.5);
    assert_eq!(mc.loss_config(BaseLoss::Triplet, Extension::Mmf).lambda, 0.3);
    assert!(mc.dataset.scale);
    let ag = ExperimentConfig::preset("ag").unwrap();
    assert_eq!(ag.train.learning_rate, 0.1);
    assert_eq!(ag.loss_config(BaseLoss::Triplet, Extension::Mmf).lambda, 0.4);
    assert_eq!(ag.network.resolve().unwrap(), NetworkSpec::ag());
    assert!(ExperimentConfig::preset("mnist-mlp").is_ok());
    assert!(ExperimentConfig::preset("imagenet").is_err());
}

#[test]
fn explicit_lambda_overrides_defaults_but_not_ce() {
    let mut cfg = ExperimentConfig::preset("mnist").unwrap();
    cfg.lambda = Some(0.7);
    assert_eq!(cfg.loss_config(BaseLoss::Ii, Extension::Mmf).lambda, 0.7);
    assert_eq!(cfg.loss_config(BaseLoss::CrossEntropy, Extension::Mmf).lambda, 1.0);
}

#[test]
fn config_json_round_trip_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blobs_config(dir.path());
    let text = serde_json::to_string(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(config_hash(&back), config_hash(&cfg));
    let mut other = cfg.clone();
    other.repeats = 2;
    assert_ne!(config_hash(&other), config_hash(&cfg));
}

#[test]
fn splits_are_idempotent_and_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blobs_config(dir.path());
    let ds = load_dataset(&cfg.dataset).unwrap();
    let paths = write_splits(&cfg, &ds).unwrap();
    assert_eq!(paths.len(), 3);
    let first: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
    write_splits(&cfg, &ds).unwrap();
    let second: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(first, second);
    for &seed in &cfg.split_seeds {
        let split = read_split(&cfg, &ds, seed).unwrap();
        assert!(split.train.indices.iter().all(|i| !split.test.indices.contains(i)));
        let mut known: Vec<usize> = split.train.original_labels.clone();
        known.sort_unstable();
        known.dedup();
        assert_eq!(known.len(), 6);
    }
}

#[test]
fn grid_trains_evaluates_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blobs_config(dir.path());
    cfg.validate().unwrap();
    let ds = load_dataset(&cfg.dataset).unwrap();
    write_splits(&cfg, &ds).unwrap();

    let missing = evaluate_runs(&cfg, &ds).unwrap_err().to_string();
    assert!(missing.contains("12 run(s) missing") && missing.contains("ce+mmf split 2 repeat 0"), "{missing}");

    for key in cfg.grid() {
        let split = read_split(&cfg, &ds, key.split_seed).unwrap();
        let rec = train_run(&cfg, &split, key, |_| {}).unwrap();
        let steps_per_iter = if key.loss == BaseLoss::CrossEntropy && key.extension == Extension::Mmf { 2 } else { 1 };
        assert_eq!(rec.optimizer_steps, (steps_per_iter * cfg.train.iterations) as u64);
        assert!(rec.final_base_loss.is_finite());
    }
    let reports = evaluate_runs(&cfg, &ds).unwrap();
    assert_eq!(reports.len(), 2 * 2 * 3);
    let [report, aggregate, significance] = write_eval_outputs(&cfg, &reports).unwrap();
    assert_eq!(eval::read_report_csv(&report).unwrap().len(), 12);
    let agg = std::fs::read_to_string(aggregate).unwrap();
    assert_eq!(agg.lines().count(), 1 + 4);
    let sig = std::fs::read_to_string(significance).unwrap();
    assert!(sig.lines().any(|l| l.starts_with("blobs,ii,mmf,auc_full,3,")), "{sig}");
    assert!(sig.lines().any(|l| l.starts_with("blobs,ce,mmf,auc_full,3,")), "{sig}");
}

#[test]
fn provenance_records_hash_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = blobs_config(dir.path());
    let p = Provenance::new("train", &cfg).unwrap();
    assert!(p.dataset_files.is_empty());
    let path = p.write(dir.path()).unwrap();
    assert_eq!(Provenance::read(&path).unwrap(), p);

    let file = dir.path().join("f.csv");
    std::fs::write(&file, "label,f0\n0,1\n").unwrap();
    cfg.dataset.source = DatasetSource::FeatureCsv { path: file.clone(), features: 1 };
    let p = Provenance::new("split", &cfg).unwrap();
    assert_eq!(p.dataset_files, vec![(file, data::sha256_file(dir.path().join("f.csv")).unwrap())]);
}

#[test]
fn checksum_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("f.csv");
    std::fs::write(&file, "label,f0\n0,1\n").unwrap();
    let cfg = DatasetConfig {
        name: "x".into(),
        source: DatasetSource::FeatureCsv { path: file, features: 1 },
        sha256: vec!["00".into()],
        scale: false,
    };
    assert!(matches!(load_dataset(&cfg), Err(Error::Data(data::DataError::Checksum { .. }))));
}

#[test]
fn invalid_grid_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = blobs_config(dir.path());
    cfg.split_seeds.clear();
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = blobs_config(dir.path());
    cfg.lambda = Some(2.0);
    assert!(cfg.validate().is_err());
    let mut cfg = blobs_config(dir.path());
    cfg.network = NetworkChoice::Preset("nope".into());
    assert!(cfg.validate().is_err());
}
