use corrdistill::dimred::{pca_fit, sample_pca_tokens};
use corrdistill::pipeline::{evaluate_representation, run_dim_sweep};
use corrdistill::presets::cocostuff;
use corrdistill::synthetic::{generate, SyntheticConfig};
use corrdistill::{
    ExperimentConfig, FeatureMap, HeadParams, ImageRecord, Manifest, PcaModel, ProbeSettings, Representation,
    RepresentationKind, Split,
};

fn config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_train: 30,
        n_val: 10,
        height: 10,
        width: 10,
        dim: 16,
        n_classes: 4,
        noise: 0.3,
        image_noise: 0.0,
        min_regions: 2,
        max_regions: 4,
        label_factor: 2,
        seed,
    }
}

fn settings() -> ProbeSettings {
    ProbeSettings {
        n_classes: 4,
        kmeans_minibatch: 1024,
        kmeans_steps: 100,
        kmeans_restarts: 3,
        linear_steps: 200,
        ..ProbeSettings::default()
    }
}

fn on_disk(seed: u64) -> (tempfile::TempDir, Vec<ImageRecord>, Vec<ImageRecord>) {
    let dir = tempfile::tempdir().unwrap();
    let path = generate(&config(seed)).unwrap().write(dir.path()).unwrap();
    let m = Manifest::read(&path).unwrap();
    m.check_files().unwrap();
    let train = m.load_split(Split::Train).unwrap();
    let val = m.load_split(Split::Val).unwrap();
    (dir, train, val)
}

#[test]
fn files_on_disk_match_generated_dataset() {
    let (_dir, train, val) = on_disk(1);
    let d = generate(&config(1)).unwrap();
    assert_eq!(train.len() + val.len(), d.images.len());
    for (rec, img) in train.iter().chain(&val).zip(&d.images) {
        assert_eq!(rec.id, img.id);
        assert_eq!(rec.features, img.features);
        assert_eq!(rec.labels.as_ref(), Some(&img.labels));
    }
}

#[test]
fn separable_data_is_recovered_by_both_probes() {
    let (_dir, train, val) = on_disk(2);
    let out = evaluate_representation(&Representation::Raw { dim: 16 }, &train, &val, &settings(), 0).unwrap();
    assert!(out.cluster.miou >= 0.9, "cluster mIoU {}", out.cluster.miou);
    assert!(out.linear.miou >= 0.9, "linear mIoU {}", out.linear.miou);
    assert_eq!(out.rows.len(), 2);
}

#[test]
fn raw_sweep_ignores_checkpoints_and_equals_single_evaluation() {
    let (dir, train, val) = on_disk(3);
    let ck = dir.path().join("ck");
    std::fs::create_dir_all(&ck).unwrap();
    // a stray head checkpoint must not influence raw evaluation
    HeadParams::zeros(16, 3, 0.1).unwrap().write(&ck.join("head_d3_s0.cdhd")).unwrap();

    let mut cfg = ExperimentConfig::from_preset(&cocostuff(), RepresentationKind::Raw, vec![16], vec![0]);
    cfg.n_classes = 4;
    cfg.probes = settings();
    let sweep = run_dim_sweep(&cfg, &train, &val, None, Some(&ck)).unwrap();
    let single = evaluate_representation(&Representation::Raw { dim: 16 }, &train, &val, &settings(), 0).unwrap();
    assert_eq!(sweep.rows, single.rows);
    assert_eq!(std::fs::read_dir(&ck).unwrap().count(), 1);
    assert!(sweep.entries[0].checkpoint.is_none());
}

#[test]
fn sweep_checkpoints_reproduce_their_rows() {
    let (dir, train, val) = on_disk(4);
    let ck = dir.path().join("ck");
    std::fs::create_dir_all(&ck).unwrap();
    let mut cfg = ExperimentConfig::from_preset(&cocostuff(), RepresentationKind::Head, vec![3], vec![5]);
    cfg.n_classes = 4;
    cfg.probes = settings();
    let train_cfg = cfg.train.as_mut().unwrap();
    train_cfg.steps = 6;
    train_cfg.batch_size = 4;
    train_cfg.pair.feature_samples = 5;
    let out = run_dim_sweep(&cfg, &train, &val, None, Some(&ck)).unwrap();
    let path = out.entries[0].checkpoint.clone().unwrap();
    let head = HeadParams::read(&path).unwrap();
    assert_eq!(head.d_out(), 3);
    let again = evaluate_representation(&Representation::Head(head), &train, &val, &cfg.probes, 5).unwrap();
    assert_eq!(again.rows, out.rows);
}

#[test]
fn truncated_pca_equals_direct_fit() {
    let (dir, train, _) = on_disk(5);
    let maps: Vec<&FeatureMap> = train.iter().map(|r| &r.features).collect();
    let tokens = sample_pca_tokens(&maps, 100, 10_000, 0).unwrap();
    let full = pca_fit(&tokens, 12).unwrap();
    let direct = pca_fit(&tokens, 5).unwrap();
    assert_eq!(full.truncated(5).unwrap(), direct);

    let p = dir.path().join("pca.cdpc");
    direct.write(&p).unwrap();
    assert_eq!(PcaModel::read(&p).unwrap(), direct);
}
