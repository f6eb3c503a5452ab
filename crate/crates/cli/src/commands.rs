use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use corrdistill::dimred::{pca_fit, rp_fit, sample_pca_tokens};
use corrdistill::feature_store::{build_knn_index, read_feature_file, read_label_file};
use corrdistill::metrics::{read_csv, write_csv};
use corrdistill::pipeline::{evaluate_representation, run_dim_sweep, train_selected_head, RunManifest, SHUFFLING_POLICY};
use corrdistill::presets::preset;
use corrdistill::synthetic::{generate, SyntheticConfig};
use corrdistill::{
    ExperimentConfig, FeatureMap, HeadParams, ImageRecord, KnnIndex, Manifest, ManifestRecord, MetricRow, PcaModel,
    Preset, ProbeSettings, Representation, RepresentationKind, RpModel, Split,
};

use crate::svg::{line_plot, Axis, Series};
use crate::{
    set, Cli, CliError, Command, EvalArgs, FitPcaArgs, FitRpArgs, IngestArgs, KnnArgs, ReportArgs, SweepArgs, SynthArgs,
    TrainHeadArgs,
};

type Result<T> = std::result::Result<T, CliError>;

/// Settings every command may consult.
struct Ctx {
    seed: u64,
    preset: Preset,
    command: String,
}

pub(crate) fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Run(corrdistill::Error::Contract(format!("thread pool: {e}"))))?;
    let ctx = Ctx {
        seed: cli.seed,
        preset: preset(&cli.preset)?,
        command: command_line(),
    };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Ingest(a) => ingest(a),
        Command::Knn(a) => knn(a),
        Command::TrainHead(a) => train_head(&ctx, a),
        Command::FitPca(a) => fit_pca(&ctx, a),
        Command::FitRp(a) => fit_rp(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Report(a) => report(a),
    }
}

/// The invocation without the program path, for run manifests.
fn command_line() -> String {
    std::env::args().skip(1).collect::<Vec<_>>().join(" ")
}

fn run_manifest_path(out: &Path) -> PathBuf {
    out.with_extension("run.json")
}

fn load(manifest: &Path) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    let m = Manifest::read(manifest)?;
    let train = m.load_split(Split::Train)?;
    let val = m.load_split(Split::Val)?;
    log::info!("{}: {} train, {} val images", manifest.display(), train.len(), val.len());
    Ok((train, val))
}

fn id_maps(images: &[ImageRecord]) -> Vec<(&str, &FeatureMap)> {
    images.iter().map(|r| (r.id.as_str(), &r.features)).collect()
}

fn feature_dim(images: &[ImageRecord]) -> Result<usize> {
    images
        .first()
        .map(|r| r.features.dim())
        .ok_or_else(|| CliError::Run(corrdistill::Error::Size("train split is empty".into())))
}

fn probe_settings(ctx: &Ctx, args: &crate::ProbeArgs) -> ProbeSettings {
    let mut s = ProbeSettings { n_classes: ctx.preset.n_classes, ..ProbeSettings::default() };
    args.apply(&mut s);
    s
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_train: a.n_train,
        n_val: a.n_val,
        height: a.height,
        width: a.width,
        dim: a.dim,
        n_classes: a.classes,
        noise: a.noise,
        image_noise: a.image_noise,
        min_regions: a.min_regions,
        max_regions: a.max_regions,
        label_factor: a.label_factor,
        seed: ctx.seed,
    };
    let data = generate(&cfg)?;
    let path = data.write(&a.out)?;
    fs::write(a.out.join("synthetic.json"), serde_json::to_string_pretty(&cfg).map_err(corrdistill::Error::from)? + "\n")?;
    println!("{}", path.display());
    Ok(())
}

/// Files with the given extension in a directory, sorted by stem.
fn list_files(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Path of `p` relative to `base` when `p` lies under it.
fn relative_to(p: &Path, base: &Path) -> PathBuf {
    let (Ok(p_abs), Ok(b_abs)) = (p.canonicalize(), base.canonicalize()) else {
        return p.to_path_buf();
    };
    p_abs.strip_prefix(&b_abs).map(Path::to_path_buf).unwrap_or(p_abs)
}

fn ingest_split(
    features: &Path,
    labels: Option<&Path>,
    split: Split,
    classes: Option<usize>,
    base: &Path,
    records: &mut Vec<ManifestRecord>,
) -> Result<()> {
    let files = list_files(features, "cdfm")?;
    if files.is_empty() {
        return Err(CliError::Run(corrdistill::Error::Manifest(format!(
            "no .cdfm files in {}",
            features.display()
        ))));
    }
    for (id, fpath) in files {
        let f = read_feature_file(&fpath)?;
        let label_path = match labels {
            Some(dir) => {
                let lpath = dir.join(format!("{id}.cdlm"));
                let l = read_label_file(&lpath)?;
                if l.height() % f.height() != 0 || l.width() % f.width() != 0 {
                    return Err(CliError::Run(corrdistill::Error::Shape(format!(
                        "{id}: labels {}x{} are not a multiple of features {}x{}",
                        l.height(),
                        l.width(),
                        f.height(),
                        f.width()
                    ))));
                }
                if let Some(n) = classes {
                    l.validate_classes(n)?;
                }
                Some(relative_to(&lpath, base))
            }
            None => None,
        };
        records.push(ManifestRecord { id, feature_path: relative_to(&fpath, base), label_path, split });
    }
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    if a.val_labels.is_some() && a.val_features.is_none() {
        return Err(CliError::Usage("--val-labels needs --val-features".into()));
    }
    let base = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    // paths are made relative to the manifest directory, which must exist to resolve
    fs::create_dir_all(&base)?;
    let mut records = Vec::new();
    ingest_split(&a.features, a.labels.as_deref(), Split::Train, a.classes, &base, &mut records)?;
    if let Some(vf) = &a.val_features {
        ingest_split(vf, a.val_labels.as_deref(), Split::Val, a.classes, &base, &mut records)?;
    }
    let manifest = Manifest::new(records, &base)?;
    manifest.check_files()?;
    manifest.write(&a.out)?;
    log::info!("wrote {} records to {}", manifest.records.len(), a.out.display());
    Ok(())
}

fn knn(a: KnnArgs) -> Result<()> {
    let m = Manifest::read(&a.manifest)?;
    let train = m.load_split(Split::Train)?;
    let index = build_knn_index(id_maps(&train), a.k)?;
    index.write_json(&a.out)?;
    Ok(())
}

fn load_or_build_knn(path: Option<&Path>, train: &[ImageRecord]) -> Result<KnnIndex> {
    Ok(match path {
        Some(p) => KnnIndex::read_json(p)?,
        None => build_knn_index(id_maps(train), corrdistill::feature_store::DEFAULT_KNN)?,
    })
}

fn train_head(ctx: &Ctx, a: TrainHeadArgs) -> Result<()> {
    let (train, val) = load(&a.manifest)?;
    let index = load_or_build_knn(a.knn.as_deref(), &train)?;
    let mut tc = ctx.preset.train_config(ctx.seed);
    set(&mut tc.d_stego, a.dim);
    a.train.apply(&mut tc);
    let settings = probe_settings(ctx, &a.probes);
    let (params, step) = train_selected_head(&train, &val, &index, &tc, &settings, a.selection_interval)?;
    params.write(&a.out)?;
    log::info!("kept head from step {step}");
    RunManifest {
        command: ctx.command.clone(),
        preset: Some(ctx.preset.clone()),
        config: serde_json::json!({ "train": tc, "probes": settings, "selection_interval": a.selection_interval, "selected_step": step }),
        seeds: vec![ctx.seed],
        eval_modes: Vec::new(),
        checkpoints: vec![a.out.clone()],
        metrics_csv: None,
        shuffling: SHUFFLING_POLICY.into(),
    }
    .write(&run_manifest_path(&a.out))?;
    Ok(())
}

fn fit_pca(ctx: &Ctx, a: FitPcaArgs) -> Result<()> {
    let m = Manifest::read(&a.manifest)?;
    let train = m.load_split(Split::Train)?;
    let maps: Vec<&FeatureMap> = train.iter().map(|r| &r.features).collect();
    let tokens = sample_pca_tokens(&maps, a.max_images, a.max_tokens, ctx.seed)?;
    let model = pca_fit(&tokens, a.dim)?;
    model.write(&a.out)?;
    if let Some(p) = &a.variance_csv {
        model.write_variance_csv(p)?;
    }
    RunManifest {
        command: ctx.command.clone(),
        preset: None,
        config: serde_json::json!({ "dim": a.dim, "max_images": a.max_images, "max_tokens": a.max_tokens, "tokens": tokens.rows() }),
        seeds: vec![ctx.seed],
        eval_modes: Vec::new(),
        checkpoints: vec![a.out.clone()],
        metrics_csv: None,
        shuffling: SHUFFLING_POLICY.into(),
    }
    .write(&run_manifest_path(&a.out))?;
    Ok(())
}

fn fit_rp(ctx: &Ctx, a: FitRpArgs) -> Result<()> {
    let d_in = match (a.input_dim, &a.manifest) {
        (Some(d), _) => d,
        (None, Some(m)) => {
            let m = Manifest::read(m)?;
            let first = m
                .split(Split::Train)
                .next()
                .ok_or_else(|| CliError::Run(corrdistill::Error::Size("train split is empty".into())))?;
            read_feature_file(&m.resolve(&first.feature_path))?.dim()
        }
        (None, None) => return Err(CliError::Usage("fit-rp needs --input-dim or --manifest".into())),
    };
    let model = rp_fit(d_in, a.dim, ctx.seed)?;
    model.write(&a.out)?;
    RunManifest {
        command: ctx.command.clone(),
        preset: None,
        config: serde_json::json!({ "input_dim": d_in, "dim": a.dim }),
        seeds: vec![ctx.seed],
        eval_modes: Vec::new(),
        checkpoints: vec![a.out.clone()],
        metrics_csv: None,
        shuffling: SHUFFLING_POLICY.into(),
    }
    .write(&run_manifest_path(&a.out))?;
    Ok(())
}

fn load_representation(kind: RepresentationKind, model: Option<&Path>, d_in: usize) -> Result<Representation> {
    let need = || CliError::Usage(format!("--rep {kind} needs --model"));
    Ok(match kind {
        RepresentationKind::Raw => {
            if model.is_some() {
                return Err(CliError::Usage("--rep raw takes no --model".into()));
            }
            Representation::Raw { dim: d_in }
        }
        RepresentationKind::Head => Representation::Head(HeadParams::read(model.ok_or_else(need)?)?),
        RepresentationKind::Pca => Representation::Pca(PcaModel::read(model.ok_or_else(need)?)?),
        RepresentationKind::Rp => Representation::Rp(RpModel::read(model.ok_or_else(need)?)?),
    })
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    if a.rep != RepresentationKind::Raw && a.model.is_none() {
        return Err(CliError::Usage(format!("--rep {} needs --model", a.rep)));
    }
    let (train, val) = load(&a.manifest)?;
    let rep = load_representation(a.rep, a.model.as_deref(), feature_dim(&train)?)?;
    let settings = probe_settings(ctx, &a.probes);
    let outcome = evaluate_representation(&rep, &train, &val, &settings, ctx.seed)?;
    for r in &outcome.rows {
        log::info!("{} d={} {}: accuracy {:.4} mIoU {:.4}", r.method, r.representation_dim, r.probe, r.accuracy, r.miou);
    }
    write_csv(&a.out, &outcome.rows)?;
    let mut checkpoints: Vec<PathBuf> = a.model.iter().cloned().collect();
    if let Some(dir) = &a.probes_dir {
        fs::create_dir_all(dir)?;
        let stem = format!("{}_d{}_s{}", rep.kind(), rep.output_dim(), ctx.seed);
        let cluster = dir.join(format!("cluster_{stem}.cdcp"));
        let linear = dir.join(format!("linear_{stem}.cdlp"));
        outcome.cluster_model.write(&cluster)?;
        outcome.linear_probe.write(&linear)?;
        checkpoints.extend([cluster, linear]);
    }
    RunManifest {
        command: ctx.command.clone(),
        preset: None,
        config: serde_json::json!({ "representation": rep.kind(), "dim": rep.output_dim(), "probes": settings }),
        seeds: vec![ctx.seed],
        eval_modes: vec![outcome.mode],
        checkpoints,
        metrics_csv: Some(a.out.clone()),
        shuffling: SHUFFLING_POLICY.into(),
    }
    .write(&run_manifest_path(&a.out))?;
    Ok(())
}

fn sweep_config(ctx: &Ctx, a: &SweepArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::read(p)?,
        None => {
            let (Some(rep), Some(dims)) = (a.rep, a.dims.clone()) else {
                return Err(CliError::Usage("sweep needs --config or both --rep and --dims".into()));
            };
            ExperimentConfig::from_preset(&ctx.preset, rep, dims, vec![ctx.seed])
        }
    };
    set(&mut cfg.representation, a.rep);
    set(&mut cfg.dims, a.dims.clone());
    set(&mut cfg.seeds, a.seeds.clone());
    set(&mut cfg.selection_interval, a.selection_interval);
    set(&mut cfg.pca_max_images, a.pca_max_images);
    set(&mut cfg.pca_max_tokens, a.pca_max_tokens);
    a.probes.apply(&mut cfg.probes);
    cfg.n_classes = cfg.probes.n_classes;
    if cfg.representation == RepresentationKind::Head && cfg.train.is_none() {
        cfg.train = Some(ctx.preset.train_config(0));
    }
    if let Some(tc) = cfg.train.as_mut() {
        a.train.apply(tc);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> Result<()> {
    let cfg = sweep_config(ctx, &a)?;
    let (train, val) = load(&a.manifest)?;
    let index = match &a.knn {
        Some(p) => Some(KnnIndex::read_json(p)?),
        None => None,
    };
    if let Some(dir) = &a.checkpoints {
        fs::create_dir_all(dir)?;
    }
    let outcome = run_dim_sweep(&cfg, &train, &val, index.as_ref(), a.checkpoints.as_deref())?;
    write_csv(&a.out, &outcome.rows)?;
    RunManifest {
        command: ctx.command.clone(),
        preset: a.config.is_none().then(|| ctx.preset.clone()),
        config: serde_json::json!({ "experiment": cfg, "entries": outcome.entries }),
        seeds: cfg.seeds.clone(),
        eval_modes: outcome.entries.iter().map(|e| e.mode).collect(),
        checkpoints: outcome.entries.iter().filter_map(|e| e.checkpoint.clone()).collect(),
        metrics_csv: Some(a.out.clone()),
        shuffling: SHUFFLING_POLICY.into(),
    }
    .write(&run_manifest_path(&a.out))?;
    Ok(())
}

const METRICS: [&str; 2] = ["accuracy", "miou"];

fn metric(r: &MetricRow, name: &str) -> f64 {
    if name == "accuracy" {
        r.accuracy
    } else {
        r.miou
    }
}

/// Mean over seeds of one metric, per series and dimension.
fn metric_series(rows: &[MetricRow], probe: &str, name: &str) -> Vec<Series> {
    let mut groups: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.probe == probe) {
        let label = if r.split == "val" { r.method.clone() } else { format!("{} ({})", r.method, r.split) };
        groups.entry(label).or_default().entry(r.representation_dim).or_default().push(metric(r, name));
    }
    groups
        .into_iter()
        .map(|(label, dims)| Series {
            label,
            points: dims
                .into_iter()
                .map(|(d, vs)| (d as f64, vs.iter().sum::<f64>() / vs.len() as f64))
                .collect(),
        })
        .collect()
}

fn read_variance_csv(path: &Path) -> Result<Series> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize| {
        CliError::Run(corrdistill::Error::Shape(format!("{}:{line}: expected index,ratio,cumulative", path.display())))
    };
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(bad(i + 1));
        }
        let x: f64 = cols[0].parse().map_err(|_| bad(i + 1))?;
        let y: f64 = cols[2].parse().map_err(|_| bad(i + 1))?;
        points.push((x, y));
    }
    let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("pca").to_string();
    Ok(Series { label, points })
}

fn report(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.inputs {
        rows.extend(read_csv(p)?);
    }
    rows.sort_by(|x, y| {
        (&x.method, x.representation_dim, &x.probe, &x.split, x.seed)
            .cmp(&(&y.method, y.representation_dim, &y.probe, &y.split, y.seed))
    });
    fs::create_dir_all(&a.out_dir)?;
    write_csv(&a.out_dir.join("metrics.csv"), &rows)?;

    let probes: BTreeSet<&str> = rows.iter().map(|r| r.probe.as_str()).collect();
    for probe in probes {
        for name in METRICS {
            let series = metric_series(&rows, probe, name);
            let svg = line_plot(
                &format!("{probe} probe {name}"),
                &Axis { label: "dimension".into(), log: true, range: None },
                &Axis { label: name.into(), log: false, range: Some((0.0, 1.0)) },
                &series,
            );
            fs::write(a.out_dir.join(format!("{probe}_{name}.svg")), svg)?;
        }
    }
    if !a.variance.is_empty() {
        let series = a.variance.iter().map(|p| read_variance_csv(p)).collect::<Result<Vec<_>>>()?;
        let svg = line_plot(
            "cumulative explained variance",
            &Axis { label: "component".into(), log: false, range: None },
            &Axis { label: "cumulative ratio".into(), log: false, range: Some((0.0, 1.0)) },
            &series,
        );
        fs::write(a.out_dir.join("explained_variance.svg"), svg)?;
    }
    Ok(())
}
