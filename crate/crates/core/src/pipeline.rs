//! Evaluation protocol shared by every representation: transform tokens,
//! fit a cluster probe and a linear probe on the train split, score both on
//! the val split. Dimension sweeps repeat this per output dimension.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dimred::{pca_fit, pca_transform, rp_fit, rp_transform, sample_pca_tokens, PcaModel, RpModel};
use crate::error::{Error, Result};
use crate::feature_store::{build_knn_index, pool_labels, upsample_features, FeatureMap, ImageRecord, KnnIndex, LabelMap, DEFAULT_KNN};
use crate::metrics::MetricRow;
use crate::numerics::Matrix;
use crate::presets::{shared_settings, Preset};
use crate::probes::{
    cluster_probe_eval, kmeans_fit, linear_probe_eval, linear_probe_train, ClusterModel, KmeansConfig, LabeledTokens,
    LinearProbe, LinearProbeConfig, ProbeMetrics,
};
use crate::seg_head::{train_head_observed, HeadParams, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepresentationKind {
    Raw,
    Head,
    Pca,
    Rp,
}

impl RepresentationKind {
    pub fn name(self) -> &'static str {
        match self {
            RepresentationKind::Raw => "raw",
            RepresentationKind::Head => "head",
            RepresentationKind::Pca => "pca",
            RepresentationKind::Rp => "rp",
        }
    }
}

impl fmt::Display for RepresentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RepresentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(RepresentationKind::Raw),
            "head" => Ok(RepresentationKind::Head),
            "pca" => Ok(RepresentationKind::Pca),
            "rp" => Ok(RepresentationKind::Rp),
            other => Err(Error::Contract(format!("unknown representation {other:?}"))),
        }
    }
}

/// A per-token map from backbone features to the evaluated space.
#[derive(Clone, Debug)]
pub enum Representation {
    Raw { dim: usize },
    Head(HeadParams),
    Pca(PcaModel),
    Rp(RpModel),
}

impl Representation {
    pub fn kind(&self) -> RepresentationKind {
        match self {
            Representation::Raw { .. } => RepresentationKind::Raw,
            Representation::Head(_) => RepresentationKind::Head,
            Representation::Pca(_) => RepresentationKind::Pca,
            Representation::Rp(_) => RepresentationKind::Rp,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Representation::Raw { dim } => *dim,
            Representation::Head(h) => h.d_in(),
            Representation::Pca(m) => m.d_in(),
            Representation::Rp(m) => m.d_in(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Representation::Raw { dim } => *dim,
            Representation::Head(h) => h.d_out(),
            Representation::Pca(m) => m.d_out(),
            Representation::Rp(m) => m.d_out(),
        }
    }

    pub fn transform(&self, tokens: &Matrix) -> Result<Matrix> {
        match self {
            Representation::Raw { dim } => {
                if tokens.cols() != *dim {
                    return Err(Error::Dimension { context: "raw representation", expected: *dim, found: tokens.cols() });
                }
                Ok(tokens.clone())
            }
            Representation::Head(h) => h.apply(tokens),
            Representation::Pca(m) => pca_transform(tokens, m),
            Representation::Rp(m) => rp_transform(tokens, m),
        }
    }

    /// Transformed feature grid of one image.
    pub fn transform_map(&self, f: &FeatureMap) -> Result<Matrix> {
        self.transform(&f.to_matrix())
    }
}

/// Probe hyperparameters. Seeds come from the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub n_classes: usize,
    pub kmeans_minibatch: usize,
    pub kmeans_steps: usize,
    pub kmeans_restarts: usize,
    pub linear_lr: f64,
    pub linear_steps: usize,
    pub linear_batch: usize,
    /// Validation features are upsampled by this factor when the label grid
    /// is exactly that much finer than the token grid; 1 disables it.
    pub upsample_factor: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            n_classes: 27,
            kmeans_minibatch: 2048,
            kmeans_steps: 500,
            kmeans_restarts: 5,
            linear_lr: shared_settings().probe_lr,
            linear_steps: 1000,
            linear_batch: 512,
            upsample_factor: 8,
        }
    }
}

impl ProbeSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > 255 {
            return Err(Error::Contract(format!("class count {} outside 2..=255", self.n_classes)));
        }
        if self.kmeans_minibatch == 0 || self.kmeans_restarts == 0 || self.linear_batch == 0 || self.upsample_factor == 0 {
            return Err(Error::Contract("probe batch sizes and upsample factor must be >= 1".into()));
        }
        Ok(())
    }

    fn kmeans(&self, seed: u64) -> KmeansConfig {
        KmeansConfig { minibatch: self.kmeans_minibatch, steps: self.kmeans_steps, restarts: self.kmeans_restarts, seed }
    }

    fn linear(&self, seed: u64) -> LinearProbeConfig {
        LinearProbeConfig { lr: self.linear_lr, steps: self.linear_steps, batch: self.linear_batch, seed }
    }
}

/// How validation labels were matched to the token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "factor")]
pub enum EvalMode {
    /// Labels already at token resolution.
    Native,
    /// Features bilinearly upsampled to label resolution.
    Upsampled(usize),
    /// Labels majority-pooled to token resolution.
    Pooled(usize),
}

fn label_ratio(rec: &ImageRecord) -> Result<(usize, &LabelMap)> {
    let labels = rec
        .labels
        .as_ref()
        .ok_or_else(|| Error::Manifest(format!("image {:?} has no labels", rec.id)))?;
    let (fh, fw) = (rec.features.height(), rec.features.width());
    let (lh, lw) = (labels.height(), labels.width());
    if lh % fh != 0 || lw % fw != 0 || lh / fh != lw / fw {
        return Err(Error::Shape(format!(
            "labels {lh}x{lw} of {:?} are not an integer multiple of features {fh}x{fw}",
            rec.id
        )));
    }
    Ok((lh / fh, labels))
}

fn split_ratio(images: &[ImageRecord]) -> Result<usize> {
    let mut ratio = None;
    for rec in images {
        let (r, _) = label_ratio(rec)?;
        match ratio {
            None => ratio = Some(r),
            Some(prev) if prev != r => {
                return Err(Error::Shape(format!("mixed label/feature ratios {prev} and {r} in one split")))
            }
            _ => {}
        }
    }
    ratio.ok_or_else(|| Error::Size("empty split".into()))
}

/// Transformed, label-aligned tokens of both splits.
pub struct PreparedSplits {
    pub train: Vec<LabeledTokens>,
    pub val: Vec<LabeledTokens>,
    pub mode: EvalMode,
}

pub fn prepare_splits(
    rep: &Representation,
    train: &[ImageRecord],
    val: &[ImageRecord],
    settings: &ProbeSettings,
) -> Result<PreparedSplits> {
    settings.validate()?;
    if val.is_empty() {
        return Err(Error::Size("validation split is empty".into()));
    }
    if train.is_empty() {
        return Err(Error::Size("train split is empty".into()));
    }
    split_ratio(train)?;
    let val_ratio = split_ratio(val)?;
    let mode = match val_ratio {
        1 => EvalMode::Native,
        r if r == settings.upsample_factor => EvalMode::Upsampled(r),
        r => EvalMode::Pooled(r),
    };

    let train_tokens = train
        .par_iter()
        .map(|rec| {
            let (ratio, labels) = label_ratio(rec)?;
            let tokens = rep.transform_map(&rec.features)?;
            LabeledTokens::new(tokens, pool_labels(labels, ratio)?.labels().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let val_tokens = val
        .par_iter()
        .map(|rec| {
            let (ratio, labels) = label_ratio(rec)?;
            let tokens = rep.transform_map(&rec.features)?;
            match mode {
                EvalMode::Upsampled(f) => {
                    let grid = FeatureMap::from_matrix(rec.features.height(), rec.features.width(), &tokens)?;
                    LabeledTokens::new(upsample_features(&grid, f)?.to_matrix(), labels.labels().to_vec())
                }
                _ => LabeledTokens::new(tokens, pool_labels(labels, ratio)?.labels().to_vec()),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedSplits { train: train_tokens, val: val_tokens, mode })
}

fn stack_tokens(images: &[LabeledTokens]) -> Result<Matrix> {
    let cols = images[0].tokens.cols();
    let rows: usize = images.iter().map(|i| i.tokens.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for img in images {
        data.extend_from_slice(img.tokens.as_slice());
    }
    Matrix::from_vec(rows, cols, data)
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub rows: Vec<MetricRow>,
    pub mode: EvalMode,
    pub cluster_model: ClusterModel,
    pub linear_probe: LinearProbe,
    pub cluster: ProbeMetrics,
    pub linear: ProbeMetrics,
}

/// Cluster probe only, on already prepared splits.
pub fn cluster_probe_on(prepared: &PreparedSplits, settings: &ProbeSettings, seed: u64) -> Result<(ClusterModel, ProbeMetrics)> {
    let model = kmeans_fit(&stack_tokens(&prepared.train)?, settings.n_classes, &settings.kmeans(seed))?;
    let metrics = cluster_probe_eval(&prepared.val, &model, settings.n_classes)?;
    Ok((model, metrics))
}

/// Fits both probes on the train split and scores them on the val split.
pub fn evaluate_representation(
    rep: &Representation,
    train: &[ImageRecord],
    val: &[ImageRecord],
    settings: &ProbeSettings,
    seed: u64,
) -> Result<EvalOutcome> {
    let prepared = prepare_splits(rep, train, val, settings)?;
    let (cluster_model, cluster) = cluster_probe_on(&prepared, settings, seed)?;
    let linear_probe = linear_probe_train(&prepared.train, settings.n_classes, &settings.linear(seed))?;
    let linear = linear_probe_eval(&prepared.val, &linear_probe)?;
    let row = |probe: &str, m: &ProbeMetrics| MetricRow {
        method: rep.kind().name().to_string(),
        representation_dim: rep.output_dim(),
        probe: probe.to_string(),
        accuracy: m.accuracy,
        miou: m.miou,
        split: "val".to_string(),
        seed,
    };
    Ok(EvalOutcome {
        rows: vec![row("cluster", &cluster), row("linear", &linear)],
        mode: prepared.mode,
        cluster_model,
        linear_probe,
        cluster,
        linear,
    })
}

/// A sweep or evaluation run, as stored in the experiment JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub n_classes: usize,
    pub representation: RepresentationKind,
    pub dims: Vec<usize>,
    pub probes: ProbeSettings,
    /// Head training settings; `d_stego` and `seed` are set per sweep entry.
    pub train: Option<TrainConfig>,
    /// Head checkpoints are scored every this many steps (0: final only).
    pub selection_interval: usize,
    pub pca_max_images: usize,
    pub pca_max_tokens: usize,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_preset(preset: &Preset, representation: RepresentationKind, dims: Vec<usize>, seeds: Vec<u64>) -> Self {
        ExperimentConfig {
            dataset: preset.name.clone(),
            n_classes: preset.n_classes,
            representation,
            dims,
            probes: ProbeSettings { n_classes: preset.n_classes, ..ProbeSettings::default() },
            train: Some(preset.train_config(0)),
            selection_interval: 0,
            pca_max_images: crate::dimred::PCA_MAX_IMAGES,
            pca_max_tokens: crate::dimred::PCA_MAX_TOKENS,
            seeds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Contract("dimension list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Contract("seed list is empty".into()));
        }
        if self.n_classes != self.probes.n_classes {
            return Err(Error::Contract(format!(
                "experiment has {} classes but probes use {}",
                self.n_classes, self.probes.n_classes
            )));
        }
        if self.representation == RepresentationKind::Head && self.train.is_none() {
            return Err(Error::Contract("head sweeps need training settings".into()));
        }
        self.probes.validate()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub seed: u64,
    pub dim: usize,
    pub mode: EvalMode,
    pub checkpoint: Option<PathBuf>,
    /// Training step of the kept head checkpoint.
    pub selected_step: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    pub rows: Vec<MetricRow>,
    pub entries: Vec<SweepEntry>,
}

/// The train images as `(id, features)` pairs.
fn id_maps(train: &[ImageRecord]) -> Vec<(&str, &FeatureMap)> {
    train.iter().map(|r| (r.id.as_str(), &r.features)).collect()
}

/// Trains a head at `d_stego = dim` and keeps the checkpoint with the best
/// validation cluster mIoU (earliest on ties).
pub fn train_selected_head(
    train: &[ImageRecord],
    val: &[ImageRecord],
    knn: &KnnIndex,
    cfg: &TrainConfig,
    settings: &ProbeSettings,
    selection_interval: usize,
) -> Result<(HeadParams, usize)> {
    let maps = id_maps(train);
    let mut candidates: Vec<(usize, HeadParams)> = Vec::new();
    let outcome = train_head_observed(&maps, knn, cfg, |step, params| {
        if selection_interval > 0 && step % selection_interval == 0 && step != cfg.steps {
            candidates.push((step, params.clone()));
        }
        Ok(())
    })?;
    candidates.push((cfg.steps, outcome.params));
    if candidates.len() == 1 {
        let (step, params) = candidates.pop().expect("one candidate");
        return Ok((params, step));
    }
    let mut best: Option<(f64, usize, HeadParams)> = None;
    for (step, params) in candidates {
        let rep = Representation::Head(params);
        let prepared = prepare_splits(&rep, train, val, settings)?;
        let (_, m) = cluster_probe_on(&prepared, settings, cfg.seed)?;
        log::info!("head d={} step {step}: val cluster mIoU {:.4}", cfg.d_stego, m.miou);
        let Representation::Head(params) = rep else { unreachable!() };
        if best.as_ref().is_none_or(|(b, _, _)| m.miou > *b) {
            best = Some((m.miou, step, params));
        }
    }
    let (_, step, params) = best.expect("at least one candidate");
    Ok((params, step))
}

/// Builds the representation for one sweep entry.
#[allow(clippy::too_many_arguments)]
fn sweep_representation(
    cfg: &ExperimentConfig,
    train: &[ImageRecord],
    val: &[ImageRecord],
    knn: Option<&KnnIndex>,
    pca: Option<&PcaModel>,
    d_in: usize,
    dim: usize,
    seed: u64,
) -> Result<(Representation, Option<usize>)> {
    Ok(match cfg.representation {
        RepresentationKind::Raw => {
            if dim != d_in {
                return Err(Error::Dimension { context: "raw sweep dimension", expected: d_in, found: dim });
            }
            (Representation::Raw { dim }, None)
        }
        RepresentationKind::Pca => (Representation::Pca(pca.expect("fitted PCA").truncated(dim)?), None),
        RepresentationKind::Rp => (Representation::Rp(rp_fit(d_in, dim, seed)?), None),
        RepresentationKind::Head => {
            let base = cfg.train.as_ref().expect("validated");
            let tc = TrainConfig { d_stego: dim, seed, ..base.clone() };
            let knn = knn.expect("kNN index for head sweep");
            let (params, step) = train_selected_head(train, val, knn, &tc, &cfg.probes, cfg.selection_interval)?;
            (Representation::Head(params), Some(step))
        }
    })
}

fn checkpoint_name(kind: RepresentationKind, dim: usize, seed: u64) -> Option<String> {
    let ext = match kind {
        RepresentationKind::Raw => return None,
        RepresentationKind::Head => "cdhd",
        RepresentationKind::Pca => "cdpc",
        RepresentationKind::Rp => "cdrp",
    };
    Some(format!("{kind}_d{dim}_s{seed}.{ext}"))
}

/// Evaluates the configured representation at every dimension and seed.
///
/// Entries share no state beyond the PCA eigendecomposition, whose
/// truncation equals a fit at the smaller dimension.
pub fn run_dim_sweep(
    cfg: &ExperimentConfig,
    train: &[ImageRecord],
    val: &[ImageRecord],
    knn: Option<&KnnIndex>,
    checkpoint_dir: Option<&Path>,
) -> Result<SweepOutcome> {
    cfg.validate()?;
    let d_in = train.first().ok_or_else(|| Error::Size("train split is empty".into()))?.features.dim();
    if let Some(&d) = cfg.dims.iter().find(|&&d| d == 0 || d > d_in) {
        return Err(Error::Dimension { context: "sweep dimension", expected: d_in, found: d });
    }
    let built;
    let knn = match (cfg.representation, knn) {
        (RepresentationKind::Head, None) => {
            built = build_knn_index(id_maps(train), DEFAULT_KNN)?;
            Some(&built)
        }
        (_, k) => k,
    };

    let mut out = SweepOutcome::default();
    for &seed in &cfg.seeds {
        let pca = if cfg.representation == RepresentationKind::Pca {
            let maps: Vec<&FeatureMap> = train.iter().map(|r| &r.features).collect();
            let tokens = sample_pca_tokens(&maps, cfg.pca_max_images, cfg.pca_max_tokens, seed)?;
            let max_dim = *cfg.dims.iter().max().expect("non-empty");
            Some(pca_fit(&tokens, max_dim)?)
        } else {
            None
        };
        for &dim in &cfg.dims {
            log::info!("sweep {} d={dim} seed={seed}", cfg.representation);
            let (rep, selected_step) = sweep_representation(cfg, train, val, knn, pca.as_ref(), d_in, dim, seed)?;
            let checkpoint = match (checkpoint_dir, checkpoint_name(rep.kind(), dim, seed)) {
                (Some(dir), Some(name)) => {
                    let path = dir.join(name);
                    match &rep {
                        Representation::Head(h) => h.write(&path)?,
                        Representation::Pca(m) => m.write(&path)?,
                        Representation::Rp(m) => m.write(&path)?,
                        Representation::Raw { .. } => {}
                    }
                    Some(path)
                }
                _ => None,
            };
            let eval = evaluate_representation(&rep, train, val, &cfg.probes, seed)?;
            out.rows.extend(eval.rows);
            out.entries.push(SweepEntry { seed, dim, mode: eval.mode, checkpoint, selected_step });
        }
    }
    Ok(out)
}

/// Provenance record written next to every metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub preset: Option<Preset>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub eval_modes: Vec<EvalMode>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_csv: Option<PathBuf>,
    pub shuffling: String,
}

/// Single shuffling policy used by every sampler.
pub const SHUFFLING_POLICY: &str =
    "ChaCha8 seeded from the run seed; samplers reshuffle their full index list at each epoch boundary";

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::Split;
    use crate::synthetic::{generate, SyntheticConfig};

    fn data(label_factor: usize) -> (Vec<ImageRecord>, Vec<ImageRecord>) {
        let cfg = SyntheticConfig {
            n_train: 12,
            n_val: 4,
            height: 6,
            width: 6,
            dim: 10,
            n_classes: 3,
            noise: 0.2,
            image_noise: 0.0,
            min_regions: 2,
            max_regions: 4,
            label_factor,
            seed: 2,
        };
        let d = generate(&cfg).unwrap();
        let rec = |s: Split| {
            d.split(s)
                .map(|i| ImageRecord { id: i.id.clone(), split: s, features: i.features.clone(), labels: Some(i.labels.clone()) })
                .collect::<Vec<_>>()
        };
        (rec(Split::Train), rec(Split::Val))
    }

    fn settings(upsample: usize) -> ProbeSettings {
        ProbeSettings {
            n_classes: 3,
            kmeans_minibatch: 64,
            kmeans_steps: 40,
            kmeans_restarts: 2,
            linear_lr: 0.005,
            linear_steps: 200,
            linear_batch: 64,
            upsample_factor: upsample,
        }
    }

    #[test]
    fn raw_evaluation_is_deterministic() {
        let (train, val) = data(1);
        let rep = Representation::Raw { dim: 10 };
        let a = evaluate_representation(&rep, &train, &val, &settings(8), 4).unwrap();
        let b = evaluate_representation(&rep, &train, &val, &settings(8), 4).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.mode, EvalMode::Native);
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.rows[0].probe, "cluster");
        assert_eq!(a.rows[1].representation_dim, 10);
        assert!(a.cluster.miou > 0.9, "{}", a.cluster.miou);
    }

    #[test]
    fn eval_mode_follows_label_ratio() {
        let (train, val) = data(2);
        let rep = Representation::Raw { dim: 10 };
        let up = prepare_splits(&rep, &train, &val, &settings(2)).unwrap();
        assert_eq!(up.mode, EvalMode::Upsampled(2));
        assert_eq!(up.val[0].tokens.rows(), 144);
        assert_eq!(up.train[0].tokens.rows(), 36);
        let pooled = prepare_splits(&rep, &train, &val, &settings(8)).unwrap();
        assert_eq!(pooled.mode, EvalMode::Pooled(2));
        assert_eq!(pooled.val[0].labels.len(), 36);
    }

    #[test]
    fn missing_labels_and_empty_val_fail() {
        let (train, mut val) = data(1);
        let rep = Representation::Raw { dim: 10 };
        assert!(evaluate_representation(&rep, &train, &[], &settings(8), 0).is_err());
        val[0].labels = None;
        assert!(matches!(evaluate_representation(&rep, &train, &val, &settings(8), 0), Err(Error::Manifest(_))));
    }

    #[test]
    fn sweep_cardinality_and_resumability() {
        let (train, val) = data(1);
        let mut cfg = ExperimentConfig {
            dataset: "synthetic".into(),
            n_classes: 3,
            representation: RepresentationKind::Rp,
            dims: vec![2, 4, 8],
            probes: settings(8),
            train: None,
            selection_interval: 0,
            pca_max_images: 100,
            pca_max_tokens: 10_000,
            seeds: vec![1],
        };
        for kind in [RepresentationKind::Rp, RepresentationKind::Pca] {
            cfg.representation = kind;
            cfg.dims = vec![2, 4, 8];
            let all = run_dim_sweep(&cfg, &train, &val, None, None).unwrap();
            assert_eq!(all.rows.len(), 6);
            let mut one_by_one = Vec::new();
            for d in [2, 4, 8] {
                cfg.dims = vec![d];
                one_by_one.extend(run_dim_sweep(&cfg, &train, &val, None, None).unwrap().rows);
            }
            assert_eq!(all.rows, one_by_one);
        }
        cfg.representation = RepresentationKind::Raw;
        cfg.dims = vec![10];
        let raw = run_dim_sweep(&cfg, &train, &val, None, None).unwrap();
        let direct = evaluate_representation(&Representation::Raw { dim: 10 }, &train, &val, &settings(8), 1).unwrap();
        assert_eq!(raw.rows, direct.rows);
        cfg.dims = vec![11];
        assert!(run_dim_sweep(&cfg, &train, &val, None, None).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExperimentConfig::from_preset(&crate::presets::potsdam(), RepresentationKind::Head, vec![8, 16], vec![0, 1]);
        let dir = std::env::temp_dir().join(format!("corrdistill-pipeline-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        cfg.write(&dir.join("exp.json")).unwrap();
        assert_eq!(ExperimentConfig::read(&dir.join("exp.json")).unwrap(), cfg);
        assert_eq!(cfg.n_classes, 3);
    }
}
