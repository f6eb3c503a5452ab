//! Evaluation probes on frozen token features: cosine k-means with a
//! Hungarian cluster-to-class mapping, and a softmax linear classifier.
//!
//! Probes only read features; nothing here feeds back into the head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::feature_store::IGNORE_LABEL;
use crate::metrics::{hungarian, ConfusionMatrix};
use crate::numerics::{dot, l2_normalize_rows, AdamState, Matrix, ParamBlock, NORM_EPS};

pub const CLUSTER_MAGIC: &[u8; 4] = b"CDCP";
pub const LINEAR_MAGIC: &[u8; 4] = b"CDLP";

/// Tokens of one image with one label per token.
#[derive(Clone, Debug)]
pub struct LabeledTokens {
    pub tokens: Matrix,
    pub labels: Vec<u8>,
}

impl LabeledTokens {
    pub fn new(tokens: Matrix, labels: Vec<u8>) -> Result<Self> {
        if tokens.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} labels",
                tokens.rows(),
                labels.len()
            )));
        }
        Ok(LabeledTokens { tokens, labels })
    }
}

/// Metrics of one probe on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeMetrics {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub miou: f64,
}

impl ProbeMetrics {
    fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        Ok(ProbeMetrics {
            accuracy: confusion.accuracy()?,
            miou: confusion.miou()?,
            confusion,
        })
    }
}

fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension { context, expected, found });
    }
    Ok(())
}

/// Sums per-image confusion matrices in image order.
fn confusion_over<F>(images: &[LabeledTokens], n_classes: usize, predict: F) -> Result<ConfusionMatrix>
where
    F: Fn(&Matrix) -> Result<Vec<usize>> + Sync,
{
    let parts: Vec<Result<ConfusionMatrix>> = images
        .par_iter()
        .map(|img| {
            let mut cm = ConfusionMatrix::new(n_classes);
            cm.accumulate(&predict(&img.tokens)?, &img.labels)?;
            Ok(cm)
        })
        .collect();
    let mut total = ConfusionMatrix::new(n_classes);
    for p in parts {
        total.merge(&p?)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub minibatch: usize,
    pub steps: usize,
    /// Independent initializations; the fit with the highest objective wins.
    pub restarts: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    /// `N_C × D`, unit rows.
    pub centroids: Matrix,
    pub counts: Vec<u64>,
}

impl ClusterModel {
    pub fn n_clusters(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(CLUSTER_MAGIC);
        w.u32(self.n_clusters() as u32).u32(self.dim() as u32).f64s(self.centroids.as_slice());
        for &c in &self.counts {
            w.u64(c);
        }
        w.save(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let name = path.display().to_string();
        let mut r = Reader::open(&bytes, CLUSTER_MAGIC, &name)?;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        if k == 0 || d == 0 {
            return Err(r.err(FormatError::InvalidHeader("zero cluster count or dimension".into())));
        }
        r.require((k * d + k) * 8)?;
        let centroids = Matrix::from_vec(k, d, r.f64s(k * d)?)?;
        let counts = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(ClusterModel { centroids, counts })
    }
}

/// Index of the centroid with the highest cosine similarity, ties to the lowest id.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Cosine similarity of every token to every centroid (`N × N_C`).
fn centroid_similarity(tokens: &Matrix, centroids: &Matrix) -> Result<Matrix> {
    check_dim("cluster assignment", centroids.cols(), tokens.cols())?;
    let (unit, _) = l2_normalize_rows(tokens, NORM_EPS);
    unit.matmul_bt(centroids)
}

pub fn kmeans_assign(tokens: &Matrix, model: &ClusterModel) -> Result<Vec<usize>> {
    let sim = centroid_similarity(tokens, &model.centroids)?;
    Ok((0..sim.rows()).into_par_iter().map(|i| argmax(sim.row(i))).collect())
}

/// Mean over tokens of the best cosine similarity to any centroid.
pub fn kmeans_objective(tokens: &Matrix, model: &ClusterModel) -> Result<f64> {
    let sim = centroid_similarity(tokens, &model.centroids)?;
    if sim.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..sim.rows()).map(|i| sim.row(i)[argmax(sim.row(i))]).sum();
    Ok(total / sim.rows() as f64)
}

/// Mini-batch cosine k-means.
///
/// Centroids start at `n_clusters` distinct data directions picked by
/// k-means++ seeding under the cosine distance. Each batch moves
/// a centroid to `(count·c + Σx) / (count + n)` (per-centroid rate 1/count)
/// and renormalizes. After every full pass, a centroid that received no
/// tokens is moved onto the token least similar to its current centroid.
///
/// Restart `r` draws from stream `r` of the seeded generator; ties in the
/// objective go to the earlier restart.
pub fn kmeans_fit(tokens: &Matrix, n_clusters: usize, cfg: &KmeansConfig) -> Result<ClusterModel> {
    if n_clusters == 0 || cfg.minibatch == 0 || cfg.restarts == 0 {
        return Err(Error::Contract("cluster count, minibatch and restarts must be positive".into()));
    }
    let (unit, degenerate) = l2_normalize_rows(tokens, NORM_EPS);
    let mut best: Option<(f64, ClusterModel)> = None;
    for r in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64);
        let model = kmeans_run(&unit, &degenerate, n_clusters, cfg, &mut rng)?;
        if cfg.restarts == 1 {
            return Ok(model);
        }
        let obj = kmeans_objective(&unit, &model)?;
        log::debug!("k-means restart {r}: objective {obj:.6}");
        if best.as_ref().is_none_or(|(b, _)| obj > *b) {
            best = Some((obj, model));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn kmeans_run(
    unit: &Matrix,
    degenerate: &[usize],
    n_clusters: usize,
    cfg: &KmeansConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClusterModel> {
    let n = unit.rows();
    let d = unit.cols();

    let chosen = seed_centroids(unit, degenerate, n_clusters, rng)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut model = ClusterModel {
        centroids: unit.select_rows(&chosen),
        counts: vec![0; n_clusters],
    };

    let mut cursor = n;
    let mut seen = vec![false; n_clusters];
    let mut sums = Matrix::zeros(n_clusters, d);
    let mut members = vec![0u64; n_clusters];
    for _ in 0..cfg.steps {
        if cursor >= n {
            order.shuffle(rng);
            cursor = 0;
        }
        let end = (cursor + cfg.minibatch).min(n);
        let batch = unit.select_rows(&order[cursor..end]);
        cursor = end;

        let sim = batch.matmul_bt(&model.centroids)?;
        sums.as_mut_slice().fill(0.0);
        members.fill(0);
        for i in 0..batch.rows() {
            let k = argmax(sim.row(i));
            members[k] += 1;
            seen[k] = true;
            for (s, x) in sums.row_mut(k).iter_mut().zip(batch.row(i)) {
                *s += x;
            }
        }
        for k in 0..n_clusters {
            if members[k] == 0 {
                continue;
            }
            let old = model.counts[k] as f64;
            let total = old + members[k] as f64;
            let c: Vec<f64> = model
                .centroids
                .row(k)
                .iter()
                .zip(sums.row(k))
                .map(|(c, s)| (old * c + s) / total)
                .collect();
            let len = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if len > NORM_EPS {
                for (dst, v) in model.centroids.row_mut(k).iter_mut().zip(&c) {
                    *dst = v / len;
                }
            }
            model.counts[k] += members[k];
        }

        if cursor >= n {
            reseed_empty(unit, &mut model, &seen)?;
            seen.fill(false);
        }
    }
    Ok(model)
}

/// Tokens considered when seeding centroids.
const SEED_POOL: usize = 65_536;

/// k-means++ seeding with distance `1 − cos`: the first centroid is a uniform
/// draw, each further one is drawn with probability proportional to the
/// squared distance to the nearest chosen centroid.
fn seed_centroids(unit: &Matrix, degenerate: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let valid: Vec<usize> = (0..unit.rows()).filter(|i| degenerate.binary_search(i).is_err()).collect();
    let pool: Vec<usize> = if valid.len() > SEED_POOL {
        let mut pick = rand::seq::index::sample(rng, valid.len(), SEED_POOL).into_vec();
        pick.sort_unstable();
        pick.into_iter().map(|i| valid[i]).collect()
    } else {
        valid
    };
    let distinct_error = |found: usize| {
        Error::Degenerate(format!("{found} distinct token directions for {k} clusters"))
    };
    if pool.is_empty() {
        return Err(distinct_error(0));
    }
    let mut chosen = vec![pool[rng.random_range(0..pool.len())]];
    let mut dist: Vec<f64> = vec![f64::INFINITY; pool.len()];
    while chosen.len() < k {
        let last = unit.row(*chosen.last().expect("non-empty"));
        let mut total = 0.0;
        for (d, &i) in dist.iter_mut().zip(&pool) {
            let mut gap = 1.0 - dot(unit.row(i), last);
            if gap < 1e-12 {
                gap = 0.0;
            }
            *d = d.min(gap * gap);
            total += *d;
        }
        if total <= 0.0 {
            return Err(distinct_error(chosen.len()));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (p, &d) in dist.iter().enumerate() {
            if d > 0.0 {
                acc += d;
                pick = Some(p);
                if acc > target {
                    break;
                }
            }
        }
        chosen.push(pool[pick.expect("positive total weight")]);
    }
    Ok(chosen)
}

fn reseed_empty(unit: &Matrix, model: &mut ClusterModel, seen: &[bool]) -> Result<()> {
    if seen.iter().all(|&s| s) {
        return Ok(());
    }
    let sim = unit.matmul_bt(&model.centroids)?;
    let mut best: Vec<(f64, usize)> = (0..sim.rows())
        .map(|i| (sim.row(i)[argmax(sim.row(i))], i))
        .collect();
    best.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut next = best.into_iter().map(|(_, i)| i);
    for (k, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
        let Some(i) = next.next() else { break };
        model.centroids.row_mut(k).copy_from_slice(unit.row(i));
        model.counts[k] = 1;
    }
    Ok(())
}

/// Clusters every token, maps clusters to classes with the profit-maximizing
/// assignment over pixel counts, and scores the remapped predictions.
pub fn cluster_probe_eval(images: &[LabeledTokens], model: &ClusterModel, n_classes: usize) -> Result<ProbeMetrics> {
    if model.n_clusters() != n_classes {
        return Err(Error::Dimension {
            context: "cluster probe classes",
            expected: n_classes,
            found: model.n_clusters(),
        });
    }
    let raw = confusion_over(images, n_classes, |t| kmeans_assign(t, model))?;
    if raw.total() == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let assignment = hungarian(&raw.as_profit())?;
    ProbeMetrics::from_confusion(raw.permute_rows(&assignment.perm)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbeConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

/// Per-token softmax classifier, logits = `W·t + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `N_C × D`
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        LinearProbe {
            w: Matrix::zeros(n_classes, dim),
            b: vec![0.0; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn logits(&self, tokens: &Matrix) -> Result<Matrix> {
        check_dim("linear probe", self.dim(), tokens.cols())?;
        let mut z = tokens.matmul_bt(&self.w)?;
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        Ok(z)
    }

    /// Argmax class per token, ties to the lowest class id.
    pub fn predict(&self, tokens: &Matrix) -> Result<Vec<usize>> {
        let z = self.logits(tokens)?;
        Ok((0..z.rows()).map(|i| argmax(z.row(i))).collect())
    }

    /// Mean cross-entropy over non-ignored tokens and its gradient `(dW, db)`.
    pub fn loss_and_grad(&self, tokens: &Matrix, labels: &[u8]) -> Result<(f64, Matrix, Vec<f64>)> {
        if tokens.rows() != labels.len() {
            return Err(Error::Shape(format!("{} tokens but {} labels", tokens.rows(), labels.len())));
        }
        let n_c = self.n_classes();
        let z = self.logits(tokens)?;
        let mut dw = Matrix::zeros(n_c, self.dim());
        let mut db = vec![0.0; n_c];
        let mut loss = 0.0;
        let mut used = 0usize;
        let mut p = vec![0.0; n_c];
        for (i, &y) in labels.iter().enumerate() {
            if y == IGNORE_LABEL {
                continue;
            }
            let y = y as usize;
            if y >= n_c {
                return Err(Error::Contract(format!("label {y} out of range for {n_c} classes")));
            }
            let row = z.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for (pk, &zk) in p.iter_mut().zip(row) {
                *pk = (zk - m).exp();
                s += *pk;
            }
            loss += s.ln() + m - row[y];
            p.iter_mut().for_each(|v| *v /= s);
            p[y] -= 1.0;
            let t = tokens.row(i);
            for k in 0..n_c {
                db[k] += p[k];
                for (g, x) in dw.row_mut(k).iter_mut().zip(t) {
                    *g += p[k] * x;
                }
            }
            used += 1;
        }
        if used == 0 {
            return Ok((0.0, dw, db));
        }
        let inv = 1.0 / used as f64;
        dw.scale(inv);
        db.iter_mut().for_each(|v| *v *= inv);
        Ok((loss * inv, dw, db))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(LINEAR_MAGIC);
        w.u32(self.n_classes() as u32)
            .u32(self.dim() as u32)
            .f64s(self.w.as_slice())
            .f64s(&self.b);
        w.save(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let name = path.display().to_string();
        let mut r = Reader::open(&bytes, LINEAR_MAGIC, &name)?;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        if k == 0 || d == 0 {
            return Err(r.err(FormatError::InvalidHeader("zero class count or dimension".into())));
        }
        r.require((k * d + k) * 8)?;
        let w = Matrix::from_vec(k, d, r.f64s(k * d)?)?;
        let b = r.f64s(k)?;
        r.finish()?;
        Ok(LinearProbe { w, b })
    }
}

/// Adam-trained softmax regression from a zero start on all labeled tokens.
pub fn linear_probe_train(images: &[LabeledTokens], n_classes: usize, cfg: &LinearProbeConfig) -> Result<LinearProbe> {
    if images.is_empty() {
        return Err(Error::Degenerate("no images for linear probe".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Contract("linear probe batch must be positive".into()));
    }
    let dim = images[0].tokens.cols();
    let mut index: Vec<(usize, usize)> = Vec::new();
    for (m, img) in images.iter().enumerate() {
        check_dim("linear probe", dim, img.tokens.cols())?;
        for (i, &y) in img.labels.iter().enumerate() {
            if y != IGNORE_LABEL {
                if y as usize >= n_classes {
                    return Err(Error::Contract(format!("label {y} out of range for {n_classes} classes")));
                }
                index.push((m, i));
            }
        }
    }
    if index.is_empty() {
        return Err(Error::Degenerate("no labeled tokens for linear probe".into()));
    }

    let mut probe = LinearProbe::zeros(n_classes, dim);
    let mut adam = AdamState::new(&[n_classes * dim, n_classes], cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cursor = index.len();
    let mut batch_tokens = Vec::with_capacity(cfg.batch * dim);
    let mut batch_labels = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.steps {
        batch_tokens.clear();
        batch_labels.clear();
        while batch_labels.len() < cfg.batch.min(index.len()) {
            if cursor >= index.len() {
                index.shuffle(&mut rng);
                cursor = 0;
            }
            let (m, i) = index[cursor];
            cursor += 1;
            batch_tokens.extend_from_slice(images[m].tokens.row(i));
            batch_labels.push(images[m].labels[i]);
        }
        let x = Matrix::from_vec(batch_labels.len(), dim, batch_tokens.clone())?;
        let (_, dw, db) = probe.loss_and_grad(&x, &batch_labels)?;
        let LinearProbe { w, b } = &mut probe;
        adam.step(&mut [
            ParamBlock { name: "probe.w", params: w.as_mut_slice(), grads: dw.as_slice() },
            ParamBlock { name: "probe.b", params: b, grads: &db },
        ])?;
    }
    Ok(probe)
}

pub fn linear_probe_eval(images: &[LabeledTokens], probe: &LinearProbe) -> Result<ProbeMetrics> {
    let cm = confusion_over(images, probe.n_classes(), |t| probe.predict(t))?;
    ProbeMetrics::from_confusion(cm)
}
