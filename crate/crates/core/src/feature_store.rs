//! On-disk feature/label formats, dataset manifests, resolution helpers and
//! the image-level nearest-neighbour index.
//!
//! Feature file (`CDFM`): magic, `u32` version, `u32` h, w, D, then h·w·D
//! little-endian `f32` values in (h, w, D) row-major order.
//!
//! Label file (`CDLM`): magic, `u32` version, `u32` H, W, then H·W bytes.
//! `255` marks ignored pixels.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::numerics::{dot, norm, Matrix};

pub const FEATURE_MAGIC: &[u8; 4] = b"CDFM";
pub const LABEL_MAGIC: &[u8; 4] = b"CDLM";
pub const IGNORE_LABEL: u8 = 255;
pub const DEFAULT_KNN: usize = 7;

/// Dense h×w grid of D-dimensional patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "feature map dimensions must be positive, got {height}x{width}x{dim}"
            )));
        }
        if data.len() != height * width * dim {
            return Err(Error::Shape(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature value at {i}")));
        }
        Ok(FeatureMap {
            height,
            width,
            dim,
            data,
        })
    }

    /// Rounds an `h·w × D` matrix to `f32` storage.
    pub fn from_matrix(height: usize, width: usize, tokens: &Matrix) -> Result<Self> {
        if tokens.rows() != height * width {
            return Err(Error::Dimension {
                context: "FeatureMap::from_matrix rows",
                expected: height * width,
                found: tokens.rows(),
            });
        }
        let data = tokens.as_slice().iter().map(|&v| v as f32).collect();
        FeatureMap::new(height, width, tokens.cols(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn token(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// All tokens as an `h·w × D` matrix, upcast to `f64`.
    pub fn to_matrix(&self) -> Matrix {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Matrix::from_vec(self.num_tokens(), self.dim, data).expect("validated at construction")
    }

    /// Tokens at the given (row, col) coordinates.
    pub fn gather(&self, coords: &[(usize, usize)]) -> Matrix {
        let mut out = Matrix::zeros(coords.len(), self.dim);
        for (i, &(r, c)) in coords.iter().enumerate() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(self.token(r, c)) {
                *o = v as f64;
            }
        }
        out
    }
}

/// H×W grid of class ids; [`IGNORE_LABEL`] marks pixels without ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "label map dimensions must be positive, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Fails if any non-ignored label is `>= n_classes`.
    pub fn validate_classes(&self, n_classes: usize) -> Result<()> {
        if let Some(&bad) = self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= n_classes)
        {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(())
    }
}

pub fn write_feature_file(path: &Path, f: &FeatureMap) -> Result<()> {
    encode_feature_map(f).save(path)
}

pub fn encode_feature_bytes(f: &FeatureMap) -> Vec<u8> {
    encode_feature_map(f).into_bytes()
}

fn encode_feature_map(f: &FeatureMap) -> Writer {
    let mut w = Writer::new(FEATURE_MAGIC);
    w.u32(f.height as u32)
        .u32(f.width as u32)
        .u32(f.dim as u32)
        .f32s(&f.data);
    w
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMap> {
    let bytes = read_file(path)?;
    decode_feature_bytes(&bytes, &path.display().to_string())
}

pub fn decode_feature_bytes(bytes: &[u8], name: &str) -> Result<FeatureMap> {
    let mut r = Reader::open(bytes, FEATURE_MAGIC, name)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let d = r.u32()? as usize;
    if h == 0 || w == 0 || d == 0 {
        return Err(r.err(FormatError::InvalidHeader(format!(
            "dimensions must be positive, got {h}x{w}x{d}"
        ))));
    }
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| r.err(FormatError::InvalidHeader("dimensions overflow".into())))?;
    r.require(n.saturating_mul(4))?;
    let data = r.f32s(n)?;
    r.finish()?;
    FeatureMap::new(h, w, d, data)
}

pub fn write_label_file(path: &Path, l: &LabelMap) -> Result<()> {
    let mut w = Writer::new(LABEL_MAGIC);
    w.u32(l.height as u32).u32(l.width as u32).bytes(&l.labels);
    w.save(path)
}

pub fn read_label_file(path: &Path) -> Result<LabelMap> {
    let bytes = read_file(path)?;
    let name = path.display().to_string();
    let mut r = Reader::open(&bytes, LABEL_MAGIC, &name)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    if h == 0 || w == 0 {
        return Err(r.err(FormatError::InvalidHeader(format!(
            "dimensions must be positive, got {h}x{w}"
        ))));
    }
    let n = h
        .checked_mul(w)
        .ok_or_else(|| r.err(FormatError::InvalidHeader("dimensions overflow".into())))?;
    let labels = r.bytes(n)?.to_vec();
    r.finish()?;
    LabelMap::new(h, w, labels)
}

/// Majority-vote downsampling of a label map by an integer factor.
///
/// Ignored pixels do not vote; an all-ignored patch stays ignored and ties go
/// to the smallest class id.
pub fn pool_labels(l: &LabelMap, factor: usize) -> Result<LabelMap> {
    if factor == 0 || l.height % factor != 0 || l.width % factor != 0 {
        return Err(Error::Shape(format!(
            "label map {}x{} is not divisible by pooling factor {factor}",
            l.height, l.width
        )));
    }
    if factor == 1 {
        return Ok(l.clone());
    }
    let (oh, ow) = (l.height / factor, l.width / factor);
    let mut out = Vec::with_capacity(oh * ow);
    let mut counts = [0u32; 256];
    for r in 0..oh {
        for c in 0..ow {
            counts.iter_mut().for_each(|x| *x = 0);
            for dr in 0..factor {
                for dc in 0..factor {
                    counts[l.get(r * factor + dr, c * factor + dc) as usize] += 1;
                }
            }
            let mut best = IGNORE_LABEL;
            let mut best_count = 0;
            for (class, &n) in counts[..IGNORE_LABEL as usize].iter().enumerate() {
                if n > best_count {
                    best = class as u8;
                    best_count = n;
                }
            }
            out.push(best);
        }
    }
    LabelMap::new(oh, ow, out)
}

/// Bilinear upsampling with half-pixel centres, channels interpolated independently.
pub fn upsample_features(f: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor == 0 {
        return Err(Error::Contract("upsampling factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(f.clone());
    }
    let (h, w, d) = (f.height, f.width, f.dim);
    let (oh, ow) = (h * factor, w * factor);
    let axis = |out: usize, len: usize| -> (usize, usize, f64) {
        let src = ((out as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..ow).map(|x| axis(x, w)).collect();
    let mut data = Vec::with_capacity(oh * ow * d);
    for y in 0..oh {
        let (y0, y1, ty) = axis(y, h);
        for &(x0, x1, tx) in &cols {
            let (a, b) = (f.token(y0, x0), f.token(y0, x1));
            let (c, e) = (f.token(y1, x0), f.token(y1, x1));
            for k in 0..d {
                let top = a[k] as f64 * (1.0 - tx) + b[k] as f64 * tx;
                let bottom = c[k] as f64 * (1.0 - tx) + e[k] as f64 * tx;
                data.push((top * (1.0 - ty) + bottom * ty) as f32);
            }
        }
    }
    FeatureMap::new(oh, ow, d, data)
}

/// Mean token, L2-normalized.
pub fn pooled_embedding(f: &FeatureMap) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; f.dim];
    for t in f.data.chunks_exact(f.dim) {
        for (m, &v) in mean.iter_mut().zip(t) {
            *m += v as f64;
        }
    }
    let n = f.num_tokens() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let len = norm(&mean);
    if len < crate::numerics::NORM_EPS {
        return Err(Error::Degenerate("image has a zero mean token".into()));
    }
    mean.iter_mut().for_each(|m| *m /= len);
    Ok(mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub feature_path: PathBuf,
    #[serde(default)]
    pub label_path: Option<PathBuf>,
    pub split: Split,
}

/// Dataset listing, one JSON object per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id {:?}", r.id)));
            }
        }
        Ok(Manifest {
            records,
            base_dir: base_dir.into(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            records.push(rec);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(records, base)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Checks that every referenced file exists.
    pub fn check_files(&self) -> Result<()> {
        for r in &self.records {
            let paths = std::iter::once(&r.feature_path).chain(r.label_path.iter());
            for p in paths {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Manifest(format!(
                        "record {:?} references missing file {}",
                        r.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Loads every record of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<ImageRecord>> {
        self.split(split)
            .map(|r| {
                let features = read_feature_file(&self.resolve(&r.feature_path))?;
                let labels = match &r.label_path {
                    Some(p) => Some(read_label_file(&self.resolve(p))?),
                    None => None,
                };
                Ok(ImageRecord {
                    id: r.id.clone(),
                    split,
                    features,
                    labels,
                })
            })
            .collect()
    }
}

/// One loaded image: features plus optional ground truth.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub id: String,
    pub split: Split,
    pub features: FeatureMap,
    pub labels: Option<LabelMap>,
}

/// Exact cosine k-nearest-neighbour table over pooled image embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnIndex {
    pub k: usize,
    /// Image ids in ascending order.
    pub ids: Vec<String>,
    /// Unit-norm pooled embedding per entry of `ids`.
    pub embeddings: Vec<Vec<f64>>,
    pub neighbors: BTreeMap<String, Vec<String>>,
}

impl KnnIndex {
    pub fn neighbors_of(&self, id: &str) -> Option<&[String]> {
        self.neighbors.get(id).map(Vec::as_slice)
    }

    /// Writes the `id -> [neighbor ids]` JSON mapping.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &self.neighbors)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Reads the neighbour mapping; embeddings are not stored and come back empty.
    pub fn read_json(path: &Path) -> Result<Self> {
        let neighbors: BTreeMap<String, Vec<String>> = serde_json::from_reader(fs::File::open(path).map_err(|e| Error::io_at(path, e))?)?;
        let k = neighbors.values().next().map_or(0, Vec::len);
        for (id, list) in &neighbors {
            if list.len() != k {
                return Err(Error::Contract(format!(
                    "neighbour list of {id:?} has {} entries, expected {k}",
                    list.len()
                )));
            }
            if list.iter().any(|n| n == id) {
                return Err(Error::Contract(format!("{id:?} lists itself as a neighbour")));
            }
        }
        Ok(KnnIndex {
            k,
            ids: neighbors.keys().cloned().collect(),
            embeddings: Vec::new(),
            neighbors,
        })
    }
}

/// Builds the neighbour table for a set of images. Input order does not matter:
/// images are processed by ascending id and similarity ties go to the smaller id.
pub fn build_knn_index<'a, I>(images: I, k: usize) -> Result<KnnIndex>
where
    I: IntoIterator<Item = (&'a str, &'a FeatureMap)>,
{
    let mut entries: Vec<(&str, &FeatureMap)> = images.into_iter().collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    if entries.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Contract("duplicate image id in kNN input".into()));
    }
    if k == 0 || entries.len() < k + 1 {
        return Err(Error::Size(format!(
            "kNN with k={k} needs at least {} images, got {}",
            k + 1,
            entries.len()
        )));
    }
    let embeddings: Vec<Vec<f64>> = entries
        .iter()
        .map(|(_, f)| pooled_embedding(f))
        .collect::<Result<_>>()?;
    let ids: Vec<String> = entries.iter().map(|(id, _)| id.to_string()).collect();
    let mut neighbors = BTreeMap::new();
    for (i, e) in embeddings.iter().enumerate() {
        let mut scored: Vec<(f64, usize)> = embeddings
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, o)| (dot(e, o), j))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let list = scored[..k].iter().map(|&(_, j)| ids[j].clone()).collect();
        neighbors.insert(ids[i].clone(), list);
    }
    Ok(KnnIndex {
        k,
        ids,
        embeddings,
        neighbors,
    })
}
