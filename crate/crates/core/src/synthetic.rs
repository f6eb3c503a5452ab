//! Synthetic feature/label datasets with known class structure.
//!
//! Each class has a unit-norm prototype. An image is split into Voronoi
//! regions, each region gets a class, and every token is its class prototype
//! plus isotropic Gaussian noise. Optionally every image also carries one
//! random offset shared by all of its tokens.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{
    write_feature_file, write_label_file, FeatureMap, LabelMap, Manifest, ManifestRecord, Split,
};
use crate::numerics::{norm, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub n_classes: usize,
    /// Expected norm of a token's noise vector; each coordinate gets
    /// standard deviation `noise / √dim`.
    pub noise: f64,
    /// Expected norm of the per-image offset added to every token.
    #[serde(default)]
    pub image_noise: f64,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Label grid resolution relative to the token grid.
    pub label_factor: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.height == 0 || self.width == 0 || self.dim == 0 {
            return Err(Error::Contract("synthetic sizes must be positive".into()));
        }
        if self.n_classes < 2 || self.n_classes > 255 {
            return Err(Error::Contract(format!("class count {} outside 2..=255", self.n_classes)));
        }
        if self.min_regions == 0 || self.min_regions > self.max_regions {
            return Err(Error::Contract("region counts must satisfy 1 <= min <= max".into()));
        }
        if self.label_factor == 0 {
            return Err(Error::Contract("label factor must be >= 1".into()));
        }
        for (name, v) in [("noise", self.noise), ("image_noise", self.image_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Contract(format!("{name} {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub id: String,
    pub split: Split,
    pub features: FeatureMap,
    pub labels: LabelMap,
    /// Class of every token, row-major on the token grid.
    pub token_classes: Vec<u8>,
}

impl SyntheticImage {
    /// The same grid with every token replaced by its class prototype.
    pub fn noiseless(&self, prototypes: &Matrix) -> FeatureMap {
        let data = self
            .token_classes
            .iter()
            .flat_map(|&c| prototypes.row(c as usize).iter().map(|&v| v as f32))
            .collect();
        FeatureMap::new(self.features.height(), self.features.width(), self.features.dim(), data)
            .expect("prototype grid")
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    /// `n_classes × dim`, unit rows.
    pub prototypes: Matrix,
    pub images: Vec<SyntheticImage>,
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut protos = Vec::with_capacity(cfg.n_classes * cfg.dim);
    for _ in 0..cfg.n_classes {
        let v: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        protos.extend(v.iter().map(|x| x / n));
    }
    let prototypes = Matrix::from_vec(cfg.n_classes, cfg.dim, protos)?;
    let sigma = cfg.noise / (cfg.dim as f64).sqrt();
    let image_sigma = cfg.image_noise / (cfg.dim as f64).sqrt();

    let (lh, lw) = (cfg.height * cfg.label_factor, cfg.width * cfg.label_factor);
    let mut images = Vec::with_capacity(cfg.n_train + cfg.n_val);
    for i in 0..cfg.n_train + cfg.n_val {
        let n_regions = rng.random_range(cfg.min_regions..=cfg.max_regions);
        let sites: Vec<(f64, f64, u8)> = (0..n_regions)
            .map(|_| {
                (
                    rng.random_range(0.0..lh as f64),
                    rng.random_range(0.0..lw as f64),
                    rng.random_range(0..cfg.n_classes) as u8,
                )
            })
            .collect();
        let offset: Vec<f64> = (0..cfg.dim)
            .map(|_| image_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let class_at = |y: f64, x: f64| -> u8 {
            let mut best = (f64::INFINITY, 0u8);
            for &(sy, sx, c) in &sites {
                let d = (sy - y).powi(2) + (sx - x).powi(2);
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1
        };
        let mut labels = Vec::with_capacity(lh * lw);
        for y in 0..lh {
            for x in 0..lw {
                labels.push(class_at(y as f64 + 0.5, x as f64 + 0.5));
            }
        }
        // a token takes the label of the pixel at its patch centre
        let half = cfg.label_factor / 2;
        let mut token_classes = Vec::with_capacity(cfg.height * cfg.width);
        let mut data = Vec::with_capacity(cfg.height * cfg.width * cfg.dim);
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                let cls = labels[(r * cfg.label_factor + half) * lw + c * cfg.label_factor + half];
                token_classes.push(cls);
                for (&p, o) in prototypes.row(cls as usize).iter().zip(&offset) {
                    let e: f64 = rng.sample(StandardNormal);
                    data.push((p + o + sigma * e) as f32);
                }
            }
        }
        images.push(SyntheticImage {
            id: format!("img{i:05}"),
            split: if i < cfg.n_train { Split::Train } else { Split::Val },
            features: FeatureMap::new(cfg.height, cfg.width, cfg.dim, data)?,
            labels: LabelMap::new(lh, lw, labels)?,
            token_classes,
        });
    }
    Ok(SyntheticDataset { config: cfg.clone(), prototypes, images })
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SyntheticImage> {
        self.images.iter().filter(move |i| i.split == split)
    }

    /// Writes `features/<id>.cdfm`, `labels/<id>.cdlm` and `manifest.jsonl`
    /// under `dir`, returning the manifest path.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        fs::create_dir_all(dir.join("features"))?;
        fs::create_dir_all(dir.join("labels"))?;
        let mut records = Vec::with_capacity(self.images.len());
        for img in &self.images {
            let fp = Path::new("features").join(format!("{}.cdfm", img.id));
            let lp = Path::new("labels").join(format!("{}.cdlm", img.id));
            write_feature_file(&dir.join(&fp), &img.features)?;
            write_label_file(&dir.join(&lp), &img.labels)?;
            records.push(ManifestRecord {
                id: img.id.clone(),
                feature_path: fp,
                label_path: Some(lp),
                split: img.split,
            });
        }
        let manifest = Manifest::new(records, dir)?;
        let path = dir.join("manifest.jsonl");
        manifest.write(&path)?;
        Ok(path)
    }
}
