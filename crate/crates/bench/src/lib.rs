//! Seeded inputs shared by the benchmarks.

use corrdistill::feature_store::build_knn_index;
use corrdistill::synthetic::{generate, SyntheticConfig};
use corrdistill::{FeatureMap, KnnIndex, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

pub fn uniform_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// Training images `(id, features)` of a small synthetic dataset and their kNN table.
pub fn train_images(n: usize, side: usize, dim: usize) -> (Vec<(String, FeatureMap)>, KnnIndex) {
    let cfg = SyntheticConfig {
        n_train: n,
        n_val: 0,
        height: side,
        width: side,
        dim,
        n_classes: 6,
        noise: 0.3,
        image_noise: 0.0,
        min_regions: 3,
        max_regions: 6,
        label_factor: 1,
        seed: 0,
    };
    let data = generate(&cfg).expect("valid config");
    let images: Vec<(String, FeatureMap)> = data.images.into_iter().map(|i| (i.id, i.features)).collect();
    let knn = build_knn_index(images.iter().map(|(id, f)| (id.as_str(), f)), 7).expect("enough images");
    (images, knn)
}
