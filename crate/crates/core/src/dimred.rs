//! Linear dimensionality-reduction baselines: PCA and Gaussian random
//! projection onto orthonormal columns.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::feature_store::FeatureMap;
use crate::numerics::{orthonormalize_columns, sym_eig, Matrix};

pub const PCA_MAGIC: &[u8; 4] = b"CDPC";
pub const RP_MAGIC: &[u8; 4] = b"CDRP";

pub const PCA_MAX_IMAGES: usize = 5000;
pub const PCA_MAX_TOKENS: usize = 3_000_000;

/// Rows per partial covariance sum; fixed so the reduction order never
/// depends on the thread count.
const COV_CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `D_in × D_out`, orthonormal columns.
    pub components: Matrix,
    /// All `D_in` covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaModel {
    pub fn d_in(&self) -> usize {
        self.components.rows()
    }

    pub fn d_out(&self) -> usize {
        self.components.cols()
    }

    /// The same fit keeping only the leading `d_out` components.
    pub fn truncated(&self, d_out: usize) -> Result<PcaModel> {
        check_out_dim(self.d_out(), d_out)?;
        Ok(PcaModel {
            components: self.components.leading_columns(d_out),
            ..self.clone()
        })
    }

    pub fn cumulative_ratio(&self) -> Vec<f64> {
        self.explained_variance_ratio
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect()
    }

    /// Explained-variance curve as `component_index,ratio,cumulative_ratio`
    /// with 1-based indices.
    pub fn variance_csv(&self) -> String {
        let mut s = String::from("component_index,ratio,cumulative_ratio\n");
        for (i, (r, c)) in self.explained_variance_ratio.iter().zip(self.cumulative_ratio()).enumerate() {
            let _ = writeln!(s, "{},{},{}", i + 1, r, c);
        }
        s
    }

    pub fn write_variance_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.variance_csv())?;
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(PCA_MAGIC);
        w.u32(self.d_in() as u32)
            .u32(self.d_out() as u32)
            .f64s(&self.mean)
            .f64s(&self.eigenvalues)
            .f64s(&self.explained_variance_ratio)
            .f64s(self.components.as_slice());
        w.save(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let name = path.display().to_string();
        let mut r = Reader::open(&bytes, PCA_MAGIC, &name)?;
        let d_in = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        if d_in == 0 || d_out == 0 || d_out > d_in {
            return Err(r.err(FormatError::InvalidHeader(format!("PCA dims {d_in} -> {d_out}"))));
        }
        r.require((3 * d_in + d_in * d_out) * 8)?;
        let mean = r.f64s(d_in)?;
        let eigenvalues = r.f64s(d_in)?;
        let explained_variance_ratio = r.f64s(d_in)?;
        let components = Matrix::from_vec(d_in, d_out, r.f64s(d_in * d_out)?)?;
        r.finish()?;
        Ok(PcaModel { mean, components, eigenvalues, explained_variance_ratio })
    }
}

fn check_out_dim(d_in: usize, d_out: usize) -> Result<()> {
    if d_out == 0 || d_out > d_in {
        return Err(Error::Dimension {
            context: "projection output dimension",
            expected: d_in,
            found: d_out,
        });
    }
    Ok(())
}

/// Sample covariance (divisor `N − 1`) from centered outer products.
fn covariance(tokens: &Matrix, mean: &[f64]) -> Matrix {
    let d = tokens.cols();
    let chunks: Vec<Vec<f64>> = (0..tokens.rows())
        .collect::<Vec<_>>()
        .par_chunks(COV_CHUNK)
        .map(|rows| {
            let mut acc = vec![0.0; d * d];
            let mut x = vec![0.0; d];
            for &r in rows {
                for (xi, (t, m)) in x.iter_mut().zip(tokens.row(r).iter().zip(mean)) {
                    *xi = t - m;
                }
                for i in 0..d {
                    let xi = x[i];
                    let dst = &mut acc[i * d + i..(i + 1) * d];
                    for (a, xj) in dst.iter_mut().zip(&x[i..]) {
                        *a += xi * xj;
                    }
                }
            }
            acc
        })
        .collect();
    let mut cov = vec![0.0; d * d];
    for c in &chunks {
        cov.iter_mut().zip(c).for_each(|(a, b)| *a += b);
    }
    let denom = (tokens.rows() - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Matrix::from_vec(d, d, cov).expect("finite covariance")
}

pub fn pca_fit(tokens: &Matrix, d_out: usize) -> Result<PcaModel> {
    let (n, d) = (tokens.rows(), tokens.cols());
    if n < 2 {
        return Err(Error::Size(format!("PCA needs at least 2 tokens, got {n}")));
    }
    check_out_dim(d, d_out)?;
    let mut mean = tokens.col_sums();
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let cov = covariance(tokens, &mean);

    let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    let scale = tokens.as_slice().iter().map(|v| v * v).sum::<f64>() / n as f64;
    if trace <= 1e-12 * scale.max(1.0) {
        return Err(Error::Degenerate(format!("total variance {trace:e} is zero at token scale {scale:e}")));
    }

    let eig = sym_eig(&cov)?;
    let clamped: Vec<f64> = eig.values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    Ok(PcaModel {
        mean,
        components: eig.vectors.leading_columns(d_out),
        explained_variance_ratio: clamped.iter().map(|v| v / total).collect(),
        eigenvalues: eig.values,
    })
}

/// `(t − mean) · components`
pub fn pca_transform(tokens: &Matrix, model: &PcaModel) -> Result<Matrix> {
    if tokens.cols() != model.d_in() {
        return Err(Error::Dimension {
            context: "PCA transform",
            expected: model.d_in(),
            found: tokens.cols(),
        });
    }
    let mut centered = tokens.clone();
    for r in 0..centered.rows() {
        for (v, m) in centered.row_mut(r).iter_mut().zip(&model.mean) {
            *v -= m;
        }
    }
    centered.matmul(&model.components)
}

/// Draws PCA fitting tokens: up to `max_images` images chosen uniformly, all of
/// their tokens, then a uniform token subsample if more than `max_tokens`
/// remain. Sample order follows the input order.
pub fn sample_pca_tokens(images: &[&FeatureMap], max_images: usize, max_tokens: usize, seed: u64) -> Result<Matrix> {
    let Some(first) = images.first() else {
        return Err(Error::Size("no images to sample PCA tokens from".into()));
    };
    let d = first.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = if images.len() > max_images {
        index::sample(&mut rng, images.len(), max_images).into_vec()
    } else {
        (0..images.len()).collect()
    };
    picked.sort_unstable();

    let mut data = Vec::new();
    for &i in &picked {
        let f = images[i];
        if f.dim() != d {
            return Err(Error::Dimension { context: "PCA sample", expected: d, found: f.dim() });
        }
        data.extend(f.data().iter().map(|&v| v as f64));
    }
    let n = data.len() / d;
    let all = Matrix::from_vec(n, d, data)?;
    if n <= max_tokens {
        return Ok(all);
    }
    let mut keep = index::sample(&mut rng, n, max_tokens).into_vec();
    keep.sort_unstable();
    Ok(all.select_rows(&keep))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpModel {
    /// `D_in × D_out`, orthonormal columns.
    pub matrix: Matrix,
    pub seed: u64,
    /// Whether columns were rescaled after orthonormalization. Always false
    /// for models built here; stored so the choice travels with the file.
    pub rescaled: bool,
}

impl RpModel {
    pub fn d_in(&self) -> usize {
        self.matrix.rows()
    }

    pub fn d_out(&self) -> usize {
        self.matrix.cols()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(RP_MAGIC);
        w.u32(self.d_in() as u32)
            .u32(self.d_out() as u32)
            .u64(self.seed)
            .u32(self.rescaled as u32)
            .f64s(self.matrix.as_slice());
        w.save(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let name = path.display().to_string();
        let mut r = Reader::open(&bytes, RP_MAGIC, &name)?;
        let d_in = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        if d_in == 0 || d_out == 0 || d_out > d_in {
            return Err(r.err(FormatError::InvalidHeader(format!("projection dims {d_in} -> {d_out}"))));
        }
        let seed = r.u64()?;
        let rescaled = match r.u32()? {
            0 => false,
            1 => true,
            v => return Err(r.err(FormatError::InvalidHeader(format!("rescale flag {v}")))),
        };
        r.require(d_in * d_out * 8)?;
        let matrix = Matrix::from_vec(d_in, d_out, r.f64s(d_in * d_out)?)?;
        r.finish()?;
        Ok(RpModel { matrix, seed, rescaled })
    }
}

/// Standard-normal `D_in × D_out` draw, orthonormalized column by column.
pub fn rp_fit(d_in: usize, d_out: usize, seed: u64) -> Result<RpModel> {
    check_out_dim(d_in, d_out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw: Vec<f64> = (0..d_in * d_out).map(|_| rng.sample(StandardNormal)).collect();
    let matrix = orthonormalize_columns(&Matrix::from_vec(d_in, d_out, draw)?)?;
    Ok(RpModel { matrix, seed, rescaled: false })
}

pub fn rp_transform(tokens: &Matrix, model: &RpModel) -> Result<Matrix> {
    if tokens.cols() != model.d_in() {
        return Err(Error::Dimension {
            context: "random projection",
            expected: model.d_in(),
            found: tokens.cols(),
        });
    }
    tokens.matmul(&model.matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;
    use proptest::prelude::*;
    use rand::Rng;

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn max_gram_error(m: &Matrix) -> f64 {
        let g = m.matmul_at(m).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.get(i, j) - target).abs());
            }
        }
        worst
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn rank_one_line() {
        let t = Matrix::from_rows(&[vec![-1.0, -2.0], vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let m = pca_fit(&t, 1).unwrap();
        assert_eq!(pca_fit(&t, 2).unwrap().truncated(1).unwrap(), m);
        let s5 = 5f64.sqrt();
        assert!((m.components.get(0, 0) - 1.0 / s5).abs() < 1e-12);
        assert!((m.components.get(1, 0) - 2.0 / s5).abs() < 1e-12);
        assert!((m.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert_eq!(m.explained_variance_ratio.len(), 2);
        let p = pca_transform(&Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap(), &m).unwrap();
        assert!((p.get(0, 0) - s5).abs() < 1e-12);
    }

    #[test]
    fn isotropic_ratios_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = pca_fit(&gaussian(&mut rng, 10_000, 4), 4).unwrap();
        for r in &m.explained_variance_ratio {
            assert!((r - 0.25).abs() < 0.02, "{r}");
        }
    }

    #[test]
    fn identical_points_are_degenerate() {
        let t = Matrix::from_rows(&vec![vec![0.1, 3.0]; 3]).unwrap();
        assert!(matches!(pca_fit(&t, 1), Err(Error::Degenerate(_))));
        assert!(matches!(pca_fit(&Matrix::zeros(1, 2), 1), Err(Error::Size(_))));
        let t = Matrix::identity(2);
        assert!(matches!(pca_fit(&t, 3), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mean_maps_to_zero_and_full_basis_is_isometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = gaussian(&mut rng, 40, 5);
        let m = pca_fit(&t, 5).unwrap();
        let z = pca_transform(&Matrix::from_vec(1, 5, m.mean.clone()).unwrap(), &m).unwrap();
        assert!(z.max_abs() < 1e-12);
        let p = pca_transform(&t, &m).unwrap();
        for i in 0..40 {
            for j in 0..40 {
                assert!((dist(t.row(i), t.row(j)) - dist(p.row(i), p.row(j))).abs() < 1e-8);
            }
        }
        assert!(max_gram_error(&m.components) < 1e-8);
    }

    #[test]
    fn variance_csv_shape() {
        let t = Matrix::from_rows(&[vec![-1.0, -2.0], vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let csv = pca_fit(&t, 1).unwrap().variance_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "component_index,ratio,cumulative_ratio");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
    }

    #[test]
    fn covariance_ignores_chunking() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = gaussian(&mut rng, 5000, 3);
        let mean: Vec<f64> = t.col_sums().iter().map(|s| s / 5000.0).collect();
        let a = covariance(&t, &mean);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| covariance(&t, &mean));
        assert_eq!(a, b);
    }

    #[test]
    fn token_sampling_caps() {
        let maps: Vec<FeatureMap> = (0..6)
            .map(|i| FeatureMap::new(2, 2, 1, vec![i as f32; 4]).unwrap())
            .collect();
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        let all = sample_pca_tokens(&refs, 10, 100, 0).unwrap();
        assert_eq!(all.rows(), 24);
        let few = sample_pca_tokens(&refs, 3, 100, 0).unwrap();
        assert_eq!(few.rows(), 12);
        let capped = sample_pca_tokens(&refs, 10, 7, 0).unwrap();
        assert_eq!(capped.rows(), 7);
        assert_eq!(sample_pca_tokens(&refs, 3, 7, 5).unwrap(), sample_pca_tokens(&refs, 3, 7, 5).unwrap());
    }

    #[test]
    fn rp_examples() {
        let m = rp_fit(768, 64, 9).unwrap();
        assert!(max_gram_error(&m.matrix) < 1e-10);
        assert_eq!(rp_fit(768, 64, 9).unwrap(), m);
        assert!(!m.rescaled);
        assert!(matches!(rp_fit(4, 5, 0), Err(Error::Dimension { .. })));

        let z = rp_transform(&Matrix::zeros(1, 768), &m).unwrap();
        assert_eq!(z.max_abs(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = gaussian(&mut rng, 2, 768);
        let mut t3 = t.clone();
        t3.scale(3.0);
        let (a, b) = (rp_transform(&t, &m).unwrap(), rp_transform(&t3, &m).unwrap());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((3.0 * x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn square_rp_preserves_inner_products() {
        let m = rp_fit(12, 12, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = gaussian(&mut rng, 10, 12);
        let p = rp_transform(&t, &m).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                assert!((dot(t.row(i), t.row(j)) - dot(p.row(i), p.row(j))).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn checkpoints_round_trip() {
        let dir = std::env::temp_dir().join(format!("corrdistill-dimred-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pca = pca_fit(&gaussian(&mut rng, 30, 4), 2).unwrap();
        pca.write(&dir.join("p.bin")).unwrap();
        assert_eq!(PcaModel::read(&dir.join("p.bin")).unwrap(), pca);
        let rp = rp_fit(6, 3, u64::MAX).unwrap();
        rp.write(&dir.join("r.bin")).unwrap();
        assert_eq!(RpModel::read(&dir.join("r.bin")).unwrap(), rp);
        assert!(RpModel::read(&dir.join("p.bin")).is_err());
    }

    proptest! {
        #[test]
        fn pca_outputs_are_uncorrelated(seed in 0u64..200, d_out in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = gaussian(&mut rng, 60, 4);
            // introduce correlations
            for r in 0..60 {
                let row = t.row_mut(r);
                row[1] += 2.0 * row[0];
                row[3] -= row[2];
            }
            let m = pca_fit(&t, d_out).unwrap();
            let p = pca_transform(&t, &m).unwrap();
            let cov = p.matmul_at(&p).unwrap();
            let trace: f64 = (0..d_out).map(|i| cov.get(i, i)).sum();
            for i in 0..d_out {
                for j in 0..d_out {
                    if i != j {
                        prop_assert!(cov.get(i, j).abs() < 1e-6 * trace);
                    }
                }
            }
            let sum: f64 = m.explained_variance_ratio.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(m.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn rp_isometric_on_column_span(seed in 0u64..200) {
            let m = rp_fit(10, 4, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let coeffs = gaussian(&mut rng, 2, 4);
            let x = coeffs.matmul_bt(&m.matrix).unwrap();
            let p = rp_transform(&x, &m).unwrap();
            prop_assert!((dist(x.row(0), x.row(1)) - dist(p.row(0), p.row(1))).abs() < 1e-9);
        }
    }
}
