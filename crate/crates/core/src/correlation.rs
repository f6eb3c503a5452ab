//! Correspondence tensors and the contrastive correlation loss.
//!
//! A correspondence tensor holds the cosine similarity of every token of one
//! grid with every token of another. The loss pushes head-output similarities
//! up where the backbone similarity exceeds a threshold `b` and down elsewhere.
//! Losses here are means over all tensor entries, so their scale does not
//! depend on how many tokens were sampled.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::FeatureMap;
use crate::numerics::{cosine_similarity_matrix, norm, Matrix, NORM_EPS};

/// Cosine similarities between two token grids, indexed (h, w, i, j).
///
/// Stored as an `(h·w) × (i·j)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceTensor {
    dims: [usize; 4],
    values: Matrix,
}

impl CorrespondenceTensor {
    pub fn from_matrix(dims: [usize; 4], values: Matrix) -> Result<Self> {
        if values.rows() != dims[0] * dims[1] || values.cols() != dims[2] * dims[3] {
            return Err(Error::Shape(format!(
                "correspondence dims {dims:?} do not match a {}x{} matrix",
                values.rows(),
                values.cols()
            )));
        }
        Ok(CorrespondenceTensor { dims, values })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn get(&self, h: usize, w: usize, i: usize, j: usize) -> f64 {
        self.values
            .get(h * self.dims[1] + w, i * self.dims[3] + j)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self) -> f64 {
        self.values.as_slice().iter().sum::<f64>() / self.len() as f64
    }
}

/// All-pairs cosine similarity between the tokens of two feature maps.
pub fn correspondence_tensor(f: &FeatureMap, g: &FeatureMap) -> Result<CorrespondenceTensor> {
    if f.dim() != g.dim() {
        return Err(Error::Dimension {
            context: "correspondence_tensor",
            expected: f.dim(),
            found: g.dim(),
        });
    }
    let c = cosine_similarity_matrix(&f.to_matrix(), &g.to_matrix(), NORM_EPS)?;
    CorrespondenceTensor::from_matrix([f.height(), f.width(), g.height(), g.width()], c)
}

/// Correspondence between two token lists, laid out as `grid_a` × `grid_b`.
pub fn correspondence_from_tokens(
    a: &Matrix,
    grid_a: (usize, usize),
    b: &Matrix,
    grid_b: (usize, usize),
) -> Result<CorrespondenceTensor> {
    let c = cosine_similarity_matrix(a, b, NORM_EPS)?;
    CorrespondenceTensor::from_matrix([grid_a.0, grid_a.1, grid_b.0, grid_b.1], c)
}

/// Per-(h, w) mean removal over (i, j) with the global mean added back.
///
/// The result is a loss target rather than a similarity, so it is not
/// re-clamped to [-1, 1]. With `pointwise` off the input is returned as is.
pub fn spatial_center(c: &CorrespondenceTensor, pointwise: bool) -> CorrespondenceTensor {
    if !pointwise {
        return c.clone();
    }
    let global = c.mean();
    let mut values = c.values.clone();
    let cols = values.cols();
    for r in 0..values.rows() {
        let row = values.row_mut(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        row.iter_mut().for_each(|v| *v = *v - mean + global);
    }
    CorrespondenceTensor {
        dims: c.dims,
        values,
    }
}

/// Mean-normalized correlation loss and its gradient with respect to `c_stego`.
///
/// `loss = -mean((c_vit - b) * g(c_stego))` with `g = max(., 0)` when
/// `zero_clamp` is set. The clamp's subgradient at exactly 0 is 0.
pub fn corr_loss(
    c_vit: &CorrespondenceTensor,
    c_stego: &CorrespondenceTensor,
    b: f64,
    zero_clamp: bool,
) -> Result<(f64, Matrix)> {
    if c_vit.dims != c_stego.dims {
        return Err(Error::Shape(format!(
            "correspondence shapes differ: {:?} vs {:?}",
            c_vit.dims, c_stego.dims
        )));
    }
    let n = c_vit.len() as f64;
    let mut grad = Matrix::zeros(c_vit.values.rows(), c_vit.values.cols());
    let mut total = 0.0;
    for ((&v, &s), g) in c_vit
        .values
        .as_slice()
        .iter()
        .zip(c_stego.values.as_slice())
        .zip(grad.as_mut_slice())
    {
        let pressure = v - b;
        let (gs, dgs) = if zero_clamp {
            if s > 0.0 {
                (s, 1.0)
            } else {
                (0.0, 0.0)
            }
        } else {
            (s, 1.0)
        };
        total += pressure * gs;
        *g = -pressure * dgs / n;
    }
    Ok((-total / n, grad))
}

/// `S²` grid coordinates drawn uniformly with replacement.
pub fn sample_coords<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    samples: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    (0..samples * samples)
        .map(|_| (rng.random_range(0..height), rng.random_range(0..width)))
        .collect()
}

/// The six loss weights/thresholds plus the stabilization flags and sample counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairLossConfig {
    pub b_self: f64,
    pub b_knn: f64,
    pub b_rand: f64,
    pub lambda_self: f64,
    pub lambda_knn: f64,
    pub lambda_rand: f64,
    pub zero_clamp: bool,
    pub pointwise_center: bool,
    /// Per image, `feature_samples²` token coordinates are drawn.
    pub feature_samples: usize,
    /// Random partner images per anchor.
    pub negative_samples: usize,
}

impl PairLossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [
            ("lambda_self", self.lambda_self),
            ("lambda_knn", self.lambda_knn),
            ("lambda_rand", self.lambda_rand),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Contract(format!("{name} must be a finite value >= 0, got {l}")));
            }
        }
        if self.feature_samples == 0 || self.negative_samples == 0 {
            return Err(Error::Contract(
                "feature_samples and negative_samples must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Sampled backbone tokens of one image together with the head's outputs for them.
#[derive(Clone, Copy, Debug)]
pub struct TokenSet<'a> {
    pub raw: &'a Matrix,
    pub head: &'a Matrix,
}

#[derive(Clone, Debug)]
pub struct PairLoss {
    pub loss: f64,
    pub grad_anchor: Matrix,
    pub grad_partner: Matrix,
}

/// Correlation loss of one (anchor, partner) pair, with gradients flowing into
/// both head outputs. Backbone correspondences are centered first.
pub fn pair_loss(
    anchor: TokenSet<'_>,
    partner: TokenSet<'_>,
    b: f64,
    zero_clamp: bool,
    pointwise_center: bool,
) -> Result<PairLoss> {
    let ga = grid_of(anchor.raw.rows());
    let gp = grid_of(partner.raw.rows());
    let c_vit = correspondence_from_tokens(anchor.raw, ga, partner.raw, gp)?;
    let c_vit = spatial_center(&c_vit, pointwise_center);
    let c_stego = correspondence_from_tokens(anchor.head, ga, partner.head, gp)?;
    let (loss, d_c) = corr_loss(&c_vit, &c_stego, b, zero_clamp)?;
    let (grad_anchor, grad_partner) = cosine_backward(anchor.head, partner.head, &d_c)?;
    Ok(PairLoss {
        loss,
        grad_anchor,
        grad_partner,
    })
}

// token lists are treated as a single row; centering only depends on the row/column split
fn grid_of(n: usize) -> (usize, usize) {
    (n, 1)
}

/// Backpropagates `d_c = dLoss/dC` through `C = cos(a_n, b_m)`.
pub fn cosine_backward(a: &Matrix, b: &Matrix, d_c: &Matrix) -> Result<(Matrix, Matrix)> {
    if d_c.rows() != a.rows() || d_c.cols() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape("cosine_backward operand shapes disagree".into()));
    }
    let raw_a: Vec<f64> = (0..a.rows()).map(|i| norm(a.row(i))).collect();
    let raw_b: Vec<f64> = (0..b.rows()).map(|j| norm(b.row(j))).collect();
    let na: Vec<f64> = raw_a.iter().map(|n| n.max(NORM_EPS)).collect();
    let nb: Vec<f64> = raw_b.iter().map(|n| n.max(NORM_EPS)).collect();

    let mut a_hat = a.clone();
    for i in 0..a.rows() {
        a_hat.row_mut(i).iter_mut().for_each(|v| *v /= na[i]);
    }
    let mut b_hat = b.clone();
    for j in 0..b.rows() {
        b_hat.row_mut(j).iter_mut().for_each(|v| *v /= nb[j]);
    }
    let c = a_hat.matmul_bt(&b_hat)?;

    let mut row_w = vec![0.0; a.rows()];
    let mut col_w = vec![0.0; b.rows()];
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let w = d_c.get(i, j) * c.get(i, j);
            row_w[i] += w;
            col_w[j] += w;
        }
    }

    let mut da = d_c.matmul(&b_hat)?;
    for i in 0..a.rows() {
        let inv = 1.0 / na[i];
        let radial = if raw_a[i] >= NORM_EPS { row_w[i] * inv } else { 0.0 };
        for (d, &x) in da.row_mut(i).iter_mut().zip(a_hat.row(i)) {
            *d = *d * inv - radial * x;
        }
    }
    let mut db = d_c.matmul_at(&a_hat)?;
    for j in 0..b.rows() {
        let inv = 1.0 / nb[j];
        let radial = if raw_b[j] >= NORM_EPS { col_w[j] * inv } else { 0.0 };
        for (d, &x) in db.row_mut(j).iter_mut().zip(b_hat.row(j)) {
            *d = *d * inv - radial * x;
        }
    }
    Ok((da, db))
}

/// Result of the three-pair loss for one anchor image.
#[derive(Clone, Debug)]
pub struct CombinedLoss {
    pub loss: f64,
    /// Unweighted per-pair losses; the random term is the mean over partners.
    pub self_loss: f64,
    pub knn_loss: f64,
    pub rand_loss: f64,
    pub grad_anchor: Matrix,
    pub grad_self: Matrix,
    pub grad_knn: Matrix,
    pub grad_rand: Vec<Matrix>,
}

/// Weighted sum of the self, nearest-neighbour and random-partner losses.
///
/// `self_partner` is the anchor image sampled at a second set of coordinates.
/// Random-partner losses are averaged before weighting. Terms with zero
/// weight are skipped and contribute zero gradient.
pub fn combined_loss(
    anchor: TokenSet<'_>,
    self_partner: TokenSet<'_>,
    knn_partner: TokenSet<'_>,
    rand_partners: &[TokenSet<'_>],
    cfg: &PairLossConfig,
) -> Result<CombinedLoss> {
    cfg.validate()?;
    if rand_partners.len() != cfg.negative_samples {
        return Err(Error::Contract(format!(
            "expected {} random partners, got {}",
            cfg.negative_samples,
            rand_partners.len()
        )));
    }
    let d_out = anchor.head.cols();
    for t in std::iter::once(&self_partner)
        .chain(std::iter::once(&knn_partner))
        .chain(rand_partners)
    {
        if t.head.cols() != d_out || t.raw.cols() != anchor.raw.cols() {
            return Err(Error::Dimension {
                context: "combined_loss partner dims",
                expected: d_out,
                found: t.head.cols(),
            });
        }
    }

    let zeros = |t: &TokenSet<'_>| Matrix::zeros(t.head.rows(), t.head.cols());
    let mut grad_anchor = zeros(&anchor);
    let mut grad_self = zeros(&self_partner);
    let mut grad_knn = zeros(&knn_partner);
    let mut grad_rand: Vec<Matrix> = rand_partners.iter().map(zeros).collect();
    let (mut self_loss, mut knn_loss, mut rand_loss) = (0.0, 0.0, 0.0);

    let accumulate = |pl: &PairLoss, weight: f64, ga: &mut Matrix, gp: &mut Matrix| {
        let mut a = pl.grad_anchor.clone();
        a.scale(weight);
        ga.add_assign(&a).expect("same shape");
        let mut p = pl.grad_partner.clone();
        p.scale(weight);
        gp.add_assign(&p).expect("same shape");
    };

    if cfg.lambda_self != 0.0 {
        let pl = pair_loss(anchor, self_partner, cfg.b_self, cfg.zero_clamp, cfg.pointwise_center)?;
        self_loss = pl.loss;
        accumulate(&pl, cfg.lambda_self, &mut grad_anchor, &mut grad_self);
    }
    if cfg.lambda_knn != 0.0 {
        let pl = pair_loss(anchor, knn_partner, cfg.b_knn, cfg.zero_clamp, cfg.pointwise_center)?;
        knn_loss = pl.loss;
        accumulate(&pl, cfg.lambda_knn, &mut grad_anchor, &mut grad_knn);
    }
    if cfg.lambda_rand != 0.0 {
        let w = cfg.lambda_rand / rand_partners.len() as f64;
        for (partner, g) in rand_partners.iter().zip(grad_rand.iter_mut()) {
            let pl = pair_loss(anchor, *partner, cfg.b_rand, cfg.zero_clamp, cfg.pointwise_center)?;
            rand_loss += pl.loss;
            accumulate(&pl, w, &mut grad_anchor, g);
        }
        rand_loss /= rand_partners.len() as f64;
    }

    Ok(CombinedLoss {
        loss: weighted_total(cfg, self_loss, knn_loss, rand_loss),
        self_loss,
        knn_loss,
        rand_loss,
        grad_anchor,
        grad_self,
        grad_knn,
        grad_rand,
    })
}

/// `λ_self·ℓ_self + λ_knn·ℓ_knn + λ_rand·ℓ_rand`
pub fn weighted_total(cfg: &PairLossConfig, self_loss: f64, knn_loss: f64, rand_loss: f64) -> f64 {
    cfg.lambda_self * self_loss + cfg.lambda_knn * knn_loss + cfg.lambda_rand * rand_loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn single(v: &[f32]) -> FeatureMap {
        FeatureMap::new(1, 1, v.len(), v.to_vec()).unwrap()
    }

    fn scalar_tensor(v: f64) -> CorrespondenceTensor {
        CorrespondenceTensor::from_matrix([1, 1, 1, 1], Matrix::from_vec(1, 1, vec![v]).unwrap()).unwrap()
    }

    fn cfg(lambdas: (f64, f64, f64), clamp: bool, center: bool) -> PairLossConfig {
        PairLossConfig {
            b_self: 0.12,
            b_knn: 0.20,
            b_rand: 1.00,
            lambda_self: lambdas.0,
            lambda_knn: lambdas.1,
            lambda_rand: lambdas.2,
            zero_clamp: clamp,
            pointwise_center: center,
            feature_samples: 2,
            negative_samples: 2,
        }
    }

    #[test]
    fn correspondence_examples() {
        let c = correspondence_tensor(&single(&[0.3, 0.1]), &single(&[0.3, 0.1])).unwrap();
        assert_abs_diff_eq!(c.get(0, 0, 0, 0), 1.0, epsilon = 1e-15);
        let c = correspondence_tensor(&single(&[1.0, 0.0]), &single(&[0.0, 2.0])).unwrap();
        assert_eq!(c.get(0, 0, 0, 0), 0.0);
        let c = correspondence_tensor(&single(&[3.0, 4.0]), &single(&[4.0, 3.0])).unwrap();
        assert_abs_diff_eq!(c.get(0, 0, 0, 0), 0.96, epsilon = 1e-7);
        assert!(correspondence_tensor(&single(&[1.0]), &single(&[1.0, 2.0])).is_err());
        let c = correspondence_tensor(&single(&[0.0, 0.0]), &single(&[1.0, 2.0])).unwrap();
        assert_eq!(c.get(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn correspondence_indexing() {
        let f = FeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = FeatureMap::new(2, 1, 2, vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        let c = correspondence_tensor(&f, &g).unwrap();
        assert_eq!(c.dims(), [1, 2, 2, 1]);
        assert_eq!(c.get(0, 0, 0, 0), 0.0);
        assert_eq!(c.get(0, 1, 0, 0), 1.0);
        assert_abs_diff_eq!(c.get(0, 0, 1, 0), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-7);
    }

    #[test]
    fn centering_examples() {
        let constant = CorrespondenceTensor::from_matrix([2, 1, 2, 1], Matrix::from_vec(2, 2, vec![0.3; 4]).unwrap()).unwrap();
        assert_eq!(spatial_center(&constant, true), constant);

        let c = CorrespondenceTensor::from_matrix([2, 1, 2, 1], Matrix::from_vec(2, 2, vec![0.0, 0.2, 0.8, 1.0]).unwrap()).unwrap();
        let centered = spatial_center(&c, true);
        for (got, want) in centered.as_matrix().as_slice().iter().zip([0.4, 0.6, 0.4, 0.6]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
        assert_eq!(spatial_center(&c, false), c);
    }

    #[test]
    fn corr_loss_examples() {
        let (l, g) = corr_loss(&scalar_tensor(0.3), &scalar_tensor(-0.7), 0.3, false).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.as_slice(), &[-0.0]);

        let (l, g) = corr_loss(&scalar_tensor(0.96), &scalar_tensor(0.5), 0.12, false).unwrap();
        assert_abs_diff_eq!(l, -0.42, epsilon = 1e-12);
        assert_abs_diff_eq!(g.get(0, 0), -0.84, epsilon = 1e-12);

        let (l, g) = corr_loss(&scalar_tensor(0.96), &scalar_tensor(-0.5), 0.12, true).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.get(0, 0), 0.0);

        let a = CorrespondenceTensor::from_matrix([1, 1, 1, 2], Matrix::zeros(1, 2)).unwrap();
        assert!(corr_loss(&a, &scalar_tensor(0.0), 0.0, false).is_err());
    }

    #[test]
    fn sample_coords_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = sample_coords(28, 20, 11, &mut rng);
        assert_eq!(c.len(), 121);
        assert!(c.iter().all(|&(r, q)| r < 28 && q < 20));

        let c = sample_coords(1, 1, 4, &mut rng);
        assert!(c.iter().all(|&x| x == (0, 0)));

        let a = sample_coords(9, 9, 5, &mut ChaCha8Rng::seed_from_u64(11));
        let b = sample_coords(9, 9, 5, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw: Vec<Matrix> = (0..4).map(|_| random_matrix(4, 5, &mut rng)).collect();
        let head: Vec<Matrix> = (0..4).map(|_| random_matrix(4, 3, &mut rng)).collect();
        let ts: Vec<TokenSet> = raw.iter().zip(&head).map(|(r, h)| TokenSet { raw: r, head: h }).collect();
        let out = combined_loss(ts[0], ts[1], ts[2], &ts[2..4], &cfg((0.0, 0.0, 0.0), false, true)).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_anchor.as_slice().iter().all(|&g| g == 0.0));
        assert!(out.grad_rand.iter().all(|g| g.as_slice().iter().all(|&x| x == 0.0)));

        let err = combined_loss(ts[0], ts[1], ts[2], &ts[2..3], &cfg((1.0, 1.0, 1.0), false, true));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn weighted_sum_arithmetic() {
        let c = PairLossConfig {
            lambda_self: 0.10,
            lambda_knn: 1.00,
            lambda_rand: 0.15,
            ..cfg((0.0, 0.0, 0.0), false, true)
        };
        assert_abs_diff_eq!(weighted_total(&c, -0.4, -0.2, 0.1), -0.225, epsilon = 1e-15);
    }

    /// Loss as a function of the head outputs only, for finite differences.
    fn loss_of(heads: &[Matrix], raw: &[Matrix], c: &PairLossConfig) -> f64 {
        let ts: Vec<TokenSet> = raw.iter().zip(heads).map(|(r, h)| TokenSet { raw: r, head: h }).collect();
        combined_loss(ts[0], ts[1], ts[2], &ts[3..5], c).unwrap().loss
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // anchor, self, knn, rand×2; 4 tokens each
        let raw: Vec<Matrix> = (0..5).map(|_| random_matrix(4, 6, &mut rng)).collect();
        let heads: Vec<Matrix> = (0..5).map(|_| random_matrix(4, 3, &mut rng)).collect();
        for clamp in [false, true] {
            for center in [false, true] {
                let c = cfg((0.7, 1.1, 0.4), clamp, center);
                let ts: Vec<TokenSet> = raw.iter().zip(&heads).map(|(r, h)| TokenSet { raw: r, head: h }).collect();
                let out = combined_loss(ts[0], ts[1], ts[2], &ts[3..5], &c).unwrap();
                let grads: Vec<&Matrix> = [&out.grad_anchor, &out.grad_self, &out.grad_knn]
                    .into_iter()
                    .chain(out.grad_rand.iter())
                    .collect();
                let h = 1e-5;
                for s in 0..5 {
                    for e in 0..heads[s].as_slice().len() {
                        let mut plus = heads.clone();
                        plus[s].as_mut_slice()[e] += h;
                        let mut minus = heads.clone();
                        minus[s].as_mut_slice()[e] -= h;
                        let fd = (loss_of(&plus, &raw, &c) - loss_of(&minus, &raw, &c)) / (2.0 * h);
                        let an = grads[s].as_slice()[e];
                        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                        assert!(rel < 1e-4, "set {s} elem {e}: fd {fd} analytic {an}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn centering_preserves_global_mean(vals in proptest::collection::vec(-1.0f64..1.0, 12)) {
            let c = CorrespondenceTensor::from_matrix([3, 1, 2, 2], Matrix::from_vec(3, 4, vals).unwrap()).unwrap();
            let centered = spatial_center(&c, true);
            prop_assert!((centered.mean() - c.mean()).abs() < 1e-15);
        }

        #[test]
        fn gradient_sign_follows_pressure(v in -1.0f64..1.0, s in -1.0f64..1.0, b in -0.5f64..1.0, clamp: bool) {
            let (_, g) = corr_loss(&scalar_tensor(v), &scalar_tensor(s), b, clamp).unwrap();
            let g = g.get(0, 0);
            let active = !clamp || s > 0.0;
            if v > b && active {
                prop_assert!(g < 0.0);
            } else if v < b && active {
                prop_assert!(g > 0.0);
            } else {
                prop_assert!(g == 0.0 || v == b);
            }
        }

        #[test]
        fn correspondence_scale_invariant(seed in 0u64..200, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(3, 4, &mut rng);
            let b = random_matrix(2, 4, &mut rng);
            let mut a2 = a.clone();
            a2.scale(scale);
            let c1 = correspondence_from_tokens(&a, (3, 1), &b, (2, 1)).unwrap();
            let c2 = correspondence_from_tokens(&a2, (3, 1), &b, (2, 1)).unwrap();
            for (x, y) in c1.as_matrix().as_slice().iter().zip(c2.as_matrix().as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn combined_loss_linear_in_lambdas(seed in 0u64..100, scale in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<Matrix> = (0..5).map(|_| random_matrix(3, 4, &mut rng)).collect();
            let heads: Vec<Matrix> = (0..5).map(|_| random_matrix(3, 2, &mut rng)).collect();
            let base = cfg((0.3, 0.5, 0.7), false, true);
            let scaled = PairLossConfig { lambda_knn: base.lambda_knn * scale, ..base.clone() };
            let knn_only = PairLossConfig { lambda_self: 0.0, lambda_rand: 0.0, ..base.clone() };
            let l0 = loss_of(&heads, &raw, &base);
            let l1 = loss_of(&heads, &raw, &scaled);
            let lk = loss_of(&heads, &raw, &knn_only);
            prop_assert!((l1 - (l0 + (scale - 1.0) * lk)).abs() < 1e-12);
        }
    }
}
