//! Per-token segmentation head and its training loop.
//!
//! The head maps each D_in token independently to D_out:
//!
//! ```text
//! out = (W0·t + b0) + (W2·relu(W1·t + b1) + b2)
//! ```
//!
//! In training mode inverted dropout is applied to the input tokens.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::correlation::{combined_loss, sample_coords, PairLossConfig, TokenSet};
use crate::error::{Error, FormatError, Result};
use crate::feature_store::{FeatureMap, KnnIndex};
use crate::numerics::{AdamState, Matrix, ParamBlock};

pub const HEAD_MAGIC: &[u8; 4] = b"CDHD";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weights of the two-branch head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// Linear branch, D_out × D_in.
    pub w0: Matrix,
    pub b0: Vec<f64>,
    /// Hidden layer of the nonlinear branch, D_in × D_in.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// Output layer of the nonlinear branch, D_out × D_in.
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub dropout_p: f64,
}

/// Gradients with the same layout as [`HeadParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub w0: Matrix,
    pub b0: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input after dropout.
    input: Matrix,
    /// Per-element dropout multipliers, absent in eval mode.
    mask: Option<Matrix>,
    hidden_pre: Matrix,
    hidden: Matrix,
}

impl HeadParams {
    pub fn zeros(d_in: usize, d_out: usize, dropout_p: f64) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::Contract("head dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Contract(format!("dropout probability {dropout_p} not in [0, 1)")));
        }
        Ok(HeadParams {
            w0: Matrix::zeros(d_out, d_in),
            b0: vec![0.0; d_out],
            w1: Matrix::zeros(d_in, d_in),
            b1: vec![0.0; d_in],
            w2: Matrix::zeros(d_out, d_in),
            b2: vec![0.0; d_out],
            dropout_p,
        })
    }

    /// Weights uniform in ±1/√fan_in, biases zero.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, dropout_p: f64, rng: &mut R) -> Result<Self> {
        let mut p = HeadParams::zeros(d_in, d_out, dropout_p)?;
        let bound = 1.0 / (d_in as f64).sqrt();
        for m in [&mut p.w0, &mut p.w1, &mut p.w2] {
            m.as_mut_slice()
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-bound..bound));
        }
        Ok(p)
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn zero_grads(&self) -> HeadGrads {
        HeadGrads {
            w0: Matrix::zeros(self.w0.rows(), self.w0.cols()),
            b0: vec![0.0; self.b0.len()],
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: vec![0.0; self.b1.len()],
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: vec![0.0; self.b2.len()],
        }
    }

    pub fn num_params(&self) -> usize {
        self.block_sizes().iter().sum()
    }

    fn block_sizes(&self) -> [usize; 6] {
        [
            self.w0.as_slice().len(),
            self.b0.len(),
            self.w1.as_slice().len(),
            self.b1.len(),
            self.w2.as_slice().len(),
            self.b2.len(),
        ]
    }

    /// Flat mutable views in declaration order.
    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 6] {
        [
            ("w0", self.w0.as_mut_slice()),
            ("b0", &mut self.b0[..]),
            ("w1", self.w1.as_mut_slice()),
            ("b1", &mut self.b1[..]),
            ("w2", self.w2.as_mut_slice()),
            ("b2", &mut self.b2[..]),
        ]
    }

    /// Eval-mode forward pass.
    pub fn apply(&self, tokens: &Matrix) -> Result<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(tokens, Mode::Eval, &mut rng)?.0)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tokens: &Matrix,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Matrix, ForwardCache)> {
        if tokens.cols() != self.d_in() {
            return Err(Error::Dimension {
                context: "head_forward token dim",
                expected: self.d_in(),
                found: tokens.cols(),
            });
        }
        let (input, mask) = if mode == Mode::Train && self.dropout_p > 0.0 {
            let keep = 1.0 - self.dropout_p;
            let mut mask = Matrix::zeros(tokens.rows(), tokens.cols());
            for m in mask.as_mut_slice() {
                *m = if rng.random::<f64>() < self.dropout_p { 0.0 } else { 1.0 / keep };
            }
            let mut input = tokens.clone();
            for (x, m) in input.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *x *= m;
            }
            (input, Some(mask))
        } else {
            (tokens.clone(), None)
        };

        let mut hidden_pre = input.matmul_bt(&self.w1)?;
        add_bias(&mut hidden_pre, &self.b1);
        let mut hidden = hidden_pre.clone();
        hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));

        let mut out = input.matmul_bt(&self.w0)?;
        add_bias(&mut out, &self.b0);
        let mut nonlinear = hidden.matmul_bt(&self.w2)?;
        add_bias(&mut nonlinear, &self.b2);
        out.add_assign(&nonlinear)?;

        Ok((
            out,
            ForwardCache {
                input,
                mask,
                hidden_pre,
                hidden,
            },
        ))
    }

    /// Exact gradients of the forward composition given `dLoss/dOut`.
    /// Also returns `dLoss/dTokens` when `input_grad` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &Matrix,
        input_grad: bool,
    ) -> Result<(HeadGrads, Option<Matrix>)> {
        if upstream.rows() != cache.input.rows() || upstream.cols() != self.d_out() {
            return Err(Error::Shape(format!(
                "upstream gradient {}x{} does not match cached forward pass {}x{}",
                upstream.rows(),
                upstream.cols(),
                cache.input.rows(),
                self.d_out()
            )));
        }
        let w0 = upstream.matmul_at(&cache.input)?;
        let b0 = upstream.col_sums();
        let w2 = upstream.matmul_at(&cache.hidden)?;
        let b2 = b0.clone();

        let mut d_pre = upstream.matmul(&self.w2)?;
        for (d, &pre) in d_pre.as_mut_slice().iter_mut().zip(cache.hidden_pre.as_slice()) {
            if pre <= 0.0 {
                *d = 0.0;
            }
        }
        let w1 = d_pre.matmul_at(&cache.input)?;
        let b1 = d_pre.col_sums();

        let d_input = if input_grad {
            let mut d = upstream.matmul(&self.w0)?;
            d.add_assign(&d_pre.matmul(&self.w1)?)?;
            if let Some(mask) = &cache.mask {
                for (x, m) in d.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *x *= m;
                }
            }
            Some(d)
        } else {
            None
        };
        Ok((HeadGrads { w0, b0, w1, b1, w2, b2 }, d_input))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(HEAD_MAGIC);
        w.u32(self.d_in() as u32)
            .u32(self.d_out() as u32)
            .f64s(self.w0.as_slice())
            .f64s(&self.b0)
            .f64s(self.w1.as_slice())
            .f64s(&self.b1)
            .f64s(self.w2.as_slice())
            .f64s(&self.b2)
            .f64s(&[self.dropout_p]);
        w.save(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let name = path.display().to_string();
        let mut r = Reader::open(&bytes, HEAD_MAGIC, &name)?;
        let d_in = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        if d_in == 0 || d_out == 0 {
            return Err(r.err(FormatError::InvalidHeader("zero head dimension".into())));
        }
        let total = 2 * d_out * d_in + d_in * d_in + 2 * d_out + d_in + 1;
        r.require(total * 8)?;
        let w0 = Matrix::from_vec(d_out, d_in, r.f64s(d_out * d_in)?)?;
        let b0 = r.f64s(d_out)?;
        let w1 = Matrix::from_vec(d_in, d_in, r.f64s(d_in * d_in)?)?;
        let b1 = r.f64s(d_in)?;
        let w2 = Matrix::from_vec(d_out, d_in, r.f64s(d_out * d_in)?)?;
        let b2 = r.f64s(d_out)?;
        let dropout_p = r.f64s(1)?[0];
        r.finish()?;
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::format(name, FormatError::InvalidHeader(format!("dropout {dropout_p}"))));
        }
        Ok(HeadParams { w0, b0, w1, b1, w2, b2, dropout_p })
    }
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

impl HeadGrads {
    pub fn add_assign(&mut self, o: &HeadGrads) -> Result<()> {
        self.w0.add_assign(&o.w0)?;
        self.w1.add_assign(&o.w1)?;
        self.w2.add_assign(&o.w2)?;
        for (a, b) in [(&mut self.b0, &o.b0), (&mut self.b1, &o.b1), (&mut self.b2, &o.b2)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, f: f64) {
        self.w0.scale(f);
        self.w1.scale(f);
        self.w2.scale(f);
        for b in [&mut self.b0, &mut self.b1, &mut self.b2] {
            b.iter_mut().for_each(|x| *x *= f);
        }
    }

    /// Flat views in the same order as [`HeadParams::blocks_mut`].
    pub fn blocks(&self) -> [&[f64]; 6] {
        [
            self.w0.as_slice(),
            &self.b0,
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
        ]
    }
}

/// Head training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d_stego: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub head_lr: f64,
    pub dropout: f64,
    pub pair: PairLossConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Contract("steps must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Contract("batch_size must be >= 2 for random pairs".into()));
        }
        if self.d_stego == 0 {
            return Err(Error::Contract("d_stego must be >= 1".into()));
        }
        self.pair.validate()
    }
}

/// Random choices for one anchor image in one step.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorPlan {
    pub anchor: usize,
    pub anchor_coords: Vec<(usize, usize)>,
    pub self_coords: Vec<(usize, usize)>,
    pub knn: usize,
    pub knn_coords: Vec<(usize, usize)>,
    pub rand: Vec<usize>,
    pub rand_coords: Vec<Vec<(usize, usize)>>,
    /// Seeds the dropout masks of this anchor's forward passes.
    pub mask_seed: u64,
}

/// Draws the batch, sampled coordinates and partners of one training step.
///
/// `neighbors[i]` lists the kNN partner indices of image `i`.
pub fn plan_step<R: Rng + ?Sized>(
    images: &[&FeatureMap],
    neighbors: &[Vec<usize>],
    batch_size: usize,
    pair: &PairLossConfig,
    rng: &mut R,
) -> Result<Vec<AnchorPlan>> {
    if batch_size > images.len() {
        return Err(Error::Size(format!(
            "batch size {batch_size} exceeds the {} training images",
            images.len()
        )));
    }
    if batch_size < 2 {
        return Err(Error::Contract("batch size must be >= 2".into()));
    }
    let mut batch = index::sample(rng, images.len(), batch_size).into_vec();
    batch.sort_unstable();
    let coords = |i: usize, rng: &mut R| {
        sample_coords(images[i].height(), images[i].width(), pair.feature_samples, rng)
    };
    let mut plans = Vec::with_capacity(batch_size);
    for (pos, &anchor) in batch.iter().enumerate() {
        let anchor_coords = coords(anchor, rng);
        let self_coords = coords(anchor, rng);
        let nbrs = &neighbors[anchor];
        if nbrs.is_empty() {
            return Err(Error::Contract(format!("image {anchor} has no kNN partners")));
        }
        let knn = nbrs[rng.random_range(0..nbrs.len())];
        let knn_coords = coords(knn, rng);

        let others: Vec<usize> = batch
            .iter()
            .enumerate()
            .filter(|&(p, _)| p != pos)
            .map(|(_, &i)| i)
            .collect();
        let mut rand = Vec::with_capacity(pair.negative_samples);
        for _ in 0..pair.negative_samples {
            let mut pick = others[rng.random_range(0..others.len())];
            let mut retries = 0;
            while rand.contains(&pick) && retries < 10 {
                pick = others[rng.random_range(0..others.len())];
                retries += 1;
            }
            rand.push(pick);
        }
        let rand_coords = rand.iter().map(|&i| coords(i, rng)).collect();
        plans.push(AnchorPlan {
            anchor,
            anchor_coords,
            self_coords,
            knn,
            knn_coords,
            rand,
            rand_coords,
            mask_seed: rng.random(),
        });
    }
    Ok(plans)
}

/// Loss and parameter gradients of one anchor's plan.
pub fn anchor_loss(
    params: &HeadParams,
    images: &[&FeatureMap],
    plan: &AnchorPlan,
    pair: &PairLossConfig,
    mode: Mode,
) -> Result<(f64, HeadGrads)> {
    let mut mask_rng = ChaCha8Rng::seed_from_u64(plan.mask_seed);
    let mut sets: Vec<(&FeatureMap, &[(usize, usize)])> = vec![
        (images[plan.anchor], &plan.anchor_coords),
        (images[plan.anchor], &plan.self_coords),
        (images[plan.knn], &plan.knn_coords),
    ];
    for (&i, c) in plan.rand.iter().zip(&plan.rand_coords) {
        sets.push((images[i], c));
    }
    let mut raws = Vec::with_capacity(sets.len());
    let mut outs = Vec::with_capacity(sets.len());
    let mut caches = Vec::with_capacity(sets.len());
    for (img, coords) in sets {
        let raw = img.gather(coords);
        let (out, cache) = params.forward(&raw, mode, &mut mask_rng)?;
        raws.push(raw);
        outs.push(out);
        caches.push(cache);
    }
    let ts: Vec<TokenSet<'_>> = raws
        .iter()
        .zip(&outs)
        .map(|(raw, head)| TokenSet { raw, head })
        .collect();
    let result = combined_loss(ts[0], ts[1], ts[2], &ts[3..], pair)?;
    let upstream = [&result.grad_anchor, &result.grad_self, &result.grad_knn]
        .into_iter()
        .chain(result.grad_rand.iter());
    let mut grads = params.zero_grads();
    for (cache, up) in caches.iter().zip(upstream) {
        let (g, _) = params.backward(cache, up, false)?;
        grads.add_assign(&g)?;
    }
    Ok((result.loss, grads))
}

/// Mean loss and gradients over a step's anchors. Anchors are evaluated in
/// parallel and reduced in plan order, so results do not depend on the thread count.
pub fn step_loss(
    params: &HeadParams,
    images: &[&FeatureMap],
    plans: &[AnchorPlan],
    pair: &PairLossConfig,
    mode: Mode,
) -> Result<(f64, HeadGrads)> {
    let per_anchor: Vec<(f64, HeadGrads)> = plans
        .par_iter()
        .map(|p| anchor_loss(params, images, p, pair, mode))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grads = params.zero_grads();
    for (l, g) in &per_anchor {
        total += l;
        grads.add_assign(g)?;
    }
    let n = plans.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: HeadParams,
    /// Mean loss of each step, before that step's update.
    pub losses: Vec<f64>,
}

/// Maps every image to the indices of its kNN partners.
pub fn neighbor_indices(ids: &[&str], knn: &KnnIndex) -> Result<Vec<Vec<usize>>> {
    let lookup: std::collections::HashMap<&str, usize> =
        ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    ids.iter()
        .map(|id| {
            let list = knn
                .neighbors_of(id)
                .ok_or_else(|| Error::Contract(format!("kNN index has no entry for {id:?}")))?;
            list.iter()
                .map(|n| {
                    lookup.get(n.as_str()).copied().ok_or_else(|| {
                        Error::Contract(format!("neighbour {n:?} of {id:?} is not a training image"))
                    })
                })
                .collect()
        })
        .collect()
}

/// Trains a head on `(id, features)` pairs with the correlation loss.
pub fn train_head(images: &[(&str, &FeatureMap)], knn: &KnnIndex, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_head_observed(images, knn, cfg, |_, _| Ok(()))
}

/// Like [`train_head`], calling `observer(step, params)` after every update.
pub fn train_head_observed<F>(
    images: &[(&str, &FeatureMap)],
    knn: &KnnIndex,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &HeadParams) -> Result<()>,
{
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Size("no training images".into()));
    }
    let d_in = images[0].1.dim();
    if let Some((_, f)) = images.iter().find(|(_, f)| f.dim() != d_in) {
        return Err(Error::Dimension {
            context: "train_head feature dim",
            expected: d_in,
            found: f.dim(),
        });
    }
    let ids: Vec<&str> = images.iter().map(|(id, _)| *id).collect();
    let maps: Vec<&FeatureMap> = images.iter().map(|(_, f)| *f).collect();
    let neighbors = neighbor_indices(&ids, knn)?;
    if cfg.batch_size > maps.len() {
        return Err(Error::Size(format!(
            "batch size {} exceeds the {} training images",
            cfg.batch_size,
            maps.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = HeadParams::init(d_in, cfg.d_stego, cfg.dropout, &mut rng)?;
    let mut adam = AdamState::new(&params.block_sizes(), cfg.head_lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let plans = plan_step(&maps, &neighbors, cfg.batch_size, &cfg.pair, &mut rng)?;
        let (loss, grads) = step_loss(&params, &maps, &plans, &cfg.pair, Mode::Train)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        losses.push(loss);
        let gb = grads.blocks();
        let mut blocks: Vec<ParamBlock<'_>> = params
            .blocks_mut()
            .into_iter()
            .zip(gb)
            .map(|((name, params), grads)| ParamBlock { name, params, grads })
            .collect();
        adam.step(&mut blocks)?;
        if step % 50 == 0 {
            log::debug!("head step {step}: loss {loss:.6}");
        }
        observer(step + 1, &params)?;
    }
    Ok(TrainOutcome { params, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::build_knn_index;
    use rand_distr::StandardNormal;

    fn random_tokens(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn random_head(d_in: usize, d_out: usize, p: f64, seed: u64) -> HeadParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = HeadParams::init(d_in, d_out, p, &mut rng).unwrap();
        for b in [&mut h.b0, &mut h.b1, &mut h.b2] {
            b.iter_mut().for_each(|x| *x = rng.random_range(-0.3..0.3));
        }
        h
    }

    #[test]
    fn zero_params_give_zero_output() {
        let h = HeadParams::zeros(5, 3, 0.1).unwrap();
        let out = h.apply(&random_tokens(4, 5, 1)).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cocostuff_shapes() {
        let h = random_head(768, 90, 0.1, 2);
        let out = h.apply(&random_tokens(3, 768, 3)).unwrap();
        assert_eq!((out.rows(), out.cols()), (3, 90));
        assert!(h.apply(&random_tokens(3, 384, 3)).is_err());
    }

    #[test]
    fn eval_is_deterministic_and_matches_train_without_dropout() {
        let h = random_head(6, 3, 0.1, 4);
        let t = random_tokens(5, 6, 5);
        assert_eq!(h.apply(&t).unwrap(), h.apply(&t).unwrap());

        let h0 = HeadParams { dropout_p: 0.0, ..h.clone() };
        let (train, _) = h0.forward(&t, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(train, h0.apply(&t).unwrap());
    }

    #[test]
    fn tokens_are_processed_independently() {
        let h = random_head(4, 2, 0.0, 6);
        let t = random_tokens(5, 4, 7);
        let perm = [3usize, 0, 4, 1, 2];
        let out = h.apply(&t).unwrap();
        let out_p = h.apply(&t.select_rows(&perm)).unwrap();
        assert_eq!(out_p, out.select_rows(&perm));
    }

    #[test]
    fn backward_zero_and_linearity() {
        let h = random_head(4, 3, 0.2, 8);
        let t = random_tokens(6, 4, 9);
        let (_, cache) = h.forward(&t, Mode::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (g, _) = h.backward(&cache, &Matrix::zeros(6, 3), false).unwrap();
        assert_eq!(g, h.zero_grads());

        let up = random_tokens(6, 3, 10);
        let mut up2 = up.clone();
        up2.scale(2.0);
        let (g1, _) = h.backward(&cache, &up, false).unwrap();
        let (g2, _) = h.backward(&cache, &up2, false).unwrap();
        let mut g1x2 = g1.clone();
        g1x2.scale(2.0);
        for (a, b) in g1x2.blocks().iter().zip(g2.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
        assert!(h.backward(&cache, &Matrix::zeros(5, 3), false).is_err());
    }

    /// Scalar test objective: `sum(out ⊙ weights)` so that dLoss/dOut = weights.
    fn objective(h: &HeadParams, t: &Matrix, w: &Matrix, seed: u64) -> f64 {
        let (out, _) = h.forward(t, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        out.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let h = random_head(5, 3, 0.25, 11);
        let t = random_tokens(4, 5, 12);
        let w = random_tokens(4, 3, 13);
        let (_, cache) = h.forward(&t, Mode::Train, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let (g, d_in) = h.backward(&cache, &w, true).unwrap();
        let step = 1e-5;
        let analytic = g.blocks().iter().map(|b| b.to_vec()).collect::<Vec<_>>();
        for block in 0..6 {
            for i in 0..analytic[block].len() {
                let mut plus = h.clone();
                plus.blocks_mut()[block].1[i] += step;
                let mut minus = h.clone();
                minus.blocks_mut()[block].1[i] -= step;
                let fd = (objective(&plus, &t, &w, 77) - objective(&minus, &t, &w, 77)) / (2.0 * step);
                let an = analytic[block][i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "block {block} idx {i}: fd {fd} vs {an}");
            }
        }
        let d_in = d_in.unwrap();
        for i in 0..t.as_slice().len() {
            let mut plus = t.clone();
            plus.as_mut_slice()[i] += step;
            let mut minus = t.clone();
            minus.as_mut_slice()[i] -= step;
            let fd = (objective(&h, &plus, &w, 77) - objective(&h, &minus, &w, 77)) / (2.0 * step);
            let an = d_in.as_slice()[i];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("corrdistill-head-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("h.cdhd");
        let h = random_head(7, 3, 0.1, 14);
        h.write(&p).unwrap();
        assert_eq!(HeadParams::read(&p).unwrap(), h);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"CDHD");
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            HeadParams::read(&p),
            Err(Error::Format { source: FormatError::Truncated { .. }, .. })
        ));
    }

    /// Two-cluster toy dataset: tokens are ±e0-ish with small noise.
    fn two_cluster_images(n: usize, seed: u64) -> Vec<(String, FeatureMap)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 8;
        (0..n)
            .map(|i| {
                let mut data = Vec::new();
                for t in 0..16 {
                    let class = (t + i) % 2;
                    for k in 0..d {
                        let base = if k == class { 1.0 } else { 0.0 };
                        data.push(base + 0.05 * rng.sample::<f64, _>(StandardNormal) as f32 as f64);
                    }
                }
                let data = data.into_iter().map(|v| v as f32).collect();
                (format!("img{i:02}"), FeatureMap::new(4, 4, d, data).unwrap())
            })
            .collect()
    }

    fn toy_config(steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            d_stego: 4,
            steps,
            batch_size: 4,
            head_lr: 0.01,
            dropout: 0.1,
            pair: PairLossConfig {
                b_self: 0.12,
                b_knn: 0.20,
                b_rand: 1.00,
                lambda_self: 0.10,
                lambda_knn: 1.00,
                lambda_rand: 0.15,
                zero_clamp: false,
                pointwise_center: true,
                feature_samples: 4,
                negative_samples: 2,
            },
            seed,
        }
    }

    #[test]
    fn training_pulls_same_cluster_tokens_together() {
        let images = two_cluster_images(10, 3);
        let refs: Vec<(&str, &FeatureMap)> = images.iter().map(|(id, f)| (id.as_str(), f)).collect();
        let knn = build_knn_index(refs.iter().copied(), 3).unwrap();
        let out = train_head(&refs, &knn, &toy_config(50, 1)).unwrap();
        assert_eq!(out.losses.len(), 50);

        // mean self-pair similarity over same-cluster token pairs
        let f = images[0].1.to_matrix();
        let z = out.params.apply(&f).unwrap();
        let c = crate::numerics::cosine_similarity_matrix(&z, &z, 1e-12).unwrap();
        let (mut sum, mut n) = (0.0, 0);
        for i in 0..16 {
            for j in 0..16 {
                if i % 2 == j % 2 {
                    sum += c.get(i, j);
                    n += 1;
                }
            }
        }
        assert!(sum / n as f64 > 0.9, "same-cluster similarity {}", sum / n as f64);
    }

    #[test]
    fn training_is_deterministic() {
        let images = two_cluster_images(8, 4);
        let refs: Vec<(&str, &FeatureMap)> = images.iter().map(|(id, f)| (id.as_str(), f)).collect();
        let knn = build_knn_index(refs.iter().copied(), 3).unwrap();
        let a = train_head(&refs, &knn, &toy_config(10, 5)).unwrap();
        let b = train_head(&refs, &knn, &toy_config(10, 5)).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.losses), bits(&b.losses));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn training_rejects_oversized_batch() {
        let images = two_cluster_images(4, 4);
        let refs: Vec<(&str, &FeatureMap)> = images.iter().map(|(id, f)| (id.as_str(), f)).collect();
        let knn = build_knn_index(refs.iter().copied(), 3).unwrap();
        let mut cfg = toy_config(1, 0);
        cfg.batch_size = 5;
        assert!(matches!(train_head(&refs, &knn, &cfg), Err(Error::Size(_))));
    }
}
