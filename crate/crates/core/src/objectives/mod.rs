//! Classification by similarity to class text features, the orthogonality
//! penalty on per-class feature means, the client and server training
//! objectives, and Adam.

mod adam;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{select_variant, ClassDescription, EncoderGrads, EncoderState, ForwardCache};
use crate::error::{param_err, shape_err, Error, Result};
use crate::numerics::{masked_softmax, Matrix, Scalar, SimKind, SimRng, Similarity, Vector};

pub use adam::{adam_step, AdamState};

/// Floor applied to the label probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub tau: f64,
    pub mu: f64,
    pub sim_kind: SimKind,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { tau: 2.66, mu: 0.1, sim_kind: SimKind::Cosine }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be nonnegative, got {}", self.mu)));
        }
        Ok(())
    }

    fn similarity(&self) -> Similarity {
        Similarity::new(self.sim_kind)
    }
}

/// Class probabilities `softmax(sim(z, tᶜ) / τ)`.
pub fn predict_probs<T: Scalar>(zv: &Vector<T>, text_feats: &[Vector<T>], cfg: &ObjectiveConfig) -> Result<Vector<T>> {
    if text_feats.is_empty() {
        return param_err("prediction needs at least one class");
    }
    let sim = cfg.similarity();
    let inv_tau = T::of(1.0 / cfg.tau);
    let logits = text_feats.iter().map(|t| Ok(sim.score(zv, t)? * inv_tau)).collect::<Result<Vec<_>>>()?;
    masked_softmax(&Vector::from_vec(logits), &[])
}

/// Index of the most probable class (first wins ties).
pub fn predict_label<T: Scalar>(zv: &Vector<T>, text_feats: &[Vector<T>], cfg: &ObjectiveConfig) -> Result<usize> {
    Ok(predict_probs(zv, text_feats, cfg)?.argmax())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy<T> {
    pub loss: T,
    /// Samples whose label probability fell below [`PROB_FLOOR`].
    pub clamped: usize,
}

pub fn cross_entropy<T: Scalar>(probs: &[Vector<T>], labels: &[usize]) -> Result<CrossEntropy<T>> {
    if probs.len() != labels.len() {
        return shape_err(format!("{} probability rows for {} labels", probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return param_err("cross-entropy of an empty batch");
    }
    let floor = T::of(PROB_FLOOR);
    let mut total = T::zero();
    let mut clamped = 0;
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.dim() {
            return shape_err(format!("label {y} outside {} classes", p.dim()));
        }
        let mut q = p[y];
        if q < floor {
            q = floor;
            clamped += 1;
        }
        total -= q.ln();
    }
    Ok(CrossEntropy { loss: total / T::of(labels.len() as f64), clamped })
}

/// Per-class means of `feats`, one row per distinct label in ascending order.
fn class_means<T: Scalar>(feats: &[Vector<T>], labels: &[usize]) -> Result<(Vec<usize>, Matrix<T>, Vec<usize>)> {
    if feats.len() != labels.len() {
        return shape_err("one label per feature required");
    }
    if feats.is_empty() {
        return param_err("orthogonality penalty of an empty batch");
    }
    let dim = feats[0].dim();
    let mut groups: BTreeMap<usize, (Vector<T>, usize)> = BTreeMap::new();
    for (f, &y) in feats.iter().zip(labels) {
        if f.dim() != dim {
            return shape_err("features of unequal dimension");
        }
        let e = groups.entry(y).or_insert_with(|| (Vector::zeros(dim), 0));
        e.0.axpy(T::one(), f);
        e.1 += 1;
    }
    let mut classes = Vec::with_capacity(groups.len());
    let mut counts = Vec::with_capacity(groups.len());
    let mut rows = Vec::with_capacity(groups.len());
    for (c, (sum, n)) in groups {
        classes.push(c);
        counts.push(n);
        rows.push(sum.scaled(T::one() / T::of(n as f64)));
    }
    Ok((classes, Matrix::from_rows(&rows)?, counts))
}

/// `‖Z Zᵀ − I‖_F` where `Z` stacks the per-class batch means.
pub fn orthogonality_penalty<T: Scalar>(feats: &[Vector<T>], labels: &[usize]) -> Result<T> {
    Ok(orthogonality_with_grad(feats, labels, false)?.0)
}

/// Penalty and, optionally, its gradient with respect to each feature.
fn orthogonality_with_grad<T: Scalar>(
    feats: &[Vector<T>],
    labels: &[usize],
    want_grad: bool,
) -> Result<(T, Vec<Vector<T>>)> {
    let (classes, z, counts) = class_means(feats, labels)?;
    let mut m = z.matmul(&z.transpose())?;
    for i in 0..m.rows() {
        m.set(i, i, m.get(i, i) - T::one());
    }
    let loss = m.frobenius_norm();
    if !want_grad {
        return Ok((loss, Vec::new()));
    }
    let dim = z.cols();
    if loss == T::zero() {
        return Ok((loss, vec![Vector::zeros(dim); feats.len()]));
    }
    // ∂‖M‖_F/∂Z = 2·M·Z / ‖M‖_F
    let dz = m.matmul(&z)?.scaled(T::of(2.0) / loss);
    let grads = labels
        .iter()
        .map(|y| {
            let row = classes.binary_search(y).expect("label grouped above");
            let scale = T::one() / T::of(counts[row] as f64);
            Vector::from_vec(dz.row(row).iter().map(|&g| g * scale).collect())
        })
        .collect();
    Ok((loss, grads))
}

/// Components of the client objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<T> {
    pub ce: T,
    pub orth: T,
    pub total: T,
    pub clamped: usize,
}

/// `∂L/∂z` for `L = CE(softmax(sim(z, tᶜ)/τ))` averaged over `n`, along
/// with the contribution to each text feature.
#[allow(clippy::type_complexity)]
fn ce_feature_grads<T: Scalar>(
    feats: &[Vector<T>],
    labels: &[usize],
    text_feats: &[Vector<T>],
    cfg: &ObjectiveConfig,
) -> Result<(CrossEntropy<T>, Vec<Vector<T>>, Vec<Vector<T>>)> {
    let sim = cfg.similarity();
    let inv_tau = T::of(1.0 / cfg.tau);
    let inv_n = T::one() / T::of(feats.len() as f64);
    let mut probs = Vec::with_capacity(feats.len());
    let mut dfeat = Vec::with_capacity(feats.len());
    let mut dtext = vec![Vector::zeros(text_feats[0].dim()); text_feats.len()];
    for (z, &y) in feats.iter().zip(labels) {
        if y >= text_feats.len() {
            return shape_err(format!("label {y} outside {} classes", text_feats.len()));
        }
        let p = predict_probs(z, text_feats, cfg)?;
        let mut dz = Vector::zeros(z.dim());
        for (c, t) in text_feats.iter().enumerate() {
            let ds = (p[c] - if c == y { T::one() } else { T::zero() }) * inv_tau * inv_n;
            if ds == T::zero() {
                continue;
            }
            let (gz, gt) = sim.score_grad(z, t)?;
            dz.axpy(ds, &gz);
            dtext[c].axpy(ds, &gt);
        }
        probs.push(p);
        dfeat.push(dz);
    }
    Ok((cross_entropy(&probs, labels)?, dfeat, dtext))
}

/// Client objective `CE + μ·orth` on one batch of `(x, y)` pairs, with
/// gradients for the encoder's adapter factors.
pub fn local_objective<T: Scalar>(
    batch: &[(Vector<T>, usize)],
    encoder: &EncoderState<T>,
    text_feats: &[Vector<T>],
    cfg: &ObjectiveConfig,
) -> Result<(LossParts<T>, EncoderGrads<T>)> {
    let step = local_step(batch, encoder, text_feats, cfg)?;
    Ok((step.parts, step.grads))
}

/// Everything one local training step produces.
#[derive(Debug, Clone)]
pub struct LocalStep<T> {
    pub parts: LossParts<T>,
    pub grads: EncoderGrads<T>,
    /// Embeddings of the batch under the pre-step parameters.
    pub features: Vec<Vector<T>>,
}

/// [`local_objective`] that also returns the batch embeddings.
pub fn local_step<T: Scalar>(
    batch: &[(Vector<T>, usize)],
    encoder: &EncoderState<T>,
    text_feats: &[Vector<T>],
    cfg: &ObjectiveConfig,
) -> Result<LocalStep<T>> {
    if batch.is_empty() {
        return param_err("empty training batch");
    }
    if text_feats.is_empty() {
        return param_err("no class text features");
    }
    let composed = encoder.compose()?;
    let mut feats = Vec::with_capacity(batch.len());
    let mut caches: Vec<ForwardCache<T>> = Vec::with_capacity(batch.len());
    for (x, _) in batch {
        let (e, cache) = composed.forward(x)?;
        feats.push(e);
        caches.push(cache);
    }
    let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
    let (ce, mut dfeat, _) = ce_feature_grads(&feats, &labels, text_feats, cfg)?;
    let mu = T::of(cfg.mu);
    let orth = if cfg.mu > 0.0 {
        let (orth, og) = orthogonality_with_grad(&feats, &labels, true)?;
        for (d, g) in dfeat.iter_mut().zip(&og) {
            d.axpy(mu, g);
        }
        orth
    } else {
        orthogonality_penalty(&feats, &labels)?
    };
    let mut acc = composed.grad_accumulator();
    for (cache, d) in caches.iter().zip(&dfeat) {
        composed.accumulate(cache, d, &mut acc)?;
    }
    let grads = composed.finish(acc)?;
    let parts = LossParts { ce: ce.loss, orth, total: ce.loss + mu * orth, clamped: ce.clamped };
    Ok(LocalStep { parts, grads, features: feats })
}

/// Text features from one description variant per class.
pub fn text_features<T: Scalar>(
    text_encoder: &EncoderState<T>,
    descriptions: &[ClassDescription<T>],
    rng: &mut SimRng,
) -> Result<Vec<Vector<T>>> {
    let composed = text_encoder.compose()?;
    descriptions.iter().map(|d| composed.embed(select_variant(d, rng))).collect()
}

/// Server objective: CE of uploaded image features against text features
/// recomputed through `text_encoder`, with gradients for its adapters.
pub fn text_objective<T: Scalar>(
    uploaded: &[(Vector<T>, usize)],
    text_encoder: &EncoderState<T>,
    descriptions: &[ClassDescription<T>],
    cfg: &ObjectiveConfig,
    rng: &mut SimRng,
) -> Result<(CrossEntropy<T>, EncoderGrads<T>)> {
    if uploaded.is_empty() {
        return param_err("text objective needs at least one uploaded feature");
    }
    if descriptions.is_empty() {
        return param_err("no class descriptions");
    }
    if let Some((_, y)) = uploaded.iter().find(|(_, y)| *y >= descriptions.len()) {
        return Err(Error::Config(format!("label {y} has no description")));
    }
    let composed = text_encoder.compose()?;
    let mut text = Vec::with_capacity(descriptions.len());
    let mut caches = Vec::with_capacity(descriptions.len());
    for d in descriptions {
        let (t, cache) = composed.forward(select_variant(d, rng))?;
        text.push(t);
        caches.push(cache);
    }
    let feats: Vec<Vector<T>> = uploaded.iter().map(|(z, _)| z.clone()).collect();
    let labels: Vec<usize> = uploaded.iter().map(|(_, y)| *y).collect();
    let (ce, _, dtext) = ce_feature_grads(&feats, &labels, &text, cfg)?;
    let mut acc = composed.grad_accumulator();
    for (cache, d) in caches.iter().zip(&dtext) {
        composed.accumulate(cache, d, &mut acc)?;
    }
    Ok((ce, composed.finish(acc)?))
}
