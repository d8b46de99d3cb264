//! Client side of a round: local adapter training, collection of correctly
//! predicted features, prototypes, the upload package and installation of
//! the server broadcast.

mod package;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::encoder::EncoderState;
use crate::error::{param_err, shape_err, Error, Result};
use crate::lora::{DenseDelta, LoraDelta};
use crate::numerics::{Scalar, SimRng, Vector};
use crate::objectives::{adam_step, local_step, predict_label, AdamState, ObjectiveConfig};

pub use package::{read_package, write_package, PackageSidecar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub objective: ObjectiveConfig,
    pub upload_ratio: f64,
    pub lr: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self { local_epochs: 1, batch_size: 64, objective: ObjectiveConfig::default(), upload_ratio: 1.0, lr: 1e-3 }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("local_epochs and batch_size must be at least 1".into()));
        }
        if !(self.upload_ratio > 0.0 && self.upload_ratio <= 1.0) {
            return Err(Error::Config(format!("upload_ratio must lie in (0, 1], got {}", self.upload_ratio)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be nonnegative, got {}", self.lr)));
        }
        self.objective.validate()
    }
}

/// What a client sends to the server after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct UploadPackage<T> {
    pub client_id: usize,
    /// Cumulative effective delta per adapted block (`offset + γ·B·A`).
    pub deltas: Vec<DenseDelta<T>>,
    /// This round's adapter factors; with the offset the server sent, they
    /// determine `deltas`.
    pub adapters: Vec<LoraDelta<T>>,
    /// Mean correctly predicted feature per class.
    pub prototypes: BTreeMap<usize, Vector<T>>,
    /// Shipped subset of the correctly predicted `(feature, label)` pairs.
    pub shared_feats: Vec<(Vector<T>, usize)>,
    /// `N_{k,c}`
    pub class_counts: Vec<usize>,
    /// `Ñ_{k,c}`, before upload subsampling.
    pub correct_counts: Vec<usize>,
    /// Set when the shard was empty and no training happened.
    pub empty: bool,
}

impl<T: Scalar> UploadPackage<T> {
    /// `N_k`
    pub fn num_samples(&self) -> usize {
        self.class_counts.iter().sum()
    }

    /// `Ñ_k`, before upload subsampling.
    pub fn num_correct(&self) -> usize {
        self.correct_counts.iter().sum()
    }
}

/// Per-round training summary that stays on the client.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalReport {
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub steps: usize,
    /// Accuracy of the final-epoch pre-step predictions.
    pub final_epoch_accuracy: f64,
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    Factored,
    Dense,
}

/// Scalars uploaded by one package: adapter parameters (factored) or dense
/// delta entries (dense), plus `d_embed` per prototype and `d_embed + 1`
/// per shipped feature.
pub fn upload_cost<T: Scalar>(pkg: &UploadPackage<T>, mode: CostMode, d_embed: usize) -> usize {
    let weights: usize = match mode {
        CostMode::Factored => pkg.adapters.iter().map(LoraDelta::param_count).sum(),
        CostMode::Dense => pkg.deltas.iter().map(DenseDelta::scalar_count).sum(),
    };
    weights + d_embed * pkg.prototypes.len() + (d_embed + 1) * pkg.shared_feats.len()
}

/// Mean feature per label; labels absent from the input are absent from
/// the map.
pub fn compute_prototypes<T: Scalar>(correct_feats: &[(Vector<T>, usize)]) -> BTreeMap<usize, Vector<T>> {
    let mut sums: BTreeMap<usize, (Vector<T>, usize)> = BTreeMap::new();
    for (z, y) in correct_feats {
        let e = sums.entry(*y).or_insert_with(|| (Vector::zeros(z.dim()), 0));
        e.0.axpy(T::one(), z);
        e.1 += 1;
    }
    sums.into_iter().map(|(c, (s, n))| (c, s.scaled(T::one() / T::of(n as f64)))).collect()
}

#[derive(Debug, Clone)]
pub struct ClientState<T> {
    id: usize,
    shard: Dataset<T>,
    encoder: EncoderState<T>,
    adam: AdamState<T>,
    text_feats: Vec<Vector<T>>,
    rng: SimRng,
    round: usize,
}

impl<T: Scalar> ClientState<T> {
    /// Client holding `shard`, starting from `backbone` with fresh adapters.
    /// `rng` should already be specific to this client.
    pub fn new(
        id: usize,
        shard: Dataset<T>,
        backbone: &EncoderState<T>,
        text_feats: Vec<Vector<T>>,
        rng: SimRng,
        lr: f64,
    ) -> Result<Self> {
        if text_feats.len() != shard.num_classes() {
            return shape_err(format!("{} text features for {} classes", text_feats.len(), shard.num_classes()));
        }
        let mut encoder = backbone.clone();
        encoder.reset_adapters(&rng.split_indexed("round", 0).split("adapters"))?;
        let adam = fresh_adam(&mut encoder, lr);
        Ok(Self { id, shard, encoder, adam, text_feats, rng, round: 0 })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shard(&self) -> &Dataset<T> {
        &self.shard
    }

    pub fn encoder(&self) -> &EncoderState<T> {
        &self.encoder
    }

    pub fn text_feats(&self) -> &[Vector<T>] {
        &self.text_feats
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// Cumulative deltas of the client's current model.
    pub fn current_deltas(&self) -> Result<Vec<DenseDelta<T>>> {
        self.encoder.cumulative_deltas()
    }

    /// `E` epochs of mini-batch Adam on the client objective, then the
    /// upload package. Correct predictions are collected from the final
    /// epoch's forward passes.
    pub fn local_update(&mut self, cfg: &ClientConfig) -> Result<(UploadPackage<T>, LocalReport)> {
        cfg.validate()?;
        let class_counts = self.shard.class_counts();
        let num_classes = self.shard.num_classes();
        if self.shard.is_empty() {
            let pkg = UploadPackage {
                client_id: self.id,
                deltas: self.encoder.cumulative_deltas()?,
                adapters: self.adapters()?,
                prototypes: BTreeMap::new(),
                shared_feats: Vec::new(),
                class_counts,
                correct_counts: vec![0; num_classes],
                empty: true,
            };
            return Ok((pkg, LocalReport::default()));
        }
        self.adam.lr = cfg.lr;
        let round_rng = self.rng.split_indexed("round", self.round);
        let mut correct: Vec<(Vector<T>, usize)> = Vec::new();
        let (mut loss_sum, mut ce_sum, mut steps, mut clamped, mut hits) = (0.0, 0.0, 0, 0, 0);
        for epoch in 0..cfg.local_epochs {
            let last = epoch + 1 == cfg.local_epochs;
            let mut order: Vec<usize> = (0..self.shard.len()).collect();
            round_rng.split_indexed("epoch", epoch).shuffle(&mut order);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<(Vector<T>, usize)> = chunk.iter().map(|&i| self.shard.samples()[i].clone()).collect();
                let step = local_step(&batch, &self.encoder, &self.text_feats, &cfg.objective)?;
                if last {
                    for (z, (_, y)) in step.features.into_iter().zip(&batch) {
                        if predict_label(&z, &self.text_feats, &cfg.objective)? == *y {
                            correct.push((z, *y));
                            hits += 1;
                        }
                    }
                }
                loss_sum += step.parts.total.as_f64();
                ce_sum += step.parts.ce.as_f64();
                clamped += step.parts.clamped;
                steps += 1;
                let grads = step.grads.flat();
                let mut params = self.encoder.trainable_mut();
                adam_step(&mut params, &grads, &mut self.adam)?;
            }
        }
        let prototypes = compute_prototypes(&correct);
        let mut correct_counts = vec![0; num_classes];
        for (_, y) in &correct {
            correct_counts[*y] += 1;
        }
        let shared_feats = subsample(correct, cfg.upload_ratio, &mut round_rng.split("share"));
        let pkg = UploadPackage {
            client_id: self.id,
            deltas: self.encoder.cumulative_deltas()?,
            adapters: self.adapters()?,
            prototypes,
            shared_feats,
            class_counts,
            correct_counts,
            empty: false,
        };
        let report = LocalReport {
            mean_loss: loss_sum / steps as f64,
            mean_ce: ce_sum / steps as f64,
            steps,
            final_epoch_accuracy: hits as f64 / self.shard.len() as f64,
            clamped,
        };
        Ok((pkg, report))
    }

    fn adapters(&self) -> Result<Vec<LoraDelta<T>>> {
        self.encoder
            .adapters()
            .into_iter()
            .map(|a| a.cloned().ok_or_else(|| Error::Contract("adapted block without adapter".into())))
            .collect()
    }

    /// Installs the personalized deltas as frozen offsets under fresh
    /// zero-`B` adapters, replaces the text features and resets Adam.
    pub fn apply_broadcast(&mut self, personalized: &[DenseDelta<T>], text_feats: Vec<Vector<T>>) -> Result<()> {
        if text_feats.len() != self.text_feats.len() {
            return shape_err(format!(
                "broadcast has {} text features, expected {}",
                text_feats.len(),
                self.text_feats.len()
            ));
        }
        self.encoder.set_offsets(personalized)?;
        self.round += 1;
        self.encoder.reset_adapters(&self.rng.split_indexed("round", self.round).split("adapters"))?;
        self.text_feats = text_feats;
        let lr = self.adam.lr;
        self.adam = fresh_adam(&mut self.encoder, lr);
        Ok(())
    }
}

fn fresh_adam<T: Scalar>(encoder: &mut EncoderState<T>, lr: f64) -> AdamState<T> {
    AdamState::for_params(lr, &encoder.trainable_mut())
}

/// Uniform subset of `⌈ratio·n⌉` items, kept in their original order.
fn subsample<X>(items: Vec<X>, ratio: f64, rng: &mut SimRng) -> Vec<X> {
    let n = items.len();
    let keep = ((ratio * n as f64).ceil() as usize).min(n);
    if keep == n {
        return items;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut chosen = vec![false; n];
    for &i in &idx[..keep] {
        chosen[i] = true;
    }
    items.into_iter().zip(chosen).filter(|(_, c)| *c).map(|(x, _)| x).collect()
}

/// Checks the package invariants: `Ñ_{k,c} ≤ N_{k,c}`, a prototype exactly
/// for classes with `Ñ_{k,c} > 0`, and shipped labels within range.
pub fn check_package<T: Scalar>(pkg: &UploadPackage<T>) -> Result<()> {
    if pkg.class_counts.len() != pkg.correct_counts.len() {
        return Err(Error::Contract("count tables of unequal length".into()));
    }
    for (c, (&n, &m)) in pkg.class_counts.iter().zip(&pkg.correct_counts).enumerate() {
        if m > n {
            return Err(Error::Contract(format!("class {c}: {m} correct of {n} samples")));
        }
        if (m > 0) != pkg.prototypes.contains_key(&c) {
            return Err(Error::Contract(format!("class {c}: prototype presence disagrees with count {m}")));
        }
    }
    if pkg.shared_feats.len() > pkg.num_correct() {
        return Err(Error::Contract("more shared features than correct predictions".into()));
    }
    if let Some((_, y)) = pkg.shared_feats.iter().find(|(_, y)| *y >= pkg.class_counts.len()) {
        return param_err(format!("shared feature label {y} out of range"));
    }
    Ok(())
}
