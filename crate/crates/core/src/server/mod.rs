//! Server side of a round: text-tower training on shared features,
//! prototype-driven aggregation coefficients, personalized and global
//! image deltas, and the boundary-layer splice.

mod aggregate;

use serde::{Deserialize, Serialize};

use crate::client::UploadPackage;
use crate::encoder::{ClassDescription, EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::lora::DenseDelta;
use crate::numerics::{Scalar, SimKind, SimRng, Similarity, Vector};
use crate::objectives::{adam_step, text_objective, AdamState, ObjectiveConfig};

pub use aggregate::{
    influence_coefficients, query_aggregate, relational_attention, splice, weighted_aggregate, CoefficientMatrix,
    Prototypes,
};

/// How personalized image deltas are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Prototype attention per client, spliced with the global deltas.
    #[default]
    Query,
    /// Every client receives the sample-weighted global deltas.
    WeightedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub boundary_m: usize,
    pub ex_query: bool,
    pub sim_kind: SimKind,
    pub text_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub objective: ObjectiveConfig,
    pub mode: AggregationMode,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            boundary_m: 9,
            ex_query: true,
            sim_kind: SimKind::Cosine,
            text_epochs: 1,
            batch_size: 64,
            lr: 1e-3,
            objective: ObjectiveConfig::default(),
            mode: AggregationMode::Query,
        }
    }
}

/// Result of one round of text training.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTraining<T> {
    pub text_feats: Vec<Vector<T>>,
    /// Mean batch loss over the round (`None` when nothing was uploaded).
    pub mean_loss: Option<f64>,
    pub num_features: usize,
}

/// What the server sends back after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast<T> {
    /// Spliced per-client deltas, indexed by client id.
    pub personalized: Vec<Vec<DenseDelta<T>>>,
    pub global: Vec<DenseDelta<T>>,
    pub text_feats: Vec<Vector<T>>,
    pub coefficients: Option<CoefficientMatrix<T>>,
}

#[derive(Debug, Clone)]
pub struct ServerState<T> {
    text_encoder: EncoderState<T>,
    descriptions: Vec<ClassDescription<T>>,
    image_config: EncoderConfig,
    global_deltas: Vec<DenseDelta<T>>,
    config: ServerConfig,
    adam: AdamState<T>,
    rng: SimRng,
    round: usize,
}

impl<T: Scalar> ServerState<T> {
    /// Server around a text tower (adapters attached by the caller) for
    /// clients whose image towers follow `image_config`. The global deltas
    /// start at zero.
    pub fn new(
        text_encoder: EncoderState<T>,
        descriptions: Vec<ClassDescription<T>>,
        image_config: EncoderConfig,
        config: ServerConfig,
        rng: SimRng,
    ) -> Result<Self> {
        if descriptions.is_empty() {
            return Err(Error::Config("server needs at least one class description".into()));
        }
        if config.text_epochs > 0 && config.batch_size == 0 {
            return Err(Error::Config("text batch_size must be at least 1".into()));
        }
        config.objective.validate()?;
        image_config.validate()?;
        let (l, m, depth) = (image_config.lora_start, config.boundary_m, image_config.num_blocks);
        if m < l || m > depth + 1 {
            return Err(Error::Config(format!("boundary m={m} must lie in [{l}, {}]", depth + 1)));
        }
        let initial_global = image_config
            .adapted_blocks()
            .map(|i| DenseDelta::zeros(image_config.d_hidden, image_config.block_in(i)))
            .collect();
        let mut text_encoder = text_encoder;
        let adam = AdamState::for_params(config.lr, &text_encoder.trainable_mut());
        Ok(Self {
            text_encoder,
            descriptions,
            image_config,
            global_deltas: initial_global,
            config,
            adam,
            rng,
            round: 0,
        })
    }

    pub fn text_encoder(&self) -> &EncoderState<T> {
        &self.text_encoder
    }

    pub fn descriptions(&self) -> &[ClassDescription<T>] {
        &self.descriptions
    }

    pub fn global_deltas(&self) -> &[DenseDelta<T>] {
        &self.global_deltas
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn image_config(&self) -> &EncoderConfig {
        &self.image_config
    }

    /// Text features broadcast to clients: variant 0 of every class through
    /// the current text tower.
    pub fn text_features(&self) -> Result<Vec<Vector<T>>> {
        let composed = self.text_encoder.compose()?;
        self.descriptions.iter().map(|d| composed.embed(&d.variants[0])).collect()
    }

    /// `text_epochs` Adam epochs of the text objective over every shared
    /// feature (client order), then the refreshed text features.
    pub fn train_text_encoder(&mut self, packages: &[UploadPackage<T>]) -> Result<TextTraining<T>> {
        let union: Vec<(Vector<T>, usize)> = packages.iter().flat_map(|p| p.shared_feats.iter().cloned()).collect();
        if union.is_empty() || self.config.text_epochs == 0 {
            return Ok(TextTraining { text_feats: self.text_features()?, mean_loss: None, num_features: union.len() });
        }
        let round_rng = self.rng.split_indexed("round", self.round);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for epoch in 0..self.config.text_epochs {
            let epoch_rng = round_rng.split_indexed("epoch", epoch);
            let mut order: Vec<usize> = (0..union.len()).collect();
            epoch_rng.split("order").shuffle(&mut order);
            let mut variants = epoch_rng.split("variants");
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<(Vector<T>, usize)> = chunk.iter().map(|&i| union[i].clone()).collect();
                let (ce, grads) = text_objective(
                    &batch,
                    &self.text_encoder,
                    &self.descriptions,
                    &self.config.objective,
                    &mut variants,
                )?;
                loss_sum += ce.loss.as_f64();
                steps += 1;
                let g = grads.flat();
                let mut params = self.text_encoder.trainable_mut();
                adam_step(&mut params, &g, &mut self.adam)?;
            }
        }
        Ok(TextTraining {
            text_feats: self.text_features()?,
            mean_loss: Some(loss_sum / steps as f64),
            num_features: union.len(),
        })
    }

    /// Coefficients, personalized and global deltas for `packages` (one per
    /// client, ascending id). Updates the stored global deltas.
    pub fn aggregate_and_broadcast(
        &mut self,
        packages: &[UploadPackage<T>],
        text_feats: Vec<Vector<T>>,
    ) -> Result<Broadcast<T>> {
        let (personalized, global, coefficients) = self.aggregate(packages, self.config.ex_query)?;
        self.global_deltas = global.clone();
        self.round += 1;
        Ok(Broadcast { personalized, global, text_feats, coefficients })
    }

    /// Pure aggregation with an explicit ex-query choice; leaves the state
    /// untouched.
    #[allow(clippy::type_complexity)]
    pub fn aggregate(
        &self,
        packages: &[UploadPackage<T>],
        ex_query: bool,
    ) -> Result<(Vec<Vec<DenseDelta<T>>>, Vec<DenseDelta<T>>, Option<CoefficientMatrix<T>>)> {
        if packages.is_empty() {
            return Err(Error::Parameter("aggregation needs at least one package".into()));
        }
        for (k, p) in packages.iter().enumerate() {
            if p.client_id != k {
                return Err(Error::Contract(format!("package {k} comes from client {}", p.client_id)));
            }
        }
        let enc = &self.image_config;
        let deltas: Vec<Vec<DenseDelta<T>>> = packages.iter().map(|p| p.deltas.clone()).collect();
        let counts: Vec<usize> = packages.iter().map(|p| p.num_samples()).collect();
        let global = weighted_aggregate(&deltas, &counts)?;
        match self.config.mode {
            AggregationMode::WeightedOnly => Ok((vec![global.clone(); packages.len()], global, None)),
            AggregationMode::Query => {
                let protos: Vec<Prototypes<T>> = packages.iter().map(|p| p.prototypes.clone()).collect();
                let class_counts: Vec<Vec<usize>> = packages.iter().map(|p| p.class_counts.clone()).collect();
                let coeffs =
                    influence_coefficients(&protos, &class_counts, ex_query, Similarity::new(self.config.sim_kind))?;
                let mut personalized = Vec::with_capacity(packages.len());
                for k in 0..packages.len() {
                    let row = Vector::from_vec(coeffs.alpha.row(k).to_vec());
                    let init = query_aggregate(&row, &deltas)?;
                    personalized.push(splice(&global, &init, enc.lora_start, self.config.boundary_m, enc.num_blocks)?);
                }
                Ok((personalized, global, Some(coeffs)))
            }
        }
    }
}

/// Aggregation report for one round, as exported to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    pub round: usize,
    pub alpha: Option<Vec<Vec<f64>>>,
    pub global_delta_norm: f64,
    pub personalized_delta_norms: Vec<f64>,
}

/// `√Σ‖ΔWᵢ‖_F²` over a stack of deltas.
pub fn stack_norm<T: Scalar>(deltas: &[DenseDelta<T>]) -> f64 {
    deltas.iter().map(|d| d.matrix().frobenius_norm().as_f64().powi(2)).sum::<f64>().sqrt()
}

impl AggregationReport {
    pub fn from_broadcast<T: Scalar>(round: usize, b: &Broadcast<T>) -> Self {
        Self {
            round,
            alpha: b
                .coefficients
                .as_ref()
                .map(|c| (0..c.alpha.rows()).map(|k| c.alpha.row(k).iter().map(|v| v.as_f64()).collect()).collect()),
            global_delta_norm: stack_norm(&b.global),
            personalized_delta_norms: b.personalized.iter().map(|p| stack_norm(p)).collect(),
        }
    }
}

#[cfg(test)]
mod tests;
