//! End-to-end rounds over an in-process transport: client updates, text
//! training, aggregation, broadcast, evaluation and per-round metrics, plus
//! the zero-shot, local-only and weighted-only baselines.

mod config;
mod output;
mod transport;
mod world;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ClientState, LocalReport, UploadPackage};
use crate::datagen::{build_local_testset, Dataset, Partition};
use crate::encoder::EncoderState;
use crate::error::{param_err, Error, Result};
use crate::lora::DenseDelta;
use crate::numerics::{Scalar, SimRng, Vector};
use crate::objectives::{predict_label, ObjectiveConfig};
use crate::server::{AggregationMode, AggregationReport, ServerState};

pub use config::{LocalEvalMode, RunConfig};
pub use output::{
    read_checkpoint, read_metrics_jsonl, write_checkpoint, write_metrics_jsonl, write_run, RunSummary, CHECKPOINT_DIR,
    CONFIG_FILE, METRICS_FILE, SUMMARY_FILE, TIMING_FILE,
};
pub use transport::{comm_totals, CommRecord, CommTotals, Downlink, Transport, UploadTerms};
pub use world::World;

/// What a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    #[default]
    Fedalign,
    /// Frozen towers, no rounds.
    ZeroShot,
    /// Clients train alone; no uploads, no text training.
    LocalOnly,
    /// Every client receives the sample-weighted global deltas.
    WeightedOnly,
}

impl std::str::FromStr for RunKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedalign" => Ok(Self::Fedalign),
            "zero_shot" => Ok(Self::ZeroShot),
            "local_only" => Ok(Self::LocalOnly),
            "weighted_only" => Ok(Self::WeightedOnly),
            other => Err(Error::Config(format!("unknown run kind {other:?}"))),
        }
    }
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub run: RunKind,
    pub seed: u64,
    pub round: usize,
    pub global_accuracy: f64,
    /// Absent for clients whose local test set is empty.
    pub local_accuracy: Vec<Option<f64>>,
    pub mean_local_accuracy: Option<f64>,
    pub local_eval_mode: LocalEvalMode,
    pub mean_local_loss: Option<f64>,
    pub text_loss: Option<f64>,
    pub upload_factored: usize,
    pub upload_dense: usize,
    pub download_factored: usize,
    pub download_dense: usize,
}

/// Parameters needed to re-score a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub run: RunKind,
    /// `None` when there is no global model; global accuracy is then the
    /// mean full-test accuracy of the per-client models.
    pub global: Option<Vec<DenseDelta<T>>>,
    /// Deltas used for each client's local evaluation.
    pub local: Vec<Vec<DenseDelta<T>>>,
    pub text_feats: Vec<Vector<T>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub config: RunConfig,
    pub run: RunKind,
    pub metrics: Vec<RoundMetrics>,
    pub comm: Vec<CommRecord>,
    pub aggregation: Vec<AggregationReport>,
    pub wall_seconds: Vec<f64>,
    pub checkpoint: Checkpoint<T>,
}

impl<T> RunOutput<T> {
    pub fn final_metrics(&self) -> &RoundMetrics {
        self.metrics.last().expect("every run records round 0")
    }
}

/// Fraction of `test` the model `backbone + deltas` labels correctly
/// against `text_feats`.
pub fn evaluate_global<T: Scalar>(
    backbone: &EncoderState<T>,
    deltas: &[DenseDelta<T>],
    text_feats: &[Vector<T>],
    test: &Dataset<T>,
    obj: &ObjectiveConfig,
) -> Result<f64> {
    if test.is_empty() {
        return param_err("cannot evaluate on an empty test set");
    }
    Ok(count_correct(backbone, deltas, text_feats, test, obj)? as f64 / test.len() as f64)
}

fn count_correct<T: Scalar>(
    backbone: &EncoderState<T>,
    deltas: &[DenseDelta<T>],
    text_feats: &[Vector<T>],
    test: &Dataset<T>,
    obj: &ObjectiveConfig,
) -> Result<usize> {
    let mut enc = backbone.clone();
    enc.set_offsets(deltas)?;
    let composed = enc.compose()?;
    let mut hits = 0;
    for (x, y) in test.samples() {
        if predict_label(&composed.embed(x)?, text_feats, obj)? == *y {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Per-client accuracy on the test samples whose labels the client holds.
pub fn evaluate_local<T: Scalar>(
    backbone: &EncoderState<T>,
    local: &[Vec<DenseDelta<T>>],
    text_feats: &[Vector<T>],
    test: &Dataset<T>,
    partition: &Partition,
    obj: &ObjectiveConfig,
) -> Result<Vec<Option<f64>>> {
    if local.len() != partition.num_clients() {
        return Err(Error::Shape(format!("{} local models for {} clients", local.len(), partition.num_clients())));
    }
    local
        .iter()
        .enumerate()
        .map(|(k, deltas)| {
            let subset = build_local_testset(test, &partition.client_labels(k));
            if subset.is_empty() {
                Ok(None)
            } else {
                evaluate_global(backbone, deltas, text_feats, &subset, obj).map(Some)
            }
        })
        .collect()
}

/// Global and local accuracies of a checkpoint.
pub fn score_checkpoint<T: Scalar>(
    world: &World<T>,
    ckpt: &Checkpoint<T>,
    obj: &ObjectiveConfig,
) -> Result<(f64, Vec<Option<f64>>)> {
    let global = match &ckpt.global {
        Some(g) => evaluate_global(&world.backbone, g, &ckpt.text_feats, &world.test, obj)?,
        None => {
            // pooled over clients, i.e. the mean of per-client accuracies
            let mut hits = 0;
            for deltas in &ckpt.local {
                hits += count_correct(&world.backbone, deltas, &ckpt.text_feats, &world.test, obj)?;
            }
            hits as f64 / (ckpt.local.len() * world.test.len()) as f64
        }
    };
    let local = evaluate_local(&world.backbone, &ckpt.local, &ckpt.text_feats, &world.test, &world.partition, obj)?;
    Ok((global, local))
}

fn mean_present(xs: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = xs.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

fn zero_stack<T: Scalar>(cfg: &RunConfig) -> Vec<DenseDelta<T>> {
    let enc = cfg.encoder_config();
    enc.adapted_blocks().map(|i| DenseDelta::zeros(enc.d_hidden, enc.block_in(i))).collect()
}

/// The full protocol.
pub fn run_training<T: Scalar>(cfg: &RunConfig) -> Result<RunOutput<T>> {
    run(cfg, RunKind::Fedalign)
}

/// One of the internal baselines.
pub fn run_baseline<T: Scalar>(cfg: &RunConfig, kind: RunKind) -> Result<RunOutput<T>> {
    run(cfg, kind)
}

pub fn run<T: Scalar>(cfg: &RunConfig, kind: RunKind) -> Result<RunOutput<T>> {
    cfg.validate()?;
    let world = World::<T>::build(cfg)?;
    Runner::new(cfg, kind, world)?.run()
}

struct Runner<T> {
    cfg: RunConfig,
    kind: RunKind,
    eval_mode: LocalEvalMode,
    obj: ObjectiveConfig,
    world: World<T>,
    server: ServerState<T>,
    clients: Vec<ClientState<T>>,
    transport: Transport<T>,
    metrics: Vec<RoundMetrics>,
    aggregation: Vec<AggregationReport>,
    wall_seconds: Vec<f64>,
}

impl<T: Scalar> Runner<T> {
    fn new(cfg: &RunConfig, kind: RunKind, world: World<T>) -> Result<Self> {
        let rng = SimRng::new(cfg.seed);
        let mode = if kind == RunKind::WeightedOnly { AggregationMode::WeightedOnly } else { AggregationMode::Query };
        let mut text_encoder = world.backbone.clone();
        text_encoder.reset_adapters(&rng.split("text_adapters"))?;
        let server = ServerState::new(
            text_encoder,
            world.descriptions.clone(),
            cfg.encoder_config(),
            cfg.server_config(mode),
            rng.split("server"),
        )?;
        let text0 = server.text_features()?;
        let clients = world
            .shards
            .iter()
            .enumerate()
            .map(|(k, shard)| {
                ClientState::new(
                    k,
                    shard.clone(),
                    &world.backbone,
                    text0.clone(),
                    rng.split_indexed("client", k),
                    cfg.lr,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let transport = Transport::new(cfg.num_clients, cfg.encoder_config().trainable_params());
        Ok(Self {
            cfg: cfg.clone(),
            kind,
            eval_mode: cfg.local_eval_mode.resolve(cfg.partition),
            obj: cfg.objective(),
            world,
            server,
            clients,
            transport,
            metrics: Vec::new(),
            aggregation: Vec::new(),
            wall_seconds: Vec::new(),
        })
    }

    fn run(mut self) -> Result<RunOutput<T>> {
        let start = Instant::now();
        let zero = zero_stack::<T>(&self.cfg);
        let text0 = self.server.text_features()?;
        let global0 = (self.kind != RunKind::LocalOnly).then(|| zero.clone());
        let mut ckpt =
            Checkpoint { run: self.kind, global: global0, local: vec![zero; self.cfg.num_clients], text_feats: text0 };
        self.record(0, &ckpt, None, None, &CommRecord::default())?;
        self.wall_seconds.push(start.elapsed().as_secs_f64());
        let rounds = if self.kind == RunKind::ZeroShot { 0 } else { self.cfg.rounds };
        for t in 1..=rounds {
            let start = Instant::now();
            ckpt = match self.kind {
                RunKind::LocalOnly => self.local_round(t)?,
                _ => self.federated_round(t)?,
            };
            self.wall_seconds.push(start.elapsed().as_secs_f64());
        }
        Ok(RunOutput {
            config: self.cfg,
            run: self.kind,
            metrics: self.metrics,
            comm: self.transport.into_ledger(),
            aggregation: self.aggregation,
            wall_seconds: self.wall_seconds,
            checkpoint: ckpt,
        })
    }

    fn local_updates(&mut self) -> Result<Vec<(UploadPackage<T>, LocalReport)>> {
        let ccfg = self.cfg.client_config();
        if self.cfg.parallel {
            self.clients.par_iter_mut().map(|c| c.local_update(&ccfg)).collect()
        } else {
            self.clients.iter_mut().map(|c| c.local_update(&ccfg)).collect()
        }
    }

    fn federated_round(&mut self, t: usize) -> Result<Checkpoint<T>> {
        self.transport.begin_round(t);
        let results = self.local_updates()?;
        let loss = mean_loss(&results);
        for (pkg, _) in results {
            self.transport.send_upload(pkg)?;
        }
        let pkgs = self.transport.collect_uploads();
        let text = self.server.train_text_encoder(&pkgs)?;
        let broadcast = self.server.aggregate_and_broadcast(&pkgs, text.text_feats)?;
        self.aggregation.push(AggregationReport::from_broadcast(t, &broadcast));
        let local = match (self.eval_mode, self.kind) {
            (LocalEvalMode::RawLocal, _) => pkgs.iter().map(|p| p.deltas.clone()).collect(),
            (_, RunKind::WeightedOnly) => broadcast.personalized.clone(),
            _ => self.server.aggregate(&pkgs, false)?.0,
        };
        self.transport.broadcast(broadcast.personalized, &broadcast.text_feats)?;
        for client in &mut self.clients {
            let msg = self.transport.receive(client.id())?;
            client.apply_broadcast(&msg.deltas, msg.text_feats)?;
        }
        let ckpt =
            Checkpoint { run: self.kind, global: Some(broadcast.global), local, text_feats: broadcast.text_feats };
        let comm = self.transport.ledger().last().cloned().unwrap_or_default();
        self.record(t, &ckpt, loss, text.mean_loss, &comm)?;
        Ok(ckpt)
    }

    fn local_round(&mut self, t: usize) -> Result<Checkpoint<T>> {
        let results = self.local_updates()?;
        let loss = mean_loss(&results);
        let mut local = Vec::with_capacity(results.len());
        for (client, (pkg, _)) in self.clients.iter_mut().zip(results) {
            let text = client.text_feats().to_vec();
            client.apply_broadcast(&pkg.deltas, text)?;
            local.push(pkg.deltas);
        }
        let text_feats = self.clients.first().map(|c| c.text_feats().to_vec()).unwrap_or_default();
        let ckpt = Checkpoint { run: self.kind, global: None, local, text_feats };
        self.record(t, &ckpt, loss, None, &CommRecord::default())?;
        Ok(ckpt)
    }

    fn record(
        &mut self,
        round: usize,
        ckpt: &Checkpoint<T>,
        local_loss: Option<f64>,
        text_loss: Option<f64>,
        comm: &CommRecord,
    ) -> Result<()> {
        let (global_accuracy, local_accuracy) = score_checkpoint(&self.world, ckpt, &self.obj)?;
        self.metrics.push(RoundMetrics {
            run: self.kind,
            seed: self.cfg.seed,
            round,
            global_accuracy,
            mean_local_accuracy: mean_present(&local_accuracy),
            local_accuracy,
            local_eval_mode: self.eval_mode,
            mean_local_loss: local_loss,
            text_loss,
            upload_factored: comm.upload_factored,
            upload_dense: comm.upload_dense,
            download_factored: comm.download_factored,
            download_dense: comm.download_dense,
        });
        Ok(())
    }
}

fn mean_loss<T>(results: &[(UploadPackage<T>, LocalReport)]) -> Option<f64> {
    let losses: Vec<f64> = results.iter().filter(|(_, r)| r.steps > 0).map(|(_, r)| r.mean_ce).collect();
    (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
}

#[cfg(test)]
mod tests;
