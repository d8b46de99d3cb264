use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::client::{CostMode, UploadPackage};
use crate::error::{Error, Result};
use crate::lora::{DenseDelta, LoraDelta};
use crate::numerics::{Scalar, Vector};

/// Server → client message.
#[derive(Debug, Clone, PartialEq)]
pub struct Downlink<T> {
    pub deltas: Vec<DenseDelta<T>>,
    pub text_feats: Vec<Vector<T>>,
}

/// Scalars carried by one client's upload, split into the three terms of
/// the cost formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UploadTerms {
    pub weights_factored: usize,
    pub weights_dense: usize,
    pub prototypes: usize,
    pub features: usize,
}

impl UploadTerms {
    pub fn total(&self, mode: CostMode) -> usize {
        let w = match mode {
            CostMode::Factored => self.weights_factored,
            CostMode::Dense => self.weights_dense,
        };
        w + self.prototypes + self.features
    }
}

/// Traffic of one round.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommRecord {
    pub round: usize,
    pub uploads: Vec<UploadTerms>,
    pub upload_factored: usize,
    pub upload_dense: usize,
    pub download_factored: usize,
    pub download_dense: usize,
    pub download_text: usize,
}

/// In-process message queues with a per-message scalar ledger.
///
/// Downlink weights are counted densely in `download_dense` and as the
/// rank-`r` adapter size in `download_factored`; the text features count
/// `C·d_embed` once per round in both.
#[derive(Debug)]
pub struct Transport<T> {
    adapter_params: usize,
    up: VecDeque<UploadPackage<T>>,
    down: Vec<VecDeque<Downlink<T>>>,
    ledger: Vec<CommRecord>,
}

impl<T: Scalar> Transport<T> {
    /// `adapter_params` is `N_v`, the factored size of one weight stack.
    pub fn new(num_clients: usize, adapter_params: usize) -> Self {
        Self {
            adapter_params,
            up: VecDeque::new(),
            down: (0..num_clients).map(|_| VecDeque::new()).collect(),
            ledger: Vec::new(),
        }
    }

    pub fn begin_round(&mut self, round: usize) {
        self.ledger.push(CommRecord { round, ..Default::default() });
    }

    fn current(&mut self) -> Result<&mut CommRecord> {
        self.ledger.last_mut().ok_or_else(|| Error::Contract("transport used before begin_round".into()))
    }

    pub fn send_upload(&mut self, pkg: UploadPackage<T>) -> Result<()> {
        let terms = UploadTerms {
            weights_factored: pkg.adapters.iter().map(LoraDelta::param_count).sum(),
            weights_dense: pkg.deltas.iter().map(DenseDelta::scalar_count).sum(),
            prototypes: pkg.prototypes.values().map(Vector::dim).sum(),
            features: pkg.shared_feats.iter().map(|(z, _)| z.dim() + 1).sum(),
        };
        let rec = self.current()?;
        rec.uploads.push(terms);
        rec.upload_factored += terms.total(CostMode::Factored);
        rec.upload_dense += terms.total(CostMode::Dense);
        self.up.push_back(pkg);
        Ok(())
    }

    /// Drains the uplink queue in ascending client order.
    pub fn collect_uploads(&mut self) -> Vec<UploadPackage<T>> {
        let mut pkgs: Vec<_> = self.up.drain(..).collect();
        pkgs.sort_by_key(|p| p.client_id);
        pkgs
    }

    /// Queues one personalized stack per client; the text features are a
    /// single broadcast shared by every message.
    pub fn broadcast(&mut self, personalized: Vec<Vec<DenseDelta<T>>>, text_feats: &[Vector<T>]) -> Result<()> {
        if personalized.len() != self.down.len() {
            return Err(Error::Contract(format!("{} stacks for {} clients", personalized.len(), self.down.len())));
        }
        let text: usize = text_feats.iter().map(Vector::dim).sum();
        let dense: usize = personalized.iter().flatten().map(DenseDelta::scalar_count).sum();
        let factored = self.adapter_params * personalized.len();
        let rec = self.current()?;
        rec.download_dense += dense + text;
        rec.download_factored += factored + text;
        rec.download_text += text;
        for (queue, deltas) in self.down.iter_mut().zip(personalized) {
            queue.push_back(Downlink { deltas, text_feats: text_feats.to_vec() });
        }
        Ok(())
    }

    pub fn receive(&mut self, client: usize) -> Result<Downlink<T>> {
        self.down
            .get_mut(client)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| Error::Contract(format!("client {client} has no pending downlink")))
    }

    pub fn ledger(&self) -> &[CommRecord] {
        &self.ledger
    }

    pub fn into_ledger(self) -> Vec<CommRecord> {
        self.ledger
    }
}

/// Totals over a run's ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommTotals {
    pub upload_factored: usize,
    pub upload_dense: usize,
    pub download_factored: usize,
    pub download_dense: usize,
    pub download_text: usize,
}

pub fn comm_totals(ledger: &[CommRecord]) -> CommTotals {
    ledger.iter().fold(CommTotals::default(), |acc, r| CommTotals {
        upload_factored: acc.upload_factored + r.upload_factored,
        upload_dense: acc.upload_dense + r.upload_dense,
        download_factored: acc.download_factored + r.download_factored,
        download_dense: acc.download_dense + r.download_dense,
        download_text: acc.download_text + r.download_text,
    })
}
