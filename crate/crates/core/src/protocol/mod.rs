//! Federated rounds: selection, broadcast, local updates and aggregation.

pub mod aggregate;
pub mod client;
pub mod payload;

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate_backbones, aggregate_backbones_weighted, aggregate_full, aggregate_full_weighted};
pub use client::{
    client_update_fedavg, client_update_fedbsd, client_update_fedrep, client_update_local, local_finetune_head, minibatches, train_backbone,
    train_full, train_head, ClientOutcome, ClientState,
};
pub use payload::{Payload, Upload};

use crate::error::{Error, Result};
use crate::harness::config::{AggregationWeighting, TrainConfig};
use crate::nn::{BackboneNet, SplitModel};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Backbone self-distillation.
    FedBsd,
    /// Shared backbone and private heads, no distillation.
    FedRep,
    /// Whole-model averaging.
    FedAvg,
    /// Independent training, no communication.
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// Global model. Split strategies only use and update its backbone.
    pub global: SplitModel,
    /// Completed rounds.
    pub round: usize,
    pub master_seed: u64,
}

impl ServerState {
    pub fn new(global: SplitModel, master_seed: u64) -> Self {
        Self {
            global,
            round: 0,
            master_seed,
        }
    }

    pub fn global_backbone(&self) -> &BackboneNet {
        &self.global.backbone
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: usize,
    pub epoch_losses: Vec<f64>,
    /// Encoded upload size; 0 under `local`.
    pub upload_bytes: usize,
    pub upload_has_head: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based round number.
    pub round: usize,
    /// Ascending.
    pub selected: Vec<usize>,
    /// One entry per selected client, same order as `selected`.
    pub clients: Vec<ClientReport>,
    pub wall_time_secs: f64,
}

/// Number of clients picked per round: `max(1, round(r * n))`.
pub fn num_selected(n: usize, r: f64) -> usize {
    ((r * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Uniform sample without replacement of `max(1, round(r * n))` ids, sorted.
pub fn select_clients<R: Rng + ?Sized>(n: usize, r: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidParameter(format!("participation must be in (0, 1], got {r}")));
    }
    if n == 0 {
        return Err(Error::Empty("client pool"));
    }
    let mut ids = sample(rng, n, num_selected(n, r)).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Runs one round for `cfg.strategy`. Selected clients train in parallel on
/// the current rayon pool, each with its own stream, and uploads are
/// aggregated in ascending client id, so results do not depend on the number
/// of threads. Clients must be stored with `clients[i].id == i`.
pub fn run_round(server: &mut ServerState, clients: &mut [ClientState], cfg: &TrainConfig) -> Result<RoundReport> {
    let start = Instant::now();
    let t = server.round + 1;
    if let Some((i, c)) = clients.iter().enumerate().find(|(i, c)| c.id != *i) {
        return Err(Error::InvalidParameter(format!("client at position {i} has id {}", c.id)));
    }
    let selected = select_clients(clients.len(), cfg.participation, &mut stream(server.master_seed, Purpose::Select, t as u64, 0))?;
    let mut is_selected = vec![false; clients.len()];
    for &id in &selected {
        is_selected[id] = true;
    }

    let strategy = cfg.strategy;
    let global = &server.global;
    let seed = server.master_seed;
    let outcomes: Vec<Result<(Option<Upload>, Vec<f64>)>> = clients
        .par_iter_mut()
        .filter(|c| is_selected[c.id])
        .map(|c| {
            let mut rng = stream(seed, Purpose::ClientUpdate, t as u64, c.id as u64);
            c.participation.push(t);
            match strategy {
                Strategy::FedBsd => client_update_fedbsd(c, &global.backbone, t, cfg, &mut rng).map(|o| (Some(o.upload), o.epoch_losses)),
                Strategy::FedRep => client_update_fedrep(c, &global.backbone, t, cfg, &mut rng).map(|o| (Some(o.upload), o.epoch_losses)),
                Strategy::FedAvg => client_update_fedavg(c, global, t, cfg, &mut rng).map(|o| (Some(o.upload), o.epoch_losses)),
                Strategy::Local => client_update_local(c, t, cfg, &mut rng).map(|l| (None, l)),
            }
        })
        .collect();

    let mut uploads = Vec::with_capacity(selected.len());
    let mut reports = Vec::with_capacity(selected.len());
    for (&id, outcome) in selected.iter().zip(outcomes) {
        let (upload, epoch_losses) = outcome?;
        reports.push(ClientReport {
            client_id: id,
            epoch_losses,
            upload_bytes: upload.as_ref().map_or(0, |u| u.payload.to_bytes().len()),
            upload_has_head: upload.as_ref().is_some_and(|u| u.payload.carries_head()),
        });
        uploads.extend(upload);
    }

    let weights: Option<Vec<f64>> = match cfg.aggregation {
        AggregationWeighting::Uniform => None,
        AggregationWeighting::DataSize => Some(selected.iter().map(|&id| clients[id].shard.train.len() as f64).collect()),
    };
    match strategy {
        Strategy::FedBsd | Strategy::FedRep => {
            let ups: Vec<(usize, &BackboneNet)> = uploads
                .iter()
                .map(|u| match &u.payload {
                    Payload::Backbone(b) => Ok((u.client_id, b)),
                    Payload::Full(_) => Err(Error::InvalidParameter(format!("client {} uploaded a head", u.client_id))),
                })
                .collect::<Result<_>>()?;
            server.global.backbone = aggregate_backbones_weighted(&ups, weights.as_deref())?;
        }
        Strategy::FedAvg => {
            let ups: Vec<(usize, &SplitModel)> = uploads
                .iter()
                .filter_map(|u| match &u.payload {
                    Payload::Full(m) => Some((u.client_id, m)),
                    Payload::Backbone(_) => None,
                })
                .collect();
            server.global = aggregate_full_weighted(&ups, weights.as_deref())?;
        }
        Strategy::Local => {}
    }
    server.round = t;
    Ok(RoundReport {
        round: t,
        selected,
        clients: reports,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
