use rayon::prelude::*;

use super::config::{DataSource, ExperimentConfig};
use super::golden::params_checksum;
use super::metrics::{evaluate_client, MetricsLog};
use crate::data::{gen_synthetic_blobs, load_idx, partition_by_classes, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::nn::SplitModel;
use crate::protocol::{local_finetune_head, run_round, ClientState, RoundReport, ServerState, Strategy};
use crate::rng::{stream, Purpose};

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub log: MetricsLog,
    pub reports: Vec<RoundReport>,
    /// Parameter checksum after each round (empty unless requested).
    pub checksums: Vec<String>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub record_checksums: bool,
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic {
            num_classes,
            dim,
            samples_per_class,
            spread,
        } => gen_synthetic_blobs(*num_classes, *dim, *samples_per_class, *spread, &mut stream(cfg.train.seed, Purpose::Data, 0, 0)),
        DataSource::Idx { images, labels } => load_idx(images, labels),
    }
}

pub fn build_partition(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<ClientShard>> {
    partition_by_classes(data, &cfg.partition, &mut stream(cfg.partition.seed, Purpose::Partition, 0, 0))
}

/// Server and clients before round 1; every client starts from a copy of
/// the initial global model.
pub fn initialize(cfg: &ExperimentConfig, data: &Dataset, shards: Vec<ClientShard>) -> Result<(ServerState, Vec<ClientState>)> {
    let mut global = SplitModel::mlp(data.dim(), &cfg.train.hidden, data.num_classes())?;
    global.init_params(&mut stream(cfg.train.seed, Purpose::Init, 0, 0));
    let clients = shards.into_iter().map(|s| ClientState::new(s, global.clone())).collect();
    Ok((ServerState::new(global, cfg.train.seed), clients))
}

/// Per-client test accuracy. FedAvg is scored with the global model; the
/// other strategies with each client's own model.
pub fn evaluate_all(server: &ServerState, clients: &[ClientState], strategy: Strategy) -> Result<Vec<f64>> {
    clients
        .par_iter()
        .map(|c| {
            let model = if strategy == Strategy::FedAvg { &server.global } else { &c.model };
            evaluate_client(model, &c.shard.test)
        })
        .collect()
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn run_experiment_with(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    with_pool(cfg.train.threads, || run_inner(cfg, opts))?
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsLog> {
    Ok(run_experiment_with(cfg, RunOptions::default())?.log)
}

fn run_inner(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentOutcome> {
    let tc = &cfg.train;
    let data = build_dataset(cfg)?;
    let shards = build_partition(cfg, &data)?;
    let (mut server, mut clients) = initialize(cfg, &data, shards)?;

    let mut log = MetricsLog {
        // thread count does not affect results, so it stays out of the log
        config: cfg.entries().into_iter().filter(|(k, _)| *k != "threads").map(|(k, v)| (k.to_string(), v)).collect(),
        last_k: tc.eval_last_k,
        ..Default::default()
    };
    let mut reports = Vec::with_capacity(tc.rounds);
    let mut checksums = Vec::new();
    for _ in 0..tc.rounds {
        reports.push(run_round(&mut server, &mut clients, tc)?);
        log.accuracies.push(evaluate_all(&server, &clients, tc.strategy)?);
        if opts.record_checksums {
            checksums.push(params_checksum(&server, &clients));
        }
    }

    if tc.finetune {
        if tc.strategy == Strategy::FedAvg {
            for c in &mut clients {
                c.model = server.global.clone();
                c.model.reset_velocity();
            }
        }
        let seed = tc.seed;
        clients.par_iter_mut().try_for_each(|c| {
            local_finetune_head(c, tc.finetune_epochs, tc, &mut stream(seed, Purpose::Finetune, 0, c.id as u64)).map(|_| ())
        })?;
        log.finetuned = Some(clients.par_iter().map(|c| evaluate_client(&c.model, &c.shard.test)).collect::<Result<_>>()?);
    }

    Ok(ExperimentOutcome {
        log,
        reports,
        checksums,
        server,
        clients,
    })
}
