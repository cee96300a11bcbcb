//! Local training on one client.

use rand::seq::SliceRandom;
use rand::Rng;

use super::payload::{Payload, Upload};
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::harness::config::{BackboneInit, HeadFeatureSource, TrainConfig};
use crate::losses::{bsd_loss, cross_entropy, DistillOptions};
use crate::nn::{backward, backward_with_feature_grad, copy_backbone, BackboneNet, HeadLayer, Scope, SplitModel};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub shard: ClientShard,
    pub model: SplitModel,
    /// Rounds in which this client was selected, ascending.
    pub participation: Vec<usize>,
}

impl ClientState {
    pub fn new(shard: ClientShard, model: SplitModel) -> Self {
        Self {
            id: shard.client_id,
            shard,
            model,
            participation: Vec::new(),
        }
    }
}

/// Result of one local update.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome {
    pub upload: Upload,
    /// Mean minibatch loss of every local epoch, in training order (head
    /// epochs first for the split strategies).
    pub epoch_losses: Vec<f64>,
}

/// Shuffled minibatch index lists for one epoch. A shard smaller than
/// `batch_size` is trained full-batch.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn labels_of(labels: &[usize], batch: &[usize]) -> Vec<usize> {
    batch.iter().map(|&i| labels[i]).collect()
}

/// SGD on the head alone over fixed `features` (one row per sample).
pub fn train_head<R: Rng + ?Sized>(
    head: &mut HeadLayer,
    features: &Tensor2D,
    labels: &[usize],
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let batches = minibatches(features.rows(), cfg.batch_size, rng);
        let mut sum = 0.0;
        for batch in &batches {
            let f = features.select_rows(batch);
            let y = labels_of(labels, batch);
            let (loss, dlogits) = cross_entropy(&head.forward(&f)?, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("head loss".into()));
            }
            head.backward(&f, &dlogits)?;
            head.sgd_step(cfg.lr, cfg.momentum)?;
            sum += loss;
        }
        losses.push(sum / batches.len() as f64);
    }
    Ok(losses)
}

/// SGD on the backbone with the head frozen. With `teacher` features and
/// `lambda > 0` the objective is the self-distillation loss; otherwise CE.
pub fn train_backbone<R: Rng + ?Sized>(
    model: &mut SplitModel,
    data: &Dataset,
    teacher: Option<&Tensor2D>,
    epochs: usize,
    cfg: &TrainConfig,
    opts: &DistillOptions,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let teacher = teacher.filter(|_| opts.lambda > 0.0);
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let batches = minibatches(data.len(), cfg.batch_size, rng);
        let mut sum = 0.0;
        for batch in &batches {
            let x = data.features().select_rows(batch);
            let y = labels_of(data.labels(), batch);
            let (logits, cache) = model.forward(&x)?;
            let loss = match teacher {
                Some(t) => {
                    let out = bsd_loss(&t.select_rows(batch), &cache.features, &logits, &y, opts)?;
                    backward_with_feature_grad(model, &cache, &out.grad_logits, Some(&out.grad_features), Scope::BackboneOnly)?;
                    out.value.total
                }
                None => {
                    let (loss, dlogits) = cross_entropy(&logits, &y)?;
                    backward(model, &cache, &dlogits, Scope::BackboneOnly)?;
                    loss
                }
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite("backbone loss".into()));
            }
            model.backbone.sgd_step(cfg.lr, cfg.momentum)?;
            sum += loss;
        }
        losses.push(sum / batches.len() as f64);
    }
    Ok(losses)
}

/// Plain CE SGD over every parameter.
pub fn train_full<R: Rng + ?Sized>(model: &mut SplitModel, data: &Dataset, epochs: usize, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let batches = minibatches(data.len(), cfg.batch_size, rng);
        let mut sum = 0.0;
        for batch in &batches {
            let x = data.features().select_rows(batch);
            let y = labels_of(data.labels(), batch);
            let (logits, cache) = model.forward(&x)?;
            let (loss, dlogits) = cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("model loss".into()));
            }
            backward(model, &cache, &dlogits, Scope::Full)?;
            model.sgd_step(cfg.lr, cfg.momentum)?;
            sum += loss;
        }
        losses.push(sum / batches.len() as f64);
    }
    Ok(losses)
}

fn diverged(client: usize, round: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(detail) => Error::Diverged { client, round, detail },
        other => other,
    }
}

fn split_update<R: Rng + ?Sized>(
    c: &mut ClientState,
    global: &BackboneNet,
    cfg: &TrainConfig,
    opts: &DistillOptions,
    init: BackboneInit,
    rng: &mut R,
) -> Result<ClientOutcome> {
    if !global.same_architecture(&c.model.backbone) {
        return Err(Error::Architecture(format!("client {} backbone does not match the global backbone", c.id)));
    }
    let train = &c.shard.train;
    let teacher = global.features(train.features())?;

    let head_features = match cfg.head_features {
        HeadFeatureSource::Global => teacher.clone(),
        HeadFeatureSource::Local => c.model.backbone.features(train.features())?,
    };
    let mut losses = train_head(&mut c.model.head, &head_features, train.labels(), cfg.head_epochs, cfg, rng)?;

    if init == BackboneInit::Global {
        copy_backbone(global, &mut c.model.backbone)?;
    }
    losses.extend(train_backbone(&mut c.model, train, Some(&teacher), cfg.backbone_epochs, cfg, opts, rng)?);

    Ok(ClientOutcome {
        upload: Upload {
            client_id: c.id,
            payload: Payload::Backbone(c.model.backbone.clone()),
        },
        epoch_losses: losses,
    })
}

/// Head phase on frozen global-backbone features, then self-distillation of
/// the local backbone against the global one. Uploads the backbone only.
pub fn client_update_fedbsd<R: Rng + ?Sized>(
    c: &mut ClientState,
    global: &BackboneNet,
    round: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ClientOutcome> {
    let opts = cfg.distill_options();
    split_update(c, global, cfg, &opts, cfg.backbone_init, rng).map_err(diverged(c.id, round))
}

/// Same phases as [`client_update_fedbsd`] without the distillation term,
/// the backbone phase starting from the received global backbone.
pub fn client_update_fedrep<R: Rng + ?Sized>(
    c: &mut ClientState,
    global: &BackboneNet,
    round: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ClientOutcome> {
    let opts = DistillOptions {
        lambda: 0.0,
        ..cfg.distill_options()
    };
    split_update(c, global, cfg, &opts, BackboneInit::Global, rng).map_err(diverged(c.id, round))
}

/// Replaces the local model with `global`, trains everything for
/// `local_epochs` and uploads the full model.
pub fn client_update_fedavg<R: Rng + ?Sized>(
    c: &mut ClientState,
    global: &SplitModel,
    round: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ClientOutcome> {
    if !global.same_architecture(&c.model) {
        return Err(Error::Architecture(format!("client {} model does not match the global model", c.id)));
    }
    c.model = global.clone();
    c.model.zero_grad();
    c.model.reset_velocity();
    let losses = train_full(&mut c.model, &c.shard.train, cfg.local_epochs, cfg, rng).map_err(diverged(c.id, round))?;
    Ok(ClientOutcome {
        upload: Upload {
            client_id: c.id,
            payload: Payload::Full(c.model.clone()),
        },
        epoch_losses: losses,
    })
}

/// Isolated training of the client's own model; nothing is communicated.
pub fn client_update_local<R: Rng + ?Sized>(c: &mut ClientState, round: usize, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<f64>> {
    train_full(&mut c.model, &c.shard.train, cfg.local_epochs, cfg, rng).map_err(diverged(c.id, round))
}

/// Trains the head for `epochs` on features of the client's final backbone,
/// which is left untouched.
pub fn local_finetune_head<R: Rng + ?Sized>(c: &mut ClientState, epochs: usize, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<f64>> {
    let features = c.model.backbone.features(c.shard.train.features())?;
    train_head(&mut c.model.head, &features, c.shard.train.labels(), epochs, cfg, rng)
}
