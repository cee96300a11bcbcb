//! Server-side parameter averaging.
//!
//! Uploads are folded in ascending client-id order with a running mean
//! `acc += (w_k / W_k) * (x - acc)`, where `W_k` is the cumulative weight.
//! For uniform weights this is `acc += (x - acc) / k`, which returns an input
//! unchanged when all uploads are identical and gives exactly zero for the
//! pair `w, -w`. The order of the input list does not matter.

use crate::error::{Error, Result};
use crate::nn::{BackboneNet, LinearLayer, SplitModel};

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidParameter("aggregation weights must be finite and > 0".into()));
    }
    Ok(())
}

fn fold(acc: &mut [f64], x: &[f64], uniform: bool, k: usize, share: f64) {
    if uniform {
        let k = k as f64;
        for (a, v) in acc.iter_mut().zip(x) {
            *a += (v - *a) / k;
        }
    } else {
        for (a, v) in acc.iter_mut().zip(x) {
            *a += share * (v - *a);
        }
    }
}

fn fold_layers<'a>(dst: impl Iterator<Item = &'a mut LinearLayer>, src: impl Iterator<Item = &'a LinearLayer>, uniform: bool, k: usize, share: f64) {
    for (d, s) in dst.zip(src) {
        let (sw, sb) = s.param_slices();
        let (dw, db) = d.params_mut();
        fold(dw, sw, uniform, k, share);
        fold(db, sb, uniform, k, share);
    }
}

/// Sorted positions of the uploads by client id.
fn order_by_client(ids: impl Iterator<Item = usize>) -> Vec<usize> {
    let ids: Vec<usize> = ids.collect();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| ids[i]);
    order
}

/// Element-wise mean of uploaded backbones, `weights` (if given) parallel to
/// `uploads`. Uniform weighting is `1/K` over the uploads.
pub fn aggregate_backbones_weighted(uploads: &[(usize, &BackboneNet)], weights: Option<&[f64]>) -> Result<BackboneNet> {
    let first = uploads.first().ok_or(Error::Empty("backbone uploads"))?;
    if let Some((id, _)) = uploads.iter().find(|(_, b)| !b.same_architecture(first.1)) {
        return Err(Error::Architecture(format!("upload from client {id} differs from client {}", first.0)));
    }
    if let Some(w) = weights {
        if w.len() != uploads.len() {
            return Err(Error::shape("aggregation weights", uploads.len(), w.len()));
        }
        check_weights(w)?;
    }
    let order = order_by_client(uploads.iter().map(|(id, _)| *id));
    let mut acc = uploads[order[0]].1.clone();
    acc.zero_grad();
    acc.reset_velocity();
    let mut cumulative = weights.map_or(1.0, |w| w[order[0]]);
    for (k, &i) in order.iter().enumerate().skip(1) {
        let share = match weights {
            Some(w) => {
                cumulative += w[i];
                w[i] / cumulative
            }
            None => 0.0,
        };
        fold_layers(acc.layers_mut(), uploads[i].1.layers(), weights.is_none(), k + 1, share);
    }
    Ok(acc)
}

pub fn aggregate_backbones(uploads: &[(usize, &BackboneNet)]) -> Result<BackboneNet> {
    aggregate_backbones_weighted(uploads, None)
}

/// Mean over whole models (backbone and head), for the FedAvg baseline.
pub fn aggregate_full_weighted(uploads: &[(usize, &SplitModel)], weights: Option<&[f64]>) -> Result<SplitModel> {
    let first = uploads.first().ok_or(Error::Empty("model uploads"))?;
    if let Some((id, _)) = uploads.iter().find(|(_, m)| !m.same_architecture(first.1)) {
        return Err(Error::Architecture(format!("upload from client {id} differs from client {}", first.0)));
    }
    let backbones: Vec<(usize, &BackboneNet)> = uploads.iter().map(|(id, m)| (*id, &m.backbone)).collect();
    let backbone = aggregate_backbones_weighted(&backbones, weights)?;

    let order = order_by_client(uploads.iter().map(|(id, _)| *id));
    let mut head = uploads[order[0]].1.head.clone();
    head.layer_mut().zero_grad();
    head.layer_mut().reset_velocity();
    let mut cumulative = weights.map_or(1.0, |w| w[order[0]]);
    for (k, &i) in order.iter().enumerate().skip(1) {
        let share = match weights {
            Some(w) => {
                cumulative += w[i];
                w[i] / cumulative
            }
            None => 0.0,
        };
        fold_layers(std::iter::once(head.layer_mut()), std::iter::once(uploads[i].1.head.layer()), weights.is_none(), k + 1, share);
    }
    SplitModel::new(backbone, head)
}

pub fn aggregate_full(uploads: &[(usize, &SplitModel)]) -> Result<SplitModel> {
    aggregate_full_weighted(uploads, None)
}
