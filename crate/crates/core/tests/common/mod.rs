//! Independent scalar-loop oracles shared by the integration tests.
//!
//! Everything here works on the flat parameter vector (`SplitModel::params`
//! order: each backbone layer's weights row-major then bias, then the head)
//! and plain `Vec<f64>` rows, without touching the library's forward code.
#![allow(dead_code)]

use fedbsd_core::losses::{DistillOptions, FeatureDistillMode, KlDirection};
use fedbsd_core::nn::{backward_with_feature_grad, Scope, SplitModel};
use fedbsd_core::rng::{stream, Purpose, Stream};
use fedbsd_core::Tensor2D;
use rand::Rng;

pub struct Instance {
    pub model: SplitModel,
    pub x: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub teacher: Vec<Vec<f64>>,
    pub opts: DistillOptions,
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor2D {
    Tensor2D::from_rows(rows).unwrap()
}

/// `(in, out, relu)` for every layer including the head (never activated).
pub fn layer_dims(model: &SplitModel) -> Vec<(usize, usize, bool)> {
    let mut dims = model.backbone.architecture();
    dims.push((model.head.feature_dim(), model.head.num_classes(), false));
    dims
}

/// Runs the layers `dims` described by `params` on one input row. Returns
/// every layer's pre-activation, so the last backbone entry is the feature
/// vector and the last entry the logits.
pub fn naive_pre_acts(params: &[f64], dims: &[(usize, usize, bool)], x: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut h = x.to_vec();
    let mut off = 0;
    for &(ni, no, relu) in dims {
        let w = &params[off..off + ni * no];
        let b = &params[off + ni * no..off + ni * no + no];
        off += ni * no + no;
        let mut z = vec![0.0; no];
        for o in 0..no {
            let mut s = b[o];
            for i in 0..ni {
                s += w[o * ni + i] * h[i];
            }
            z[o] = s;
        }
        h = if relu { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
        out.push(z);
    }
    out
}

pub fn naive_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn naive_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q.max(1e-12)).ln()).sum()
}

/// CE + lambda * distillation, batch means, from scalar loops.
pub fn naive_loss(params: &[f64], dims: &[(usize, usize, bool)], inst: &Instance) -> f64 {
    let opts = &inst.opts;
    let n_backbone = dims.len() - 1;
    let batch = inst.x.len() as f64;
    let mut ce = 0.0;
    let mut distill = 0.0;
    for (r, x) in inst.x.iter().enumerate() {
        let pre = naive_pre_acts(params, dims, x);
        let features = &pre[n_backbone - 1];
        let p = naive_softmax(&pre[n_backbone], 1.0);
        ce -= p[inst.labels[r]].ln();
        distill += match opts.mode {
            FeatureDistillMode::SoftmaxKl => {
                let pt = naive_softmax(&inst.teacher[r], opts.tau);
                let ps = naive_softmax(features, opts.tau);
                let kl = match opts.direction {
                    KlDirection::Forward => naive_kl(&pt, &ps),
                    KlDirection::Reverse => naive_kl(&ps, &pt),
                };
                if opts.tau2_rescale {
                    kl * opts.tau * opts.tau
                } else {
                    kl
                }
            }
            FeatureDistillMode::Mse => {
                features.iter().zip(&inst.teacher[r]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / features.len() as f64
            }
        };
    }
    ce / batch + opts.lambda * distill / batch
}

/// Analytic gradient of the full loss for every parameter, from the library.
pub fn analytic_grads(inst: &Instance) -> Vec<f64> {
    let mut model = inst.model.clone();
    model.zero_grad();
    let x = to_tensor(&inst.x);
    let (logits, cache) = model.forward(&x).unwrap();
    let out = fedbsd_core::losses::bsd_loss(&to_tensor(&inst.teacher), &cache.features, &logits, &inst.labels, &inst.opts).unwrap();
    backward_with_feature_grad(&mut model, &cache, &out.grad_logits, Some(&out.grad_features), Scope::Full).unwrap();
    let mut g = Vec::new();
    for l in model.backbone.layers().chain(std::iter::once(model.head.layer())) {
        g.extend_from_slice(l.grad_weight().as_slice());
        g.extend_from_slice(l.grad_bias());
    }
    g
}

pub fn central_differences(inst: &Instance, eps: f64) -> Vec<f64> {
    let dims = layer_dims(&inst.model);
    let base: Vec<f64> = inst.model.params().collect();
    (0..base.len())
        .map(|j| {
            let mut p = base.clone();
            p[j] = base[j] + eps;
            let up = naive_loss(&p, &dims, inst);
            p[j] = base[j] - eps;
            let down = naive_loss(&p, &dims, inst);
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Below this magnitude a gradient entry is compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(a, b)| rel_error(*a, *b)).fold(0.0, f64::max)
}

/// Smallest |pre-activation| over the ReLU layers; finite differences are
/// only meaningful when no unit sits within `eps` of its kink.
pub fn kink_margin(inst: &Instance) -> f64 {
    let dims = layer_dims(&inst.model);
    let params: Vec<f64> = inst.model.params().collect();
    let mut m = f64::INFINITY;
    for x in &inst.x {
        for (z, &(_, _, relu)) in naive_pre_acts(&params, &dims, x).iter().zip(&dims) {
            if relu {
                m = z.iter().fold(m, |m, v| m.min(v.abs()));
            }
        }
    }
    m
}

fn gauss_rows(rng: &mut Stream, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Small random model, batch, teacher features and loss options; redrawn
/// until every ReLU unit is at least 1e-3 away from its kink.
pub fn random_instance(seed: u64, opts: DistillOptions) -> Instance {
    let mut rng = stream(seed, Purpose::Data, 0, 0);
    loop {
        let input = rng.random_range(2..6);
        let hidden = [rng.random_range(3..7), rng.random_range(2..6)];
        let classes = rng.random_range(2..5);
        let batch = rng.random_range(1..6);
        let mut model = SplitModel::mlp(input, &hidden, classes).unwrap();
        model.init_params(&mut rng);
        // non-zero biases so the bias gradients are exercised off the origin
        for l in model.backbone.layers_mut() {
            for b in l.bias_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        for b in model.head.layer_mut().bias_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
        let inst = Instance {
            x: gauss_rows(&mut rng, batch, input, 2.0),
            labels: (0..batch).map(|_| rng.random_range(0..classes)).collect(),
            teacher: gauss_rows(&mut rng, batch, hidden[1], 2.0),
            model,
            opts,
        };
        if kink_margin(&inst) > 1e-3 {
            return inst;
        }
    }
}
