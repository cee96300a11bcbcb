mod common;

use common::*;
use fedbsd_core::data::{ClientShard, Dataset};
use fedbsd_core::harness::{BackboneInit, TrainConfig};
use fedbsd_core::losses::{bsd_loss, softmax_tau, DistillOptions, FeatureDistillMode, KlDirection};
use fedbsd_core::nn::{BackboneNet, HeadLayer, LinearLayer, SplitModel};
use fedbsd_core::protocol::{client_update_fedbsd, ClientState};
use fedbsd_core::rng::{stream, Purpose};
use fedbsd_core::Tensor2D;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check(opts: DistillOptions, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let inst = random_instance(seed, opts);
        let err = max_rel_error(&analytic_grads(&inst), &central_differences(&inst, EPS));
        assert!(err <= TOL, "seed {seed}: max relative error {err:e} with {opts:?}");
    }
}

#[test]
fn reverse_kl_gradients_match_finite_differences() {
    check(
        DistillOptions {
            direction: KlDirection::Reverse,
            ..Default::default()
        },
        100..110,
    );
}

#[test]
fn mse_mode_gradients_match_finite_differences() {
    check(
        DistillOptions {
            mode: FeatureDistillMode::Mse,
            lambda: 0.7,
            ..Default::default()
        },
        200..210,
    );
}

#[test]
fn rescaled_and_weighted_gradients_match_finite_differences() {
    check(
        DistillOptions {
            tau: 0.5,
            lambda: 1.9,
            tau2_rescale: true,
            ..Default::default()
        },
        300..310,
    );
    check(
        DistillOptions {
            tau: 4.0,
            lambda: 0.0,
            ..Default::default()
        },
        310..315,
    );
}

#[test]
fn loss_value_matches_scalar_oracle() {
    for seed in 400..420 {
        let inst = random_instance(seed, DistillOptions::default());
        let x = to_tensor(&inst.x);
        let (logits, cache) = inst.model.forward(&x).unwrap();
        let out = bsd_loss(&to_tensor(&inst.teacher), &cache.features, &logits, &inst.labels, &inst.opts).unwrap();
        let params: Vec<f64> = inst.model.params().collect();
        let oracle = naive_loss(&params, &layer_dims(&inst.model), &inst);
        assert!((out.value.total - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "seed {seed}");
        assert!((out.value.total - (out.value.ce_part + out.value.distill_part)).abs() < 1e-12);
    }
}

#[test]
fn forward_matches_scalar_oracle() {
    for seed in 500..510 {
        let inst = random_instance(seed, DistillOptions::default());
        let params: Vec<f64> = inst.model.params().collect();
        let dims = layer_dims(&inst.model);
        let logits = inst.model.logits(&to_tensor(&inst.x)).unwrap();
        let head_only = inst.model.head.forward(&inst.model.backbone.features(&to_tensor(&inst.x)).unwrap()).unwrap();
        for (r, x) in inst.x.iter().enumerate() {
            let pre = naive_pre_acts(&params, &dims, x);
            for (a, b) in logits.row(r).iter().zip(pre.last().unwrap()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(logits.row(r), head_only.row(r));
        }
    }
}

#[test]
fn teacher_features_are_constants() {
    let inst = random_instance(600, DistillOptions::default());
    let x = to_tensor(&inst.x);
    let (logits, cache) = inst.model.forward(&x).unwrap();
    let teacher = to_tensor(&inst.teacher);
    let a = bsd_loss(&teacher, &cache.features, &logits, &inst.labels, &inst.opts).unwrap();
    let mut shifted = teacher.clone();
    shifted.set(0, 0, teacher.get(0, 0) + 1.0);
    let b = bsd_loss(&shifted, &cache.features, &logits, &inst.labels, &inst.opts).unwrap();
    assert_ne!(a.value.total, b.value.total);
    assert_eq!(a.value.ce_part, b.value.ce_part);
    assert_eq!(a.grad_logits, b.grad_logits);
    // the only feature-shaped gradient is the student's
    assert_eq!(a.grad_features.shape(), cache.features.shape());
}

#[test]
fn huge_temperature_is_uniform() {
    // deviation from 1/4 is about (z_i - mean z) / (4 tau), so unit-scale logits
    let z = Tensor2D::from_rows(&[vec![0.9, -1.0, 0.3, 0.5], vec![-0.2, 0.0, 1.0, -0.7]]).unwrap();
    let p = softmax_tau(&z, 1e6).unwrap();
    for v in p.values().as_slice() {
        assert!((v - 0.25).abs() < 1e-6);
    }
}

#[test]
fn linear_network_is_linear() {
    let mut rng = stream(7, Purpose::Init, 0, 0);
    let mut layers = Vec::new();
    for (i, o) in [(4, 6), (6, 3)] {
        let mut l = LinearLayer::zeros(i, o);
        l.init_glorot(&mut rng);
        layers.push((l, false));
    }
    let net = BackboneNet::from_layers(layers).unwrap();
    let x = Tensor2D::from_rows(&[vec![0.3, -1.2, 2.0, 0.7], vec![-0.1, 0.0, 5.0, -3.0]]).unwrap();
    let fx = net.features(&x).unwrap();
    for alpha in [-2.5, 0.0, 0.37, 11.0] {
        let mut ax = x.clone();
        ax.scale(alpha);
        let fax = net.features(&ax).unwrap();
        for (a, b) in fax.as_slice().iter().zip(fx.as_slice()) {
            assert!((a - alpha * b).abs() < 1e-9);
        }
    }
}

/// One sample, one backbone step from zero velocity: the parameter change
/// must be `-lr` times the finite-difference gradient of the loss in the
/// backbone parameters with the head held fixed.
#[test]
fn single_step_update_matches_hand_gradient() {
    let w1 = Tensor2D::from_rows(&[vec![0.5, -0.3], vec![0.2, 0.8], vec![-0.6, 0.1]]).unwrap();
    let w2 = Tensor2D::from_rows(&[vec![0.4, -0.7, 0.3], vec![0.9, 0.1, -0.2]]).unwrap();
    let wh = Tensor2D::from_rows(&[vec![1.0, -0.5], vec![-0.3, 0.6]]).unwrap();
    let local = BackboneNet::from_layers(vec![
        (LinearLayer::from_params(w1, vec![0.1, -0.2, 0.05]).unwrap(), true),
        (LinearLayer::from_params(w2, vec![0.0, 0.3]).unwrap(), false),
    ])
    .unwrap();
    let head = HeadLayer::from_layer(LinearLayer::from_params(wh, vec![0.2, -0.1]).unwrap());
    let model = SplitModel::new(local.clone(), head).unwrap();
    let mut global = local.clone();
    for l in global.layers_mut() {
        for w in l.weight_mut() {
            *w *= 0.8;
        }
    }

    let x = vec![vec![1.5, -0.7]];
    let label = 1;
    let data = Dataset::new(to_tensor(&x), vec![label], 2).unwrap();
    let shard = ClientShard {
        client_id: 0,
        train: data.clone(),
        test: data,
        class_set: vec![label],
    };
    let cfg = TrainConfig {
        head_epochs: 0,
        backbone_epochs: 1,
        batch_size: 1,
        lr: 0.1,
        momentum: 0.5,
        backbone_init: BackboneInit::Local,
        ..Default::default()
    };
    let mut client = ClientState::new(shard, model.clone());
    client_update_fedbsd(&mut client, &global, 1, &cfg, &mut stream(0, Purpose::ClientUpdate, 1, 0)).unwrap();

    let teacher = global.features(&to_tensor(&x)).unwrap();
    let inst = Instance {
        model: model.clone(),
        x,
        labels: vec![label],
        teacher: vec![teacher.row(0).to_vec()],
        opts: cfg.distill_options(),
    };
    let fd = central_differences(&inst, EPS);
    let before: Vec<f64> = model.params().collect();
    let after: Vec<f64> = client.model.params().collect();
    let n_backbone = model.backbone.param_count();
    for j in 0..before.len() {
        if j < n_backbone {
            let expected = -cfg.lr * fd[j];
            assert!(rel_error(after[j] - before[j], expected) < TOL, "param {j}: {} vs {expected}", after[j] - before[j]);
        } else {
            assert_eq!(after[j], before[j], "head parameter {j} moved");
        }
    }
}
