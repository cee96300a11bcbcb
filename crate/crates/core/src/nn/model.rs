//! MLP split into a shared backbone and a private classification head.
//!
//! The backbone is a chain of linear layers, each optionally followed by a
//! ReLU. By default every layer except the last is activated, so the features
//! handed to the head (and to feature distillation) are raw pre-activations.
//! The head is a single linear layer producing class logits.

use rand::Rng;

use super::layer::LinearLayer;
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Which parameters a backward pass writes gradients into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    BackboneOnly,
    HeadOnly,
    Full,
}

impl Scope {
    fn backbone(self) -> bool {
        matches!(self, Scope::BackboneOnly | Scope::Full)
    }

    fn head(self) -> bool {
        matches!(self, Scope::HeadOnly | Scope::Full)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneNet {
    layers: Vec<(LinearLayer, bool)>,
}

/// Activations recorded by [`BackboneNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    /// Input to each layer.
    inputs: Vec<Tensor2D>,
    /// Pre-activation output of each layer (kept only where a ReLU follows).
    pre_acts: Vec<Option<Tensor2D>>,
}

impl BackboneCache {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Tensor2D::rows)
    }
}

impl BackboneNet {
    /// Chain of layers through `dims` (input width first). ReLU follows every
    /// layer except the last unless `activate_last` is set.
    pub fn new(dims: &[usize], activate_last: bool) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidParameter(format!("backbone needs at least two positive widths, got {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| (LinearLayer::zeros(w[0], w[1]), i + 1 < n || activate_last))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<(LinearLayer, bool)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("backbone layers"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].0.out_dim() != pair[1].0.in_dim() {
                return Err(Error::Architecture(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].0.out_dim(),
                    i + 1,
                    pair[1].0.in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map(|(l, _)| l.out_dim()).unwrap_or(0)
    }

    pub fn layers(&self) -> impl Iterator<Item = &LinearLayer> {
        self.layers.iter().map(|(l, _)| l)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut LinearLayer> {
        self.layers.iter_mut().map(|(l, _)| l)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn activations(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers.iter().map(|(_, a)| *a)
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(LinearLayer::param_count).sum()
    }

    /// `(in, out, relu)` per layer.
    pub fn architecture(&self) -> Vec<(usize, usize, bool)> {
        self.layers.iter().map(|(l, a)| (l.in_dim(), l.out_dim(), *a)).collect()
    }

    pub fn same_architecture(&self, other: &BackboneNet) -> bool {
        self.architecture() == other.architecture()
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers().flat_map(LinearLayer::params)
    }

    fn check_input(&self, x: &Tensor2D) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("forward_backbone", format!("input width {}", self.input_dim()), format!("input width {}", x.cols())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<(Tensor2D, BackboneCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (layer, relu) in &self.layers {
            let z = layer.forward(&h)?;
            inputs.push(h);
            if *relu {
                let mut a = z.clone();
                relu_in_place(&mut a);
                pre_acts.push(Some(z));
                h = a;
            } else {
                pre_acts.push(None);
                h = z;
            }
        }
        Ok((h, BackboneCache { inputs, pre_acts }))
    }

    /// Forward pass without recording a cache.
    pub fn features(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.check_input(x)?;
        let mut h: Option<Tensor2D> = None;
        for (layer, relu) in &self.layers {
            let mut z = layer.forward(h.as_ref().unwrap_or(x))?;
            if *relu {
                relu_in_place(&mut z);
            }
            h = Some(z);
        }
        Ok(h.expect("backbone has at least one layer"))
    }

    /// Accumulates parameter gradients given `dL/dfeatures`.
    pub fn backward(&mut self, cache: &BackboneCache, dfeatures: &Tensor2D) -> Result<()> {
        self.check_cache(cache, dfeatures.rows())?;
        if dfeatures.cols() != self.feature_dim() {
            return Err(Error::shape("backbone backward", format!("feature grad width {}", self.feature_dim()), format!("width {}", dfeatures.cols())));
        }
        let mut grad = dfeatures.clone();
        for i in (0..self.layers.len()).rev() {
            if let Some(z) = &cache.pre_acts[i] {
                for (g, &pre) in grad.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if pre <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let layer = &mut self.layers[i].0;
            layer.accumulate_grads(&cache.inputs[i], &grad)?;
            if i > 0 {
                grad = layer.input_grad(&grad)?;
            }
        }
        Ok(())
    }

    fn check_cache(&self, cache: &BackboneCache, batch: usize) -> Result<()> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::shape("stale cache", format!("{} layers", self.layers.len()), format!("{} layers", cache.inputs.len())));
        }
        for (i, ((layer, relu), input)) in self.layers.iter().zip(&cache.inputs).enumerate() {
            if input.cols() != layer.in_dim() || input.rows() != batch || cache.pre_acts[i].is_some() != *relu {
                return Err(Error::shape(
                    "stale cache",
                    format!("layer {i} input {batch}x{}", layer.in_dim()),
                    format!("{}x{}", input.rows(), input.cols()),
                ));
            }
        }
        Ok(())
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        self.layers_mut().try_for_each(|l| l.sgd_step(lr, momentum))
    }

    pub fn zero_grad(&mut self) {
        self.layers_mut().for_each(LinearLayer::zero_grad);
    }

    pub fn reset_velocity(&mut self) {
        self.layers_mut().for_each(LinearLayer::reset_velocity);
    }

    pub fn init_params<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.layers_mut().for_each(|l| l.init_glorot(rng));
    }
}

fn relu_in_place(t: &mut Tensor2D) {
    for v in t.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayer {
    layer: LinearLayer,
}

impl HeadLayer {
    pub fn new(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            layer: LinearLayer::zeros(feature_dim, num_classes),
        }
    }

    pub fn from_layer(layer: LinearLayer) -> Self {
        Self { layer }
    }

    pub fn layer(&self) -> &LinearLayer {
        &self.layer
    }

    pub fn layer_mut(&mut self) -> &mut LinearLayer {
        &mut self.layer
    }

    pub fn num_classes(&self) -> usize {
        self.layer.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layer.in_dim()
    }

    pub fn forward(&self, features: &Tensor2D) -> Result<Tensor2D> {
        if features.cols() != self.feature_dim() {
            return Err(Error::shape("forward_head", format!("feature width {}", self.feature_dim()), format!("feature width {}", features.cols())));
        }
        self.layer.forward(features)
    }

    pub fn backward(&mut self, features: &Tensor2D, dlogits: &Tensor2D) -> Result<()> {
        self.layer.accumulate_grads(features, dlogits)
    }

    pub fn input_grad(&self, dlogits: &Tensor2D) -> Result<Tensor2D> {
        self.layer.input_grad(dlogits)
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        self.layer.sgd_step(lr, momentum)
    }
}

/// A client model: shared backbone plus private head.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub backbone: BackboneNet,
    pub head: HeadLayer,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub backbone: BackboneCache,
    pub features: Tensor2D,
}

impl SplitModel {
    /// MLP `input -> hidden[0] -> ... -> hidden[last] -> num_classes`; the
    /// last hidden layer is the feature layer (no activation).
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        let backbone = BackboneNet::new(&dims, false)?;
        if num_classes == 0 {
            return Err(Error::InvalidParameter("head needs at least one class".into()));
        }
        let head = HeadLayer::new(backbone.feature_dim(), num_classes);
        Ok(Self { backbone, head })
    }

    pub fn new(backbone: BackboneNet, head: HeadLayer) -> Result<Self> {
        if backbone.feature_dim() != head.feature_dim() {
            return Err(Error::Architecture(format!(
                "backbone emits {} features but head expects {}",
                backbone.feature_dim(),
                head.feature_dim()
            )));
        }
        Ok(Self { backbone, head })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.head.layer.param_count()
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.backbone.params().chain(self.head.layer.params())
    }

    pub fn same_architecture(&self, other: &SplitModel) -> bool {
        self.backbone.same_architecture(&other.backbone) && self.head.layer.same_shape(&other.head.layer)
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<(Tensor2D, ForwardCache)> {
        let (features, backbone) = self.backbone.forward(x)?;
        let logits = self.head.forward(&features)?;
        Ok((logits, ForwardCache { backbone, features }))
    }

    pub fn logits(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.head.forward(&self.backbone.features(x)?)
    }

    pub fn init_params<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.backbone.init_params(rng);
        self.head.layer.init_glorot(rng);
    }

    pub fn zero_grad(&mut self) {
        self.backbone.zero_grad();
        self.head.layer.zero_grad();
    }

    pub fn reset_velocity(&mut self) {
        self.backbone.reset_velocity();
        self.head.layer.reset_velocity();
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        self.backbone.sgd_step(lr, momentum)?;
        self.head.sgd_step(lr, momentum)
    }
}

pub fn forward_backbone(backbone: &BackboneNet, x: &Tensor2D) -> Result<(Tensor2D, BackboneCache)> {
    backbone.forward(x)
}

pub fn forward_head(head: &HeadLayer, features: &Tensor2D) -> Result<Tensor2D> {
    head.forward(features)
}

pub fn backward(model: &mut SplitModel, cache: &ForwardCache, dlogits: &Tensor2D, scope: Scope) -> Result<()> {
    backward_with_feature_grad(model, cache, dlogits, None, scope)
}

/// Backward pass where the features additionally receive a direct gradient
/// (the distillation term). `extra` only reaches the backbone.
pub fn backward_with_feature_grad(
    model: &mut SplitModel,
    cache: &ForwardCache,
    dlogits: &Tensor2D,
    extra: Option<&Tensor2D>,
    scope: Scope,
) -> Result<()> {
    let batch = cache.backbone.batch_size();
    if dlogits.rows() != batch || dlogits.cols() != model.num_classes() {
        return Err(Error::shape("backward", format!("logit grad {batch}x{}", model.num_classes()), format!("{}x{}", dlogits.rows(), dlogits.cols())));
    }
    if cache.features.shape() != (batch, model.backbone.feature_dim()) {
        return Err(Error::shape(
            "stale cache",
            format!("features {batch}x{}", model.backbone.feature_dim()),
            format!("{}x{}", cache.features.rows(), cache.features.cols()),
        ));
    }
    if let Some(e) = extra {
        if e.shape() != cache.features.shape() {
            return Err(Error::shape("backward feature grad", format!("{:?}", cache.features.shape()), format!("{:?}", e.shape())));
        }
    }
    if scope.backbone() {
        // Validate before any gradient is written.
        model.backbone.check_cache(&cache.backbone, batch)?;
    }
    if scope.head() {
        model.head.backward(&cache.features, dlogits)?;
    }
    if scope.backbone() {
        let mut dfeatures = model.head.input_grad(dlogits)?;
        if let Some(e) = extra {
            dfeatures.add_assign(e)?;
        }
        model.backbone.backward(&cache.backbone, &dfeatures)?;
    }
    Ok(())
}

pub fn init_params<R: Rng + ?Sized>(model: &mut SplitModel, rng: &mut R) {
    model.init_params(rng);
}

pub fn clone_model(model: &SplitModel) -> SplitModel {
    model.clone()
}

/// Overwrites `dst`'s backbone parameters with `src`'s. The destination's
/// gradients and momentum buffers are cleared; heads are not involved.
pub fn copy_backbone(src: &BackboneNet, dst: &mut BackboneNet) -> Result<()> {
    if !src.same_architecture(dst) {
        return Err(Error::Architecture(format!("cannot copy backbone {:?} into {:?}", src.architecture(), dst.architecture())));
    }
    for (d, s) in dst.layers_mut().zip(src.layers()) {
        d.copy_params_from(s)?;
    }
    Ok(())
}
