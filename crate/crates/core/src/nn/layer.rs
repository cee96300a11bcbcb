use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Dense affine map `y = x W^T + b` with its gradient and momentum buffers.
///
/// `weight` is `out x in`. Gradients accumulate across `accumulate_grads`
/// calls until [`LinearLayer::sgd_step`] consumes and clears them.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    weight: Tensor2D,
    bias: Vec<f64>,
    grad_weight: Tensor2D,
    grad_bias: Vec<f64>,
    vel_weight: Tensor2D,
    vel_bias: Vec<f64>,
}

impl LinearLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor2D::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            grad_weight: Tensor2D::zeros(out_dim, in_dim),
            grad_bias: vec![0.0; out_dim],
            vel_weight: Tensor2D::zeros(out_dim, in_dim),
            vel_bias: vec![0.0; out_dim],
        }
    }

    pub fn from_params(weight: Tensor2D, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("LinearLayer::from_params", format!("bias of {}", weight.rows()), format!("bias of {}", bias.len())));
        }
        let mut layer = Self::zeros(weight.cols(), weight.rows());
        layer.weight = weight;
        layer.bias = bias;
        Ok(layer)
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    pub fn weight(&self) -> &Tensor2D {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        self.weight.as_mut_slice()
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn grad_weight(&self) -> &Tensor2D {
        &self.grad_weight
    }

    pub fn grad_bias(&self) -> &[f64] {
        &self.grad_bias
    }

    pub fn vel_weight(&self) -> &Tensor2D {
        &self.vel_weight
    }

    pub fn vel_bias(&self) -> &[f64] {
        &self.vel_bias
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init_glorot<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let limit = (6.0 / (self.in_dim() + self.out_dim()) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bound");
        for w in self.weight.as_mut_slice() {
            *w = dist.sample(rng);
        }
        self.bias.fill(0.0);
        self.zero_grad();
        self.reset_velocity();
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("linear forward", format!("input width {}", self.in_dim()), format!("input width {}", x.cols())));
        }
        let mut y = x.matmul_nt(&self.weight)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    /// Adds `dL/dW = dy^T x` and `dL/db = 1^T dy` into the gradient buffers.
    pub fn accumulate_grads(&mut self, x: &Tensor2D, dy: &Tensor2D) -> Result<()> {
        if x.cols() != self.in_dim() || dy.cols() != self.out_dim() || x.rows() != dy.rows() {
            return Err(Error::shape(
                "linear backward",
                format!("input {}x{} / upstream {}x{}", dy.rows(), self.in_dim(), dy.rows(), self.out_dim()),
                format!("input {}x{} / upstream {}x{}", x.rows(), x.cols(), dy.rows(), dy.cols()),
            ));
        }
        let gw = dy.matmul_tn(x)?;
        self.grad_weight.add_assign(&gw)?;
        for (g, s) in self.grad_bias.iter_mut().zip(dy.column_sums()) {
            *g += s;
        }
        Ok(())
    }

    /// `dL/dx = dy W`.
    pub fn input_grad(&self, dy: &Tensor2D) -> Result<Tensor2D> {
        if dy.cols() != self.out_dim() {
            return Err(Error::shape("linear input_grad", format!("upstream width {}", self.out_dim()), format!("upstream width {}", dy.cols())));
        }
        dy.matmul(&self.weight)
    }

    /// Momentum SGD: `v <- momentum * v + g`, `p <- p - lr * v`, then clears `g`.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        if !self.grad_weight.is_finite() || self.grad_bias.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient at sgd step".into()));
        }
        update(self.weight.as_mut_slice(), self.vel_weight.as_mut_slice(), self.grad_weight.as_slice(), lr, momentum);
        update(&mut self.bias, &mut self.vel_bias, &self.grad_bias, lr, momentum);
        self.zero_grad();
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn reset_velocity(&mut self) {
        self.vel_weight.fill(0.0);
        self.vel_bias.fill(0.0);
    }

    pub fn same_shape(&self, other: &LinearLayer) -> bool {
        self.weight.shape() == other.weight.shape()
    }

    /// Copies weights and bias from `src`; grads and velocity are cleared.
    pub fn copy_params_from(&mut self, src: &LinearLayer) -> Result<()> {
        if !self.same_shape(src) {
            return Err(Error::Architecture(format!(
                "layer {}x{} cannot take parameters of {}x{}",
                self.out_dim(),
                self.in_dim(),
                src.out_dim(),
                src.in_dim()
            )));
        }
        self.weight.as_mut_slice().copy_from_slice(src.weight.as_slice());
        self.bias.copy_from_slice(&src.bias);
        self.zero_grad();
        self.reset_velocity();
        Ok(())
    }

    /// Weights (row-major) followed by bias.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weight.as_slice().iter().chain(self.bias.iter()).copied()
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.weight.as_mut_slice(), &mut self.bias)
    }

    pub(crate) fn param_slices(&self) -> (&[f64], &[f64]) {
        (self.weight.as_slice(), &self.bias)
    }
}

fn update(param: &mut [f64], vel: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}
