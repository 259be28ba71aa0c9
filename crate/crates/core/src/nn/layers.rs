//! Parameterised building blocks. Each layer owns only [`ParamId`]s; values
//! live in the model's [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weight and bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = store.register(format!("{name}.weight"), Tensor::uniform(&[inp, out], bound, rng), true);
        let bias = bias.then(|| store.register(format!("{name}.bias"), Tensor::uniform(&[out], bound, rng), true));
        Self {
            weight,
            bias,
            inp,
            out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        std::iter::once(self.weight).chain(self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gamma: store.register(format!("{name}.weight"), Tensor::ones(&[dim]), true),
            beta: store.register(format!("{name}.bias"), Tensor::zeros(&[dim]), true),
            eps,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, Some(gamma), Some(beta), self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: store.register(format!("{name}.weight"), Tensor::ones(&[channels]), true),
            beta: store.register(format!("{name}.bias"), Tensor::zeros(&[channels]), true),
            running_mean: store.register(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.register(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            eps,
            momentum,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.batch_norm(
            x,
            gamma,
            beta,
            self.running_mean,
            self.running_var,
            self.eps,
            self.momentum,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Self {
            weight: store.register(
                format!("{name}.weight"),
                Tensor::uniform(&[cout, cin, kernel, kernel], bound, rng),
                true,
            ),
            bias: store.register(format!("{name}.bias"), Tensor::uniform(&[cout], bound, rng), true),
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Two-layer GELU MLP applied per token.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// `(B, N, H*dh) -> (B*H, N, dh)`.
pub(crate) fn split_heads<T: Scalar>(g: &mut Graph<'_, T>, x: Var, heads: usize) -> Result<Var> {
    let &[b, n, d] = g.shape(x) else {
        return Err(crate::Error::shape("split_heads", format!("{:?}", g.shape(x))));
    };
    let dh = d / heads;
    let x = g.reshape(x, &[b, n, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, n, dh])
}

/// `(B*H, N, dh) -> (B, N, H*dh)`.
pub(crate) fn merge_heads<T: Scalar>(g: &mut Graph<'_, T>, x: Var, heads: usize) -> Result<Var> {
    let &[bh, n, dh] = g.shape(x) else {
        return Err(crate::Error::shape("merge_heads", format!("{:?}", g.shape(x))));
    };
    let b = bh / heads;
    let x = g.reshape(x, &[b, heads, n, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b, n, heads * dh])
}
