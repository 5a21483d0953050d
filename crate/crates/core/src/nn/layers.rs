//! Building blocks shared by the lossy and lossless networks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamBuilder, ParamId};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-uniform kernel (bound `1/sqrt(fan_in)`), zero bias, same padding.
    pub fn new<T: Scalar, R: Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        b.scope(name, |b| {
            let bound = 1.0 / ((cin * k * k) as f64).sqrt();
            Conv2d {
                weight: b.uniform("weight", [cout, cin, k, k], bound),
                bias: b.constant("bias", [cout, 1, 1, 1], 0.0),
                stride,
                pad: k / 2,
            }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, &w, &b, self.stride, self.pad)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// `x + conv(leaky(conv(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, name: &str, channels: usize) -> Self {
        b.scope(name, |b| ResBlock {
            conv1: Conv2d::new(b, "conv1", channels, channels, 3, 1),
            conv2: Conv2d::new(b, "conv2", channels, channels, 3, 1),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.conv1.forward(g, x)?;
        let h = g.leaky_relu(&h);
        let h = self.conv2.forward(g, &h)?;
        g.add(x, &h)
    }
}

pub fn res_stack<T: Scalar, R: Rng>(
    b: &mut ParamBuilder<'_, T, R>,
    name: &str,
    channels: usize,
    count: usize,
) -> Vec<ResBlock> {
    b.scope(name, |b| {
        (0..count)
            .map(|i| ResBlock::new(b, &i.to_string(), channels))
            .collect()
    })
}

pub fn run_stack<T: Scalar>(blocks: &[ResBlock], g: &mut Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
    let mut h = x.clone();
    for block in blocks {
        h = block.forward(g, &h)?;
    }
    Ok(h)
}

/// `x + trunk(x) * sigmoid(mask(x))`, each branch three residual blocks and a
/// 1x1 projection.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub trunk: Vec<ResBlock>,
    pub trunk_out: Conv2d,
    pub mask: Vec<ResBlock>,
    pub mask_out: Conv2d,
}

impl AttentionBlock {
    pub fn new<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, name: &str, channels: usize) -> Self {
        b.scope(name, |b| AttentionBlock {
            trunk: res_stack(b, "trunk", channels, 3),
            trunk_out: Conv2d::new(b, "trunk_out", channels, channels, 1, 1),
            mask: res_stack(b, "mask", channels, 3),
            mask_out: Conv2d::new(b, "mask_out", channels, channels, 1, 1),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let t = run_stack(&self.trunk, g, x)?;
        let t = self.trunk_out.forward(g, &t)?;
        let m = run_stack(&self.mask, g, x)?;
        let m = self.mask_out.forward(g, &m)?;
        let m = g.sigmoid(&m);
        let gated = g.mul(&t, &m)?;
        g.add(x, &gated)
    }
}

/// 3x3 convolution followed by a factor-2 pixel shuffle.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub conv: Conv2d,
}

impl Upsample {
    pub fn new<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, name: &str, cin: usize, cout: usize) -> Self {
        Upsample {
            conv: Conv2d::new(b, name, cin, cout * 4, 3, 1),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.conv.forward(g, x)?;
        g.pixel_shuffle(&h, 2)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[default]
    Gated,
    Concat,
}
