//! Reverse-mode tape.
//!
//! Each [`Var`] carries its value behind an `Arc`. Operations on untracked
//! inputs (or with gradients disabled) record nothing, so inference keeps
//! only live values in memory. Operations that touch a tracked input append a
//! node holding the parents it needs for the backward sweep.

use std::sync::Arc;

use super::conv::{conv2d_backward, conv2d_forward};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use crate::likelihood::{gaussian_log_mass, mixture_nll, MixtureKind, MAX_COMPONENTS, SCALE_FLOOR};
use crate::scalar::{lit, Scalar};

/// Leaky-ReLU negative slope used everywhere in the networks.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Likelihood floor inside the training Gaussian rate.
pub const TRAIN_PROB_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct Var<T> {
    id: Option<usize>,
    value: Arc<Tensor<T>>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> [usize; 4] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

/// Evaluates a per-channel scalar density network for the factorized prior.
pub trait ChannelDensity<T: Scalar>: Send + Sync {
    /// Bits of each element of `z` and, when `grads` is set, accumulates
    /// `upstream * d bits / d (z, params)` into it.
    fn bits(
        &self,
        z: &Tensor<T>,
        params: &[&Tensor<T>],
        upstream: Option<&Tensor<T>>,
        grads: Option<(&mut Tensor<T>, &mut [Tensor<T>])>,
    ) -> Tensor<T>;
}

enum Op<T: Scalar> {
    Input,
    Param(ParamId),
    Conv {
        x: Var<T>,
        w: Var<T>,
        b: Var<T>,
        stride: usize,
        pad: usize,
    },
    Add(Var<T>, Var<T>),
    Sub(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    Scale(Var<T>, T),
    ChannelScale(Var<T>, Vec<T>),
    LeakyRelu(Var<T>),
    Sigmoid(Var<T>, Arc<Tensor<T>>),
    Concat(Var<T>, Var<T>),
    Slice(Var<T>, usize),
    Shuffle(Var<T>, usize),
    Crop(Var<T>),
    Identity(Var<T>),
    Sum(Var<T>),
    GaussianBits {
        y: Var<T>,
        loc: Var<T>,
        log_scale: Var<T>,
    },
    MixtureBits {
        x: Var<T>,
        logits: Var<T>,
        loc: Var<T>,
        log_scale: Var<T>,
        components: usize,
        kind: MixtureKind,
    },
    ChannelBits {
        z: Var<T>,
        params: Vec<Var<T>>,
        density: Arc<dyn ChannelDensity<T>>,
    },
}

/// Counts network invocations so callers can assert pass budgets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassCounter {
    pub lossy: usize,
    pub lossless: usize,
}

pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Op<T>>,
    grad_enabled: bool,
    param_vars: Vec<Option<Var<T>>>,
    pub passes: PassCounter,
    kinks: Option<Vec<u64>>,
}

pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    inputs: Vec<(usize, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }

    /// Gradient of an input created with [`Graph::input_tracked`].
    pub fn input(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        let id = var.id?;
        self.inputs.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// A recording graph.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self::with_grad(store, true)
    }

    /// An inference graph: nothing is recorded.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self::with_grad(store, false)
    }

    fn with_grad(store: &'s ParamStore<T>, grad_enabled: bool) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            grad_enabled,
            param_vars: vec![None; store.len()],
            passes: PassCounter::default(),
            kinks: None,
        }
    }

    /// Records which side of zero every leaky-ReLU input falls on, so two
    /// evaluations can be compared for a crossed kink.
    pub fn track_kinks(&mut self) {
        self.kinks.get_or_insert_with(Vec::new);
    }

    /// Packed sign bits of all leaky-ReLU inputs seen so far, if tracked.
    pub fn kink_pattern(&self) -> Option<&[u64]> {
        self.kinks.as_deref()
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var<T> {
        let id = self.nodes.len();
        self.nodes.push(op);
        Var {
            id: Some(id),
            value: Arc::new(value),
        }
    }

    fn tracked(&self, parents: &[&Var<T>]) -> bool {
        self.grad_enabled && parents.iter().any(|p| p.id.is_some())
    }

    fn record(&mut self, parents: &[&Var<T>], op: impl FnOnce() -> Op<T>, value: Tensor<T>) -> Var<T> {
        if self.tracked(parents) {
            self.push(op(), value)
        } else {
            Var {
                id: None,
                value: Arc::new(value),
            }
        }
    }

    /// A constant leaf.
    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            value: Arc::new(t),
        }
    }

    /// A leaf whose gradient is reported by [`Gradients::input`].
    pub fn input_tracked(&mut self, t: Tensor<T>) -> Var<T> {
        if self.grad_enabled {
            self.push(Op::Input, t)
        } else {
            self.constant(t)
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var<T> {
        if let Some(v) = &self.param_vars[id.index()] {
            return v.clone();
        }
        let value = self.store.value_arc(id);
        let var = if self.grad_enabled {
            let nid = self.nodes.len();
            self.nodes.push(Op::Param(id));
            Var {
                id: Some(nid),
                value,
            }
        } else {
            Var { id: None, value }
        };
        self.param_vars[id.index()] = Some(var.clone());
        var
    }

    /// Cuts the gradient path.
    pub fn detach(&self, v: &Var<T>) -> Var<T> {
        Var {
            id: None,
            value: v.value.clone(),
        }
    }

    pub fn conv2d(&mut self, x: &Var<T>, w: &Var<T>, b: &Var<T>, stride: usize, pad: usize) -> Result<Var<T>> {
        let out = conv2d_forward(x.value(), w.value(), b.value(), stride, pad)?;
        Ok(self.record(
            &[x, w, b],
            || Op::Conv {
                x: x.clone(),
                w: w.clone(),
                b: b.clone(),
                stride,
                pad,
            },
            out,
        ))
    }

    fn same_shape(a: &Var<T>, b: &Var<T>, what: &str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape(a, b, "add")?;
        let out = a.value().zip_map(b.value(), |x, y| x + y);
        Ok(self.record(&[a, b], || Op::Add(a.clone(), b.clone()), out))
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape(a, b, "sub")?;
        let out = a.value().zip_map(b.value(), |x, y| x - y);
        Ok(self.record(&[a, b], || Op::Sub(a.clone(), b.clone()), out))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape(a, b, "mul")?;
        let out = a.value().zip_map(b.value(), |x, y| x * y);
        Ok(self.record(&[a, b], || Op::Mul(a.clone(), b.clone()), out))
    }

    pub fn scale(&mut self, a: &Var<T>, k: T) -> Var<T> {
        let out = a.value().map(|x| x * k);
        self.record(&[a], || Op::Scale(a.clone(), k), out)
    }

    /// Multiplies channel `c` by `scales[c]`.
    pub fn channel_scale(&mut self, a: &Var<T>, scales: &[T]) -> Result<Var<T>> {
        let [n, c, h, w] = a.shape();
        if scales.len() != c {
            return Err(Error::shape(format!("{} scales for {c} channels", scales.len())));
        }
        let mut out = a.value().clone();
        let hw = h * w;
        for b in 0..n {
            for (ch, &s) in scales.iter().enumerate() {
                let start = (b * c + ch) * hw;
                for v in &mut out.data_mut()[start..start + hw] {
                    *v *= s;
                }
            }
        }
        Ok(self.record(&[a], || Op::ChannelScale(a.clone(), scales.to_vec()), out))
    }

    pub fn leaky_relu(&mut self, a: &Var<T>) -> Var<T> {
        let slope: T = lit(LEAKY_SLOPE);
        if let Some(bits) = &mut self.kinks {
            for chunk in a.value().data().chunks(64) {
                bits.push(chunk.iter().enumerate().fold(0u64, |m, (i, &x)| m | (((x > T::zero()) as u64) << i)));
            }
        }
        let out = a.value().map(|x| if x > T::zero() { x } else { x * slope });
        self.record(&[a], || Op::LeakyRelu(a.clone()), out)
    }

    pub fn sigmoid(&mut self, a: &Var<T>) -> Var<T> {
        let out = Arc::new(a.value().map(crate::likelihood::sigmoid));
        if self.tracked(&[a]) {
            let id = self.nodes.len();
            self.nodes.push(Op::Sigmoid(a.clone(), out.clone()));
            Var { id: Some(id), value: out }
        } else {
            Var { id: None, value: out }
        }
    }

    pub fn concat(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().concat(b.value())?;
        Ok(self.record(&[a, b], || Op::Concat(a.clone(), b.clone()), out))
    }

    pub fn slice_channels(&mut self, a: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let out = a.value().slice_channels(start, len)?;
        Ok(self.record(&[a], || Op::Slice(a.clone(), start), out))
    }

    pub fn pixel_shuffle(&mut self, a: &Var<T>, r: usize) -> Result<Var<T>> {
        let out = a.value().pixel_shuffle(r)?;
        Ok(self.record(&[a], || Op::Shuffle(a.clone(), r), out))
    }

    /// Top-left spatial crop.
    pub fn crop(&mut self, a: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        if (a.shape()[2], a.shape()[3]) == (h, w) {
            return Ok(a.clone());
        }
        let out = a.value().crop(h, w)?;
        Ok(self.record(&[a], || Op::Crop(a.clone()), out))
    }

    /// Rounds half away from zero; the gradient passes straight through.
    pub fn round(&mut self, a: &Var<T>) -> Var<T> {
        let out = a.value().map(|x| x.round());
        self.record(&[a], || Op::Identity(a.clone()), out)
    }

    pub fn sum(&mut self, a: &Var<T>) -> Var<T> {
        let out = Tensor::scalar(a.value().sum());
        self.record(&[a], || Op::Sum(a.clone()), out)
    }

    /// Elementwise bits of `y` under a unit-bin discretized Gaussian with
    /// scale `max(exp(log_scale), 1e-6)`.
    pub fn gaussian_bits(&mut self, y: &Var<T>, loc: &Var<T>, log_scale: &Var<T>) -> Result<Var<T>> {
        Self::same_shape(y, loc, "gaussian loc")?;
        Self::same_shape(y, log_scale, "gaussian scale")?;
        let floor: T = lit(TRAIN_PROB_FLOOR);
        let sfloor: T = lit(SCALE_FLOOR);
        let out = Tensor::from_vec(
            y.shape(),
            y.value()
                .data()
                .iter()
                .zip(loc.value().data())
                .zip(log_scale.value().data())
                .map(|((&v, &m), &s)| {
                    -gaussian_log_mass(v, m, s.exp().max(sfloor), floor).log_mass / T::LN_2()
                })
                .collect(),
        )?;
        Ok(self.record(
            &[y, loc, log_scale],
            || Op::GaussianBits {
                y: y.clone(),
                loc: loc.clone(),
                log_scale: log_scale.clone(),
            },
            out,
        ))
    }

    /// Elementwise bits of `x` (`[n, c, h, w]`) under a per-pixel mixture
    /// whose parameters are `[n, c * components, h, w]`, component-minor.
    pub fn mixture_bits(
        &mut self,
        x: &Var<T>,
        logits: &Var<T>,
        loc: &Var<T>,
        log_scale: &Var<T>,
        components: usize,
        kind: MixtureKind,
    ) -> Result<Var<T>> {
        let [n, c, h, w] = x.shape();
        let want = [n, c * components, h, w];
        if components == 0 || components > MAX_COMPONENTS {
            return Err(Error::argument(format!("{components} mixture components")));
        }
        for p in [logits, loc, log_scale] {
            if p.shape() != want {
                return Err(Error::shape(format!(
                    "mixture parameters {:?}, expected {want:?}",
                    p.shape()
                )));
            }
        }
        let mut out = Tensor::zeros(x.shape());
        let hw = h * w;
        let mut lg = [T::zero(); MAX_COMPONENTS];
        let mut mu = [T::zero(); MAX_COMPONENTS];
        let mut ls = [T::zero(); MAX_COMPONENTS];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    gather(logits.value(), b, ch, components, p, hw, &mut lg);
                    gather(loc.value(), b, ch, components, p, hw, &mut mu);
                    gather(log_scale.value(), b, ch, components, p, hw, &mut ls);
                    let idx = (b * c + ch) * hw + p;
                    let xv = x.value().data()[idx];
                    out.data_mut()[idx] =
                        mixture_nll(kind, xv, &lg[..components], &mu[..components], &ls[..components]).bits;
                }
            }
        }
        Ok(self.record(
            &[x, logits, loc, log_scale],
            || Op::MixtureBits {
                x: x.clone(),
                logits: logits.clone(),
                loc: loc.clone(),
                log_scale: log_scale.clone(),
                components,
                kind,
            },
            out,
        ))
    }

    /// Elementwise bits of `z` under a per-channel learned density.
    pub fn channel_bits(
        &mut self,
        z: &Var<T>,
        params: Vec<Var<T>>,
        density: Arc<dyn ChannelDensity<T>>,
    ) -> Var<T> {
        let refs: Vec<&Tensor<T>> = params.iter().map(|p| p.value()).collect();
        let out = density.bits(z.value(), &refs, None, None);
        let mut parents: Vec<&Var<T>> = params.iter().collect();
        parents.push(z);
        if self.tracked(&parents) {
            self.push(
                Op::ChannelBits {
                    z: z.clone(),
                    params,
                    density,
                },
                out,
            )
        } else {
            self.constant(out)
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value().len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut out = Gradients {
            params: vec![None; self.store.len()],
            inputs: Vec::new(),
        };
        let Some(root) = loss.id else {
            return Ok(out);
        };
        grads[root] = Some(Tensor::full(loss.shape(), T::one()));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id] {
                Op::Input => out.inputs.push((id, g)),
                Op::Param(pid) => out.params[pid.index()] = Some(g),
                Op::Conv { x, w, b, stride, pad } => {
                    let cg = conv2d_backward(x.value(), w.value(), &g, *stride, *pad, x.id.is_some())?;
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads, x, dx);
                    }
                    accumulate(&mut grads, w, cg.weight);
                    accumulate(&mut grads, b, cg.bias);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    if b.id.is_some() {
                        accumulate(&mut grads, b, g.map(|v| -v));
                    }
                    accumulate(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    if a.id.is_some() {
                        accumulate(&mut grads, a, g.zip_map(b.value(), |u, v| u * v));
                    }
                    if b.id.is_some() {
                        accumulate(&mut grads, b, g.zip_map(a.value(), |u, v| u * v));
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    accumulate(&mut grads, a, g.map(|v| v * k));
                }
                Op::ChannelScale(a, scales) => {
                    let [n, c, h, w] = g.shape();
                    let mut d = g;
                    for b in 0..n {
                        for (ch, &s) in scales.iter().enumerate() {
                            let start = (b * c + ch) * h * w;
                            for v in &mut d.data_mut()[start..start + h * w] {
                                *v *= s;
                            }
                        }
                    }
                    accumulate(&mut grads, a, d);
                }
                Op::LeakyRelu(a) => {
                    let slope: T = lit(LEAKY_SLOPE);
                    let d = g.zip_map(a.value(), |u, x| if x > T::zero() { u } else { u * slope });
                    accumulate(&mut grads, a, d);
                }
                Op::Sigmoid(a, s) => {
                    let d = g.zip_map(s, |u, y| u * y * (T::one() - y));
                    accumulate(&mut grads, a, d);
                }
                Op::Concat(a, b) => {
                    let ca = a.shape()[1];
                    let cb = b.shape()[1];
                    if a.id.is_some() {
                        accumulate(&mut grads, a, g.slice_channels(0, ca)?);
                    }
                    if b.id.is_some() {
                        accumulate(&mut grads, b, g.slice_channels(ca, cb)?);
                    }
                }
                Op::Slice(a, start) => {
                    let [n, c, h, w] = a.shape();
                    let len = g.channels();
                    let mut d = Tensor::zeros([n, c, h, w]);
                    let hw = h * w;
                    for bi in 0..n {
                        let dst = (bi * c + start) * hw;
                        let src = bi * len * hw;
                        d.data_mut()[dst..dst + len * hw].copy_from_slice(&g.data()[src..src + len * hw]);
                    }
                    accumulate(&mut grads, a, d);
                }
                Op::Shuffle(a, r) => accumulate(&mut grads, a, g.pixel_unshuffle(*r)?),
                Op::Crop(a) => {
                    let [n, c, h, w] = a.shape();
                    let (gh, gw) = (g.height(), g.width());
                    let mut d = Tensor::zeros([n, c, h, w]);
                    for bi in 0..n {
                        for ch in 0..c {
                            let src = g.plane(bi, ch);
                            for y in 0..gh {
                                let dst = d.index(bi, ch, y, 0);
                                d.data_mut()[dst..dst + gw].copy_from_slice(&src[y * gw..(y + 1) * gw]);
                            }
                        }
                    }
                    accumulate(&mut grads, a, d);
                }
                Op::Identity(a) => accumulate(&mut grads, a, g),
                Op::Sum(a) => {
                    let v = g.data()[0];
                    accumulate(&mut grads, a, Tensor::full(a.shape(), v));
                }
                Op::GaussianBits { y, loc, log_scale } => {
                    let floor: T = lit(TRAIN_PROB_FLOOR);
                    let sfloor: T = lit(SCALE_FLOOR);
                    let to_bits = -T::one() / T::LN_2();
                    let len = g.len();
                    let mut dy = vec![T::zero(); len];
                    let mut dm = vec![T::zero(); len];
                    let mut ds = vec![T::zero(); len];
                    for i in 0..len {
                        let raw = log_scale.value().data()[i].exp();
                        let s = raw.max(sfloor);
                        let lm = gaussian_log_mass(y.value().data()[i], loc.value().data()[i], s, floor);
                        let u = g.data()[i] * to_bits;
                        dy[i] = u * lm.d_x;
                        dm[i] = u * lm.d_loc;
                        ds[i] = if raw > sfloor { u * lm.d_scale * s } else { T::zero() };
                    }
                    let shape = g.shape();
                    accumulate(&mut grads, y, Tensor::from_vec(shape, dy)?);
                    accumulate(&mut grads, loc, Tensor::from_vec(shape, dm)?);
                    accumulate(&mut grads, log_scale, Tensor::from_vec(shape, ds)?);
                }
                Op::MixtureBits {
                    x,
                    logits,
                    loc,
                    log_scale,
                    components,
                    kind,
                } => {
                    let k = *components;
                    let [n, c, h, w] = x.shape();
                    let hw = h * w;
                    let mut dx = Tensor::zeros(x.shape());
                    let mut dl = Tensor::zeros(logits.shape());
                    let mut dmu = Tensor::zeros(loc.shape());
                    let mut dls = Tensor::zeros(log_scale.shape());
                    let mut lg = [T::zero(); MAX_COMPONENTS];
                    let mut mu = [T::zero(); MAX_COMPONENTS];
                    let mut ls = [T::zero(); MAX_COMPONENTS];
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                gather(logits.value(), b, ch, k, p, hw, &mut lg);
                                gather(loc.value(), b, ch, k, p, hw, &mut mu);
                                gather(log_scale.value(), b, ch, k, p, hw, &mut ls);
                                let idx = (b * c + ch) * hw + p;
                                let u = g.data()[idx];
                                let r = mixture_nll(*kind, x.value().data()[idx], &lg[..k], &mu[..k], &ls[..k]);
                                dx.data_mut()[idx] = u * r.d_x;
                                for j in 0..k {
                                    let pi = ((b * c * k) + ch * k + j) * hw + p;
                                    dl.data_mut()[pi] = u * r.d_logits[j];
                                    dmu.data_mut()[pi] = u * r.d_loc[j];
                                    dls.data_mut()[pi] = u * r.d_log_scale[j];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, logits, dl);
                    accumulate(&mut grads, loc, dmu);
                    accumulate(&mut grads, log_scale, dls);
                }
                Op::ChannelBits { z, params, density } => {
                    let refs: Vec<&Tensor<T>> = params.iter().map(|p| p.value()).collect();
                    let mut dz = Tensor::zeros(z.shape());
                    let mut dparams: Vec<Tensor<T>> =
                        params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                    density.bits(z.value(), &refs, Some(&g), Some((&mut dz, &mut dparams)));
                    accumulate(&mut grads, z, dz);
                    for (p, d) in params.iter().zip(dparams) {
                        accumulate(&mut grads, p, d);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[inline]
fn gather<T: Scalar>(t: &Tensor<T>, b: usize, ch: usize, k: usize, p: usize, hw: usize, out: &mut [T]) {
    let c_total = t.channels();
    for (j, o) in out.iter_mut().enumerate().take(k) {
        *o = t.data()[((b * c_total) + ch * k + j) * hw + p];
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], var: &Var<T>, g: Tensor<T>) {
    let Some(id) = var.id else { return };
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
