//! Lossy transform coder `C(·)`: analysis/synthesis transforms with a
//! mean-scale Gaussian hyperprior and a factorized prior on the hyper-latent.
//! There is no context model: every quantity is produced by a fixed number of
//! network passes.

use std::sync::Arc;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::likelihood::{gaussian_interval_mass, sigmoid, PROB_FLOOR, SCALE_FLOOR};
use crate::nn::graph::{ChannelDensity, TRAIN_PROB_FLOOR};
use crate::nn::layers::{AttentionBlock, Conv2d, ResBlock, Upsample};
use crate::nn::{Graph, ParamBuilder, ParamId, ParamStore, Tensor, Var};
use crate::scalar::{lit, Scalar};

/// Total downsampling of the analysis transform.
pub const LATENT_STRIDE: usize = 16;
/// Downsampling from input to hyper-latent; inputs are padded to a multiple.
pub const PAD_MULTIPLE: usize = 64;
/// Hidden widths of the factorized density cascade.
pub const PRIOR_FILTERS: [usize; 3] = [3, 3, 3];
const PRIOR_INIT_SCALE: f64 = 10.0;

/// How latents are quantized.
pub enum Quantizer<'a> {
    /// Round half away from zero.
    Round,
    /// Add i.i.d. `U(-1/2, 1/2)` noise.
    Noise(&'a mut dyn RngCore),
}

pub fn quantize<T: Scalar>(g: &mut Graph<'_, T>, v: &Var<T>, q: &mut Quantizer<'_>) -> Result<Var<T>> {
    match q {
        Quantizer::Round => Ok(g.round(v)),
        Quantizer::Noise(rng) => {
            let n = v.value().len();
            let noise = (0..n).map(|_| lit::<T>(rng.gen::<f64>() - 0.5)).collect();
            let noise = g.constant(Tensor::from_vec(v.shape(), noise)?);
            g.add(v, &noise)
        }
    }
}

struct Stage {
    conv: Conv2d,
    block: ResBlock,
}

struct UpStage {
    block: ResBlock,
    up: Upsample,
}

pub struct LossyNet {
    channels: usize,
    analysis: Vec<Stage>,
    analysis_attention: [AttentionBlock; 2],
    synthesis_attention: [AttentionBlock; 2],
    synthesis: Vec<UpStage>,
    hyper_analysis: [Conv2d; 3],
    hyper_synthesis_up: [Upsample; 2],
    hyper_synthesis_out: Conv2d,
    prior: FactorizedPrior,
}

/// Everything one application of `C(·)` produces.
pub struct LossyPass<T: Scalar> {
    pub y: Var<T>,
    pub y_hat: Var<T>,
    pub z_hat: Var<T>,
    pub mean: Var<T>,
    pub log_scale: Var<T>,
    pub x_tilde: Var<T>,
}

impl LossyNet {
    pub fn new<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, channels: usize) -> Self {
        let n = channels;
        b.scope("lossy", |b| {
            let analysis = (0..4)
                .map(|i| {
                    b.scope(&format!("analysis{i}"), |b| Stage {
                        conv: Conv2d::new(b, "down", if i == 0 { 2 } else { n }, n, 3, 2),
                        block: ResBlock::new(b, "block", n),
                    })
                })
                .collect();
            let analysis_attention = [
                AttentionBlock::new(b, "analysis_att0", n),
                AttentionBlock::new(b, "analysis_att1", n),
            ];
            let synthesis_attention = [
                AttentionBlock::new(b, "synthesis_att0", n),
                AttentionBlock::new(b, "synthesis_att1", n),
            ];
            let synthesis = (0..4)
                .map(|i| {
                    b.scope(&format!("synthesis{i}"), |b| UpStage {
                        block: ResBlock::new(b, "block", n),
                        up: Upsample::new(b, "up", n, if i == 3 { 2 } else { n }),
                    })
                })
                .collect();
            let hyper_analysis = [
                Conv2d::new(b, "hyper_a0", n, n, 3, 1),
                Conv2d::new(b, "hyper_a1", n, n, 3, 2),
                Conv2d::new(b, "hyper_a2", n, n, 3, 2),
            ];
            let hyper_synthesis_up = [Upsample::new(b, "hyper_s0", n, n), Upsample::new(b, "hyper_s1", n, n)];
            let hyper_synthesis_out = Conv2d::new(b, "hyper_s2", n, 2 * n, 3, 1);
            let prior = FactorizedPrior::new(b, "prior", n);
            LossyNet {
                channels: n,
                analysis,
                analysis_attention,
                synthesis_attention,
                synthesis,
                hyper_analysis,
                hyper_synthesis_up,
                hyper_synthesis_out,
                prior,
            }
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn prior(&self) -> &FactorizedPrior {
        &self.prior
    }

    pub fn analysis<T: Scalar>(&self, g: &mut Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let [_, _, h, w] = x.shape();
        if h % LATENT_STRIDE != 0 || w % LATENT_STRIDE != 0 {
            return Err(Error::shape(format!(
                "analysis input {h}x{w} is not a multiple of {LATENT_STRIDE}"
            )));
        }
        let mut v = x.clone();
        for (i, stage) in self.analysis.iter().enumerate() {
            v = stage.conv.forward(g, &v)?;
            v = g.leaky_relu(&v);
            v = stage.block.forward(g, &v)?;
            if i == 1 {
                v = self.analysis_attention[0].forward(g, &v)?;
            }
        }
        self.analysis_attention[1].forward(g, &v)
    }

    /// Counts as one lossy pass.
    pub fn synthesis<T: Scalar>(&self, g: &mut Graph<'_, T>, y_hat: &Var<T>) -> Result<Var<T>> {
        g.passes.lossy += 1;
        let mut v = self.synthesis_attention[0].forward(g, y_hat)?;
        for (i, stage) in self.synthesis.iter().enumerate() {
            v = stage.block.forward(g, &v)?;
            v = stage.up.forward(g, &v)?;
            if i < 3 {
                v = g.leaky_relu(&v);
            }
            if i == 1 {
                v = self.synthesis_attention[1].forward(g, &v)?;
            }
        }
        Ok(v)
    }

    pub fn hyper_analysis<T: Scalar>(&self, g: &mut Graph<'_, T>, y: &Var<T>) -> Result<Var<T>> {
        let [_, _, h, w] = y.shape();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("hyper-analysis input {h}x{w} is not a multiple of 4")));
        }
        let mut v = self.hyper_analysis[0].forward(g, y)?;
        v = g.leaky_relu(&v);
        v = self.hyper_analysis[1].forward(g, &v)?;
        v = g.leaky_relu(&v);
        self.hyper_analysis[2].forward(g, &v)
    }

    /// Means and log-scales of the latent prior. Scales are
    /// `max(exp(log_scale), 1e-6)`.
    pub fn hyper_synthesis<T: Scalar>(&self, g: &mut Graph<'_, T>, z_hat: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let mut v = z_hat.clone();
        for up in &self.hyper_synthesis_up {
            v = up.forward(g, &v)?;
            v = g.leaky_relu(&v);
        }
        let out = self.hyper_synthesis_out.forward(g, &v)?;
        let n = self.channels;
        Ok((g.slice_channels(&out, 0, n)?, g.slice_channels(&out, n, n)?))
    }

    /// One full application of `C(·)` to a padded, normalized input.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: &Var<T>, q: &mut Quantizer<'_>) -> Result<LossyPass<T>> {
        let [_, _, h, w] = x.shape();
        if h % PAD_MULTIPLE != 0 || w % PAD_MULTIPLE != 0 {
            return Err(Error::shape(format!("lossy input {h}x{w} is not a multiple of {PAD_MULTIPLE}")));
        }
        let y = self.analysis(g, x)?;
        let z = self.hyper_analysis(g, &y)?;
        let z_hat = quantize(g, &z, q)?;
        let (mean, log_scale) = self.hyper_synthesis(g, &z_hat)?;
        let y_hat = quantize(g, &y, q)?;
        let x_tilde = self.synthesis(g, &y_hat)?;
        Ok(LossyPass {
            y,
            y_hat,
            z_hat,
            mean,
            log_scale,
            x_tilde,
        })
    }

    /// Elementwise training rates `(bits of ŷ, bits of ẑ)`.
    pub fn rates<T: Scalar>(&self, g: &mut Graph<'_, T>, pass: &LossyPass<T>) -> Result<(Var<T>, Var<T>)> {
        let y_bits = g.gaussian_bits(&pass.y_hat, &pass.mean, &pass.log_scale)?;
        let z_bits = self.prior.bits(g, &pass.z_hat);
        Ok((y_bits, z_bits))
    }
}

/// Per-channel learned CDF `F_c(t) = sigmoid(logit_c(t))`, where `logit_c`
/// is a monotone cascade of softplus-weighted affine maps with tanh
/// corrections.
pub struct FactorizedPrior {
    channels: usize,
    params: Vec<ParamId>,
    density: FactorizedDensity,
}

impl FactorizedPrior {
    pub fn new<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, name: &str, channels: usize) -> Self {
        let dims = FactorizedDensity::dims();
        let layers = dims.len() - 1;
        let scale = PRIOR_INIT_SCALE.powf(1.0 / layers as f64);
        let params = b.scope(name, |b| {
            let mut ids = Vec::new();
            for i in 0..layers {
                let (din, dout) = (dims[i], dims[i + 1]);
                let init = (1.0 / scale / dout as f64).exp_m1().ln();
                ids.push(b.constant(&format!("matrix{i}"), [channels, dout, din, 1], init));
                ids.push(b.uniform(&format!("bias{i}"), [channels, dout, 1, 1], 0.5));
                if i + 1 < layers {
                    ids.push(b.constant(&format!("factor{i}"), [channels, dout, 1, 1], 0.0));
                }
            }
            ids
        });
        FactorizedPrior {
            channels,
            params,
            density: FactorizedDensity { channels },
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bits<T: Scalar>(&self, g: &mut Graph<'_, T>, z: &Var<T>) -> Var<T> {
        let params = self.params.iter().map(|&id| g.param(id)).collect();
        g.channel_bits(z, params, Arc::new(self.density.clone()))
    }

    /// Frozen f64 copy for coding.
    pub fn snapshot<T: Scalar>(&self, store: &ParamStore<T>) -> FactorizedCdf {
        FactorizedCdf {
            density: self.density.clone(),
            params: self.params.iter().map(|&id| store.value(id).cast()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FactorizedDensity {
    channels: usize,
}

const MAX_WIDTH: usize = 3;

#[derive(Clone, Copy, Default)]
struct LayerTrace<T> {
    input: [T; MAX_WIDTH],
    pre: [T; MAX_WIDTH],
}

impl FactorizedDensity {
    fn dims() -> Vec<usize> {
        let mut d = vec![1];
        d.extend_from_slice(&PRIOR_FILTERS);
        d.push(1);
        d
    }

    /// `(matrix, bias, factor)` parameter indices of layer `i`.
    fn layer_params(i: usize, layers: usize) -> (usize, usize, Option<usize>) {
        let base = 3 * i;
        (base, base + 1, (i + 1 < layers).then_some(base + 2))
    }

    fn logit<T: Scalar>(&self, c: usize, t: T, params: &[&Tensor<T>], trace: &mut [LayerTrace<T>]) -> T {
        let dims = Self::dims();
        let layers = dims.len() - 1;
        let mut v = [T::zero(); MAX_WIDTH];
        v[0] = t;
        for i in 0..layers {
            let (din, dout) = (dims[i], dims[i + 1]);
            let (mi, bi, fi) = Self::layer_params(i, layers);
            let (m, b) = (params[mi].data(), params[bi].data());
            let mut u = [T::zero(); MAX_WIDTH];
            for o in 0..dout {
                let mut acc = b[c * dout + o];
                for j in 0..din {
                    acc += softplus(m[(c * dout + o) * din + j]) * v[j];
                }
                u[o] = acc;
            }
            trace[i] = LayerTrace { input: v, pre: u };
            v = [T::zero(); MAX_WIDTH];
            for o in 0..dout {
                v[o] = match fi {
                    Some(fi) => u[o] + params[fi].data()[c * dout + o].tanh() * u[o].tanh(),
                    None => u[o],
                };
            }
        }
        v[0]
    }

    /// Accumulates parameter gradients for `d logit = g` and returns `d/dt`.
    fn logit_backward<T: Scalar>(
        &self,
        c: usize,
        gout: T,
        params: &[&Tensor<T>],
        trace: &[LayerTrace<T>],
        dparams: &mut [Tensor<T>],
    ) -> T {
        let dims = Self::dims();
        let layers = dims.len() - 1;
        let mut dv = [T::zero(); MAX_WIDTH];
        dv[0] = gout;
        for i in (0..layers).rev() {
            let (din, dout) = (dims[i], dims[i + 1]);
            let (mi, bi, fi) = Self::layer_params(i, layers);
            let tr = &trace[i];
            let mut du = [T::zero(); MAX_WIDTH];
            for o in 0..dout {
                du[o] = match fi {
                    Some(fi) => {
                        let k = c * dout + o;
                        let a = params[fi].data()[k].tanh();
                        let tu = tr.pre[o].tanh();
                        dparams[fi].data_mut()[k] += dv[o] * tu * (T::one() - a * a);
                        dv[o] * (T::one() + a * (T::one() - tu * tu))
                    }
                    None => dv[o],
                };
            }
            let m = params[mi].data();
            let mut dinput = [T::zero(); MAX_WIDTH];
            for o in 0..dout {
                dparams[bi].data_mut()[c * dout + o] += du[o];
                for j in 0..din {
                    let k = (c * dout + o) * din + j;
                    dparams[mi].data_mut()[k] += du[o] * tr.input[j] * sigmoid(m[k]);
                    dinput[j] += softplus(m[k]) * du[o];
                }
            }
            dv = dinput;
        }
        dv[0]
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `sigmoid(hi) - sigmoid(lo)` evaluated on the side that avoids cancellation.
pub fn logit_interval_mass<T: Scalar>(lo: T, hi: T) -> T {
    if lo + hi > T::zero() {
        sigmoid(-lo) - sigmoid(-hi)
    } else {
        sigmoid(hi) - sigmoid(lo)
    }
}

impl<T: Scalar> ChannelDensity<T> for FactorizedDensity {
    fn bits(
        &self,
        z: &Tensor<T>,
        params: &[&Tensor<T>],
        upstream: Option<&Tensor<T>>,
        mut grads: Option<(&mut Tensor<T>, &mut [Tensor<T>])>,
    ) -> Tensor<T> {
        let [_, c_total, h, w] = z.shape();
        debug_assert_eq!(c_total, self.channels);
        let hw = h * w;
        let half: T = lit(0.5);
        let floor: T = lit(TRAIN_PROB_FLOOR);
        let layers = Self::dims().len() - 1;
        let mut tr_lo = vec![LayerTrace::default(); layers];
        let mut tr_hi = vec![LayerTrace::default(); layers];
        let mut out = Tensor::zeros(z.shape());
        for (idx, &zv) in z.data().iter().enumerate() {
            let c = (idx / hw) % c_total;
            let lo = self.logit(c, zv - half, params, &mut tr_lo);
            let hi = self.logit(c, zv + half, params, &mut tr_hi);
            let p = logit_interval_mass(lo, hi);
            out.data_mut()[idx] = -p.max(floor).ln() / T::LN_2();
            if let (Some((dz, dparams)), Some(up)) = (grads.as_mut(), upstream) {
                if p > floor {
                    let u = up.data()[idx] * (-T::one() / (p * T::LN_2()));
                    let dens = |l: T| sigmoid(l) * sigmoid(-l);
                    let g_hi = self.logit_backward(c, u * dens(hi), params, &tr_hi, dparams);
                    let g_lo = self.logit_backward(c, -u * dens(lo), params, &tr_lo, dparams);
                    dz.data_mut()[idx] += g_hi + g_lo;
                }
            }
        }
        out
    }
}

/// A scalar CDF per channel, `F_c(t) = sigmoid(logit(c, t))`.
pub trait ChannelCdf {
    fn logit(&self, channel: usize, t: f64) -> f64;
}

/// f64 snapshot of a trained factorized prior.
pub struct FactorizedCdf {
    density: FactorizedDensity,
    params: Vec<Tensor<f64>>,
}

impl ChannelCdf for FactorizedCdf {
    fn logit(&self, channel: usize, t: f64) -> f64 {
        let refs: Vec<&Tensor<f64>> = self.params.iter().collect();
        let mut trace = [LayerTrace::default(); 4];
        self.density.logit(channel, t, &refs, &mut trace)
    }
}

/// Folded pmf over `lo..=hi` for one channel of a [`ChannelCdf`].
pub fn channel_pmf(cdf: &dyn ChannelCdf, channel: usize, lo: i64, hi: i64) -> Vec<f64> {
    channel_bucket_pmf(cdf, channel, lo, 1, (hi - lo + 1) as usize)
}

/// Folded pmf over `buckets` runs of `step` symbols starting at `lo`.
pub fn channel_bucket_pmf(cdf: &dyn ChannelCdf, channel: usize, lo: i64, step: i64, buckets: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..buckets as i64 - 1)
        .map(|j| cdf.logit(channel, (lo + (j + 1) * step) as f64 - 0.5))
        .collect();
    let mut pmf = Vec::with_capacity(buckets);
    let mut prev = f64::NEG_INFINITY;
    for l in logits.iter().copied().chain(std::iter::once(f64::INFINITY)) {
        let m = if prev == f64::NEG_INFINITY {
            sigmoid(l)
        } else if l == f64::INFINITY {
            sigmoid(-prev)
        } else {
            logit_interval_mass(prev, l)
        };
        pmf.push(m.max(0.0));
        prev = l;
    }
    pmf
}

/// Σ −log₂ p(ẑ) with `p = F(ẑ+½) − F(ẑ−½)` floored at 2⁻¹⁶.
pub fn rate_z(z_hat: &Tensor<f64>, cdf: &dyn ChannelCdf) -> f64 {
    let [_, c_total, h, w] = z_hat.shape();
    z_hat
        .data()
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let c = (i / (h * w)) % c_total;
            let p = logit_interval_mass(cdf.logit(c, z - 0.5), cdf.logit(c, z + 0.5));
            -p.max(PROB_FLOOR).log2()
        })
        .sum()
}

/// Σ −log₂ p(ŷ) under unit-bin Gaussians, floored at 2⁻¹⁶. `scale` is
/// clamped to at least 1e-6.
pub fn rate_y(y_hat: &[f64], mean: &[f64], scale: &[f64]) -> f64 {
    y_hat
        .iter()
        .zip(mean)
        .zip(scale)
        .map(|((&y, &m), &s)| {
            let p = gaussian_interval_mass(y - 0.5, y + 0.5, m, s.max(SCALE_FLOOR));
            -p.max(PROB_FLOOR).log2()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input_gradient, check_param_gradient};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Logistic;

    impl ChannelCdf for Logistic {
        fn logit(&self, _: usize, t: f64) -> f64 {
            t
        }
    }

    fn net(channels: usize, seed: u64) -> (ParamStore<f64>, LossyNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = LossyNet::new(&mut ParamBuilder::new(&mut store, &mut rng), channels);
        (store, net)
    }

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes() {
        let (store, net) = net(8, 1);
        let mut g = Graph::inference(&store);
        let x = g.constant(random([1, 2, 256, 64], 2));
        let pass = net.forward(&mut g, &x, &mut Quantizer::Round).unwrap();
        assert_eq!(pass.y.shape(), [1, 8, 16, 4]);
        assert_eq!(pass.z_hat.shape(), [1, 8, 4, 1]);
        assert_eq!(pass.mean.shape(), [1, 8, 16, 4]);
        assert_eq!(pass.x_tilde.shape(), [1, 2, 256, 64]);
        assert_eq!(g.passes.lossy, 1);
        assert!(pass.y_hat.value().data().iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn zero_weights() {
        let (mut store, net) = net(4, 1);
        let ids: Vec<_> = store.ids().filter(|&i| !store.name(i).contains("prior")).collect();
        for id in ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::inference(&store);
        let x = g.constant(random([1, 2, 64, 64], 3));
        let y = net.analysis(&mut g, &x).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let x_tilde = net.synthesis(&mut g, &y).unwrap();
        assert!(x_tilde.value().data().iter().all(|&v| v == 0.0));
        let z = g.constant(Tensor::zeros([1, 4, 1, 1]));
        let (mean, log_scale) = net.hyper_synthesis(&mut g, &z).unwrap();
        assert!(mean.value().data().iter().all(|&v| v == 0.0));
        assert!(log_scale.value().data().iter().all(|&v| v.exp() == 1.0));
    }

    #[test]
    fn rejects_unpadded_input() {
        let (store, net) = net(4, 1);
        let mut g = Graph::inference(&store);
        let x = g.constant(random([1, 2, 40, 64], 3));
        assert!(net.analysis(&mut g, &x).is_err());
        assert!(net.forward(&mut g, &x, &mut Quantizer::Round).is_err());
    }

    #[test]
    fn quantizer_modes() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let v = g.constant(Tensor::from_vec([1, 1, 1, 4], vec![2.5, -2.5, 1.2, -0.4]).unwrap());
        let r = quantize(&mut g, &v, &mut Quantizer::Round).unwrap();
        assert_eq!(r.value().data(), &[3.0, -3.0, 1.0, -0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let big = g.constant(random([1, 1, 50, 50], 4));
        let n = quantize(&mut g, &big, &mut Quantizer::Noise(&mut rng)).unwrap();
        for (a, b) in n.value().data().iter().zip(big.value().data()) {
            assert!((-0.5..0.5).contains(&(a - b)));
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let (store, net) = net(4, 9);
        let store = store.cast::<f32>();
        let run = || {
            let mut g = Graph::inference(&store);
            let x = g.constant(random([1, 2, 64, 128], 5).cast::<f32>());
            net.forward(&mut g, &x, &mut Quantizer::Round).unwrap().x_tilde.into_tensor()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rate_spot_values() {
        let bits = rate_y(&[0.0], &[0.0], &[1.0]);
        assert!((bits - 1.384867).abs() < 1e-5, "{bits}");
        assert!(rate_y(&[3.0], &[3.0], &[1e-9]) < 1e-12);
        let z = Tensor::from_vec([1, 1, 1, 1], vec![0.0]).unwrap();
        let bits = rate_z(&z, &Logistic);
        assert!((bits - 2.02963).abs() < 1e-5, "{bits}");
        let pmf = channel_pmf(&Logistic, 0, -12, 9);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((pmf[12] - 0.244918).abs() < 1e-6);
        let three = [0.4, -1.0, 2.0];
        let total = rate_y(&three, &[0.0; 3], &[2.0; 3]);
        let parts: f64 = three.iter().map(|&v| rate_y(&[v], &[0.0], &[2.0])).sum();
        assert!((total - parts).abs() < 1e-12);
    }

    #[test]
    fn factorized_prior_is_a_distribution() {
        let (store, net) = net(3, 4);
        let cdf = net.prior().snapshot(&store);
        for c in 0..3 {
            let pmf = channel_pmf(&cdf, c, -20, 20);
            assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(pmf.iter().all(|&p| (0.0..=1.0).contains(&p)));
            // logits increase with t
            assert!(cdf.logit(c, -1.0) < cdf.logit(c, 0.0) && cdf.logit(c, 0.0) < cdf.logit(c, 1.0));
        }
    }

    #[test]
    fn prior_gradients() {
        let (store, net) = net(2, 6);
        let z = Tensor::from_vec([1, 2, 2, 2], vec![0.3, -1.7, 2.2, 0.0, -0.6, 1.1, 3.4, -2.8]).unwrap();
        let err = check_input_gradient(&store, &z, 1e-5, |g, v| {
            let b = net.prior().bits(g, v);
            Ok(g.sum(&b))
        })
        .unwrap();
        assert!(err < 1e-4, "input {err}");
        for &id in &net.prior().params {
            let n = store.value(id).len();
            let err = check_param_gradient(&store, id, &(0..n).collect::<Vec<_>>(), 1e-5, |g| {
                let zv = g.constant(z.clone());
                let b = net.prior().bits(g, &zv);
                Ok(g.sum(&b))
            })
            .unwrap();
            assert!(err < 1e-4, "{}: {err}", store.name(id));
        }
    }

    #[test]
    fn transform_gradients_tiny() {
        let (store, net) = net(8, 8);
        let x = random([1, 2, 32, 32], 12);
        let err = check_input_gradient(&store, &x, 1e-5, |g, v| {
            let y = net.analysis(g, v)?;
            let y2 = g.mul(&y, &y)?;
            Ok(g.sum(&y2))
        })
        .unwrap();
        assert!(err < 1e-4, "analysis {err}");
        let y = random([1, 8, 2, 2], 13);
        let err = check_input_gradient(&store, &y, 1e-5, |g, v| {
            let x = net.synthesis(g, v)?;
            let x2 = g.mul(&x, &x)?;
            Ok(g.sum(&x2))
        })
        .unwrap();
        assert!(err < 1e-4, "synthesis {err}");
    }

    #[test]
    fn end_to_end_rate_distortion_gradient() {
        let (store, net) = net(4, 10);
        let x = random([1, 2, 64, 64], 14);
        let loss = |g: &mut Graph<'_, f64>, v: &Var<f64>| -> Result<Var<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let pass = net.forward(g, v, &mut Quantizer::Noise(&mut rng))?;
            let (yb, zb) = net.rates(g, &pass)?;
            let d = g.sub(&pass.x_tilde, v)?;
            let d2 = g.mul(&d, &d)?;
            let parts = [g.sum(&yb), g.sum(&zb), g.sum(&d2)];
            let a = g.add(&parts[0], &parts[1])?;
            g.add(&a, &parts[2])
        };
        let id = store.find("lossy.analysis1.block.conv1.weight").unwrap();
        let err = check_param_gradient(&store, id, &[0, 17, 100, 143], 1e-5, |g| {
            let v = g.constant(x.clone());
            loss(g, &v)
        })
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
