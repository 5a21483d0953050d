//! Residual modelling: integer residual against the lossy reconstruction, the
//! pseudo-residual from the second lossy pass, and the network that turns
//! both into per-pixel mixture parameters.

use rand::Rng;

use crate::bitsplit::SplitPlanes;
use crate::error::{Error, Result};
use crate::likelihood::{MixtureComponent, MixtureKind, MAX_COMPONENTS, SCALE_FLOOR};
use crate::nn::layers::{res_stack, run_stack, AttentionBlock, Conv2d, FusionKind, ResBlock, Upsample};
use crate::nn::{Graph, ParamBuilder, Tensor, Var};
use crate::scalar::{lit, Scalar};

/// Number of image channels (MSB and LSB planes).
pub const PLANES: usize = 2;

/// Integer residual `r = x - p` with `p = clamp(round(x̃ · level), 0, level)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualPlane {
    pub width: usize,
    pub height: usize,
    /// Channel-major: all MSB residuals, then all LSB residuals.
    pub values: Vec<i32>,
    pub bounds: [(i32, i32); PLANES],
}

impl ResidualPlane {
    pub fn channel(&self, c: usize) -> &[i32] {
        let n = self.width * self.height;
        &self.values[c * n..(c + 1) * n]
    }
}

/// Integer prediction of one plane value from the normalized reconstruction.
#[inline]
pub fn predict(x_tilde: f32, level: u32) -> i64 {
    let v = (f64::from(x_tilde) * f64::from(level)).round();
    (v.max(0.0).min(f64::from(level))) as i64
}

/// `x_tilde` is the normalized `[1, 2, Hp, Wp]` reconstruction; only the
/// top-left `width x height` window is used.
pub fn compute_residual(planes: &SplitPlanes, x_tilde: &Tensor<f32>) -> Result<ResidualPlane> {
    let (w, h) = (planes.width(), planes.height());
    if x_tilde.channels() != PLANES || x_tilde.height() < h || x_tilde.width() < w {
        return Err(Error::shape(format!(
            "reconstruction {:?} does not cover a {w}x{h} map",
            x_tilde.shape()
        )));
    }
    let levels = planes.levels();
    let mut values = Vec::with_capacity(PLANES * w * h);
    let mut bounds = [(i32::MAX, i32::MIN); PLANES];
    for c in 0..PLANES {
        let src = planes.plane(c);
        for row in 0..h {
            for col in 0..w {
                let p = predict(x_tilde.at(0, c, row, col), levels[c]);
                let r = (i64::from(src[row * w + col]) - p) as i32;
                bounds[c].0 = bounds[c].0.min(r);
                bounds[c].1 = bounds[c].1.max(r);
                values.push(r);
            }
        }
    }
    Ok(ResidualPlane {
        width: w,
        height: h,
        values,
        bounds,
    })
}

/// Inverse of [`compute_residual`]: plane values from predictions and residuals.
pub fn reconstruct_planes(
    residual: &ResidualPlane,
    x_tilde: &Tensor<f32>,
    levels: [u32; PLANES],
) -> Result<[Vec<u32>; PLANES]> {
    let (w, h) = (residual.width, residual.height);
    let mut out: [Vec<u32>; PLANES] = Default::default();
    for (c, plane) in out.iter_mut().enumerate() {
        let r = residual.channel(c);
        plane.reserve(w * h);
        for row in 0..h {
            for col in 0..w {
                let v = predict(x_tilde.at(0, c, row, col), levels[c]) + i64::from(r[row * w + col]);
                if v < 0 || v > i64::from(u32::MAX) {
                    return Err(Error::Decode(format!("reconstructed plane value {v} out of range")));
                }
                plane.push(v as u32);
            }
        }
    }
    Ok(out)
}

/// Raw outputs of the three parameter heads, each `[n, 2K, H, W]` with
/// channel `c * K + k` holding component `k` of plane `c`. Locations and
/// log-scales are already in residual units.
pub struct LmmRaw<T: Scalar> {
    pub logits: Var<T>,
    pub loc: Var<T>,
    pub log_scale: Var<T>,
}

struct Head {
    blocks: Vec<ResBlock>,
    out: Conv2d,
}

enum Fusion {
    Gated {
        gate: Conv2d,
        additive: Conv2d,
        blocks: Vec<ResBlock>,
    },
    Concat {
        reduce: Conv2d,
        blocks: Vec<ResBlock>,
    },
}

struct LossyPre {
    stem: Conv2d,
    enc0: ResBlock,
    down1: Conv2d,
    enc1: ResBlock,
    down2: Conv2d,
    enc2: ResBlock,
    up2: Upsample,
    reduce1: Conv2d,
    dec1: ResBlock,
    up1: Upsample,
    reduce0: Conv2d,
    dec0: ResBlock,
}

pub struct ResidualNet {
    channels: usize,
    components: usize,
    pseudo_stem: Conv2d,
    pseudo_blocks: Vec<ResBlock>,
    pseudo_attention: AttentionBlock,
    lossy_pre: LossyPre,
    fusion: Fusion,
    heads: [Head; 3],
}

impl ResidualNet {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        channels: usize,
        components: usize,
        fusion: FusionKind,
    ) -> Self {
        let m = channels;
        b.scope("lossless", |b| {
            let pseudo_stem = Conv2d::new(b, "pseudo_stem", PLANES, m, 3, 1);
            let pseudo_blocks = res_stack(b, "pseudo_blocks", m, 4);
            let pseudo_attention = AttentionBlock::new(b, "pseudo_att", m);
            let lossy_pre = b.scope("lossy_pre", |b| LossyPre {
                stem: Conv2d::new(b, "stem", PLANES, m, 3, 1),
                enc0: ResBlock::new(b, "enc0", m),
                down1: Conv2d::new(b, "down1", m, m, 3, 2),
                enc1: ResBlock::new(b, "enc1", m),
                down2: Conv2d::new(b, "down2", m, m, 3, 2),
                enc2: ResBlock::new(b, "enc2", m),
                up2: Upsample::new(b, "up2", m, m),
                reduce1: Conv2d::new(b, "reduce1", 2 * m, m, 3, 1),
                dec1: ResBlock::new(b, "dec1", m),
                up1: Upsample::new(b, "up1", m, m),
                reduce0: Conv2d::new(b, "reduce0", 2 * m, m, 3, 1),
                dec0: ResBlock::new(b, "dec0", m),
            });
            let fusion = b.scope("fusion", |b| match fusion {
                FusionKind::Gated => Fusion::Gated {
                    gate: Conv2d::new(b, "gate", m, m, 1, 1),
                    additive: Conv2d::new(b, "additive", m, m, 3, 1),
                    blocks: res_stack(b, "blocks", m, 2),
                },
                FusionKind::Concat => Fusion::Concat {
                    reduce: Conv2d::new(b, "reduce", 2 * m, m, 3, 1),
                    blocks: res_stack(b, "blocks", m, 2),
                },
            });
            let head = |b: &mut ParamBuilder<'_, T, R>, name: &str| {
                b.scope(name, |b| Head {
                    blocks: res_stack(b, "blocks", m, 5),
                    out: Conv2d::new(b, "out", m, PLANES * components, 3, 1),
                })
            };
            let heads = [head(b, "weights"), head(b, "loc"), head(b, "scale")];
            ResidualNet {
                channels: m,
                components,
                pseudo_stem,
                pseudo_blocks,
                pseudo_attention,
                lossy_pre,
                fusion,
                heads,
            }
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn preprocess_pseudo<T: Scalar>(&self, g: &mut Graph<'_, T>, r_est: &Var<T>) -> Result<Var<T>> {
        let h = self.pseudo_stem.forward(g, r_est)?;
        let h = run_stack(&self.pseudo_blocks, g, &h)?;
        self.pseudo_attention.forward(g, &h)
    }

    pub fn preprocess_lossy<T: Scalar>(&self, g: &mut Graph<'_, T>, x_tilde: &Var<T>) -> Result<Var<T>> {
        let [_, _, h, w] = x_tilde.shape();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("lossy pre-process input {h}x{w} is not a multiple of 4")));
        }
        let p = &self.lossy_pre;
        let e0 = p.stem.forward(g, x_tilde)?;
        let e0 = p.enc0.forward(g, &e0)?;
        let e1 = p.down1.forward(g, &e0)?;
        let e1 = g.leaky_relu(&e1);
        let e1 = p.enc1.forward(g, &e1)?;
        let e2 = p.down2.forward(g, &e1)?;
        let e2 = g.leaky_relu(&e2);
        let e2 = p.enc2.forward(g, &e2)?;
        let u1 = p.up2.forward(g, &e2)?;
        let u1 = g.leaky_relu(&u1);
        let d1 = g.concat(&u1, &e1)?;
        let d1 = p.reduce1.forward(g, &d1)?;
        let d1 = p.dec1.forward(g, &d1)?;
        let u0 = p.up1.forward(g, &d1)?;
        let u0 = g.leaky_relu(&u0);
        let d0 = g.concat(&u0, &e0)?;
        let d0 = p.reduce0.forward(g, &d0)?;
        p.dec0.forward(g, &d0)
    }

    pub fn fuse<T: Scalar>(&self, g: &mut Graph<'_, T>, f_pseudo: &Var<T>, f_lossy: &Var<T>) -> Result<Var<T>> {
        match &self.fusion {
            Fusion::Gated {
                gate,
                additive,
                blocks,
            } => {
                let gv = gate.forward(g, f_lossy)?;
                let gv = g.sigmoid(&gv);
                let gated = g.mul(f_pseudo, &gv)?;
                let add = additive.forward(g, f_lossy)?;
                let h = g.add(&gated, &add)?;
                run_stack(blocks, g, &h)
            }
            Fusion::Concat { reduce, blocks } => {
                let h = g.concat(f_pseudo, f_lossy)?;
                let h = reduce.forward(g, &h)?;
                run_stack(blocks, g, &h)
            }
        }
    }

    /// Mixture parameters from the normalized reconstruction and the
    /// normalized pseudo-residual. `levels` converts location and scale from
    /// normalized to residual units. Counts as one lossless network call.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x_tilde: &Var<T>,
        r_est: &Var<T>,
        levels: [u32; PLANES],
    ) -> Result<LmmRaw<T>> {
        g.passes.lossless += 1;
        let fp = self.preprocess_pseudo(g, r_est)?;
        let fl = self.preprocess_lossy(g, x_tilde)?;
        let fused = self.fuse(g, &fp, &fl)?;
        let mut outs = Vec::with_capacity(3);
        for head in &self.heads {
            let h = run_stack(&head.blocks, g, &fused)?;
            outs.push(head.out.forward(g, &h)?);
        }
        let log_scale = outs.pop().unwrap();
        let loc = outs.pop().unwrap();
        let logits = outs.pop().unwrap();

        let k = self.components;
        let scales: Vec<T> = (0..PLANES * k).map(|i| T::from_u32(levels[i / k]).unwrap()).collect();
        let loc = g.channel_scale(&loc, &scales)?;
        let [n, c, h, w] = log_scale.shape();
        let mut offset = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let v: T = lit(f64::from(levels[ch / k]).ln());
                let start = offset.index(b, ch, 0, 0);
                offset.data_mut()[start..start + h * w].iter_mut().for_each(|o| *o = v);
            }
        }
        let offset = g.constant(offset);
        let log_scale = g.add(&log_scale, &offset)?;
        Ok(LmmRaw { logits, loc, log_scale })
    }
}

/// Per-pixel, per-plane mixture parameters in residual units, recomputed on
/// both sides of the codec and never serialized.
#[derive(Clone, Debug, PartialEq)]
pub struct LmmField {
    pub kind: MixtureKind,
    pub components: usize,
    pub width: usize,
    pub height: usize,
    /// `[plane][pixel][k]` triples.
    params: Vec<MixtureComponent<f64>>,
}

impl LmmField {
    /// Softmax weights, locations and floored scales from raw head outputs,
    /// cropped to `width x height`.
    pub fn from_raw(
        kind: MixtureKind,
        components: usize,
        logits: &Tensor<f32>,
        loc: &Tensor<f32>,
        log_scale: &Tensor<f32>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let k = components;
        if k == 0 || k > MAX_COMPONENTS {
            return Err(Error::argument(format!("{k} mixture components")));
        }
        let [_, c, h, w] = logits.shape();
        if c != PLANES * k || h < height || w < width || loc.shape() != logits.shape() || log_scale.shape() != logits.shape() {
            return Err(Error::shape(format!("mixture head outputs {:?}", logits.shape())));
        }
        let mut params = Vec::with_capacity(PLANES * width * height * k);
        let mut raw = [0.0f64; MAX_COMPONENTS];
        for plane in 0..PLANES {
            for row in 0..height {
                for col in 0..width {
                    let mut max = f64::NEG_INFINITY;
                    for (j, r) in raw.iter_mut().enumerate().take(k) {
                        *r = f64::from(logits.at(0, plane * k + j, row, col));
                        max = max.max(*r);
                    }
                    let mut total = 0.0;
                    for r in raw.iter_mut().take(k) {
                        *r = libm::exp(*r - max);
                        total += *r;
                    }
                    for (j, r) in raw.iter().enumerate().take(k) {
                        let ch = plane * k + j;
                        params.push(MixtureComponent {
                            weight: r / total,
                            loc: f64::from(loc.at(0, ch, row, col)),
                            scale: libm::exp(f64::from(log_scale.at(0, ch, row, col))).max(SCALE_FLOOR),
                        });
                    }
                }
            }
        }
        Ok(LmmField {
            kind,
            components: k,
            width,
            height,
            params,
        })
    }

    pub fn pixel(&self, plane: usize, index: usize) -> &[MixtureComponent<f64>] {
        let k = self.components;
        let start = (plane * self.width * self.height + index) * k;
        &self.params[start..start + k]
    }
}

/// Folded mixture pmf over buckets of `step` consecutive symbols starting at
/// `lo`: bucket `j` covers `lo + j*step ..= lo + (j+1)*step - 1`, the first
/// bucket also takes all mass below and the last all mass above.
///
/// CDF tails at successive bucket edges form geometric sequences, so each
/// component costs two exponentials plus one multiply per bucket. Values
/// are computed outward from the location so underflow only ever hits
/// masses that are genuinely negligible.
pub fn mixture_bucket_pmf(
    kind: MixtureKind,
    comps: &[MixtureComponent<f64>],
    lo: i64,
    step: i64,
    buckets: usize,
    out: &mut Vec<f64>,
    tails: &mut Vec<f64>,
) {
    out.clear();
    out.resize(buckets, 0.0);
    if buckets == 1 {
        out[0] = 1.0;
        return;
    }
    let edges = buckets - 1;
    let transform = |e: f64| match kind {
        MixtureKind::Laplace => 0.5 * e,
        MixtureKind::Logistic => e / (1.0 + e),
    };
    let edge = |j: usize| (lo + (j as i64 + 1) * step) as f64 - 0.5;
    for c in comps {
        if c.weight == 0.0 {
            continue;
        }
        // index of the first edge at or above the location
        let mut split = (((c.loc + 0.5 - lo as f64) / step as f64).ceil() - 1.0).clamp(0.0, edges as f64) as usize;
        while split > 0 && edge(split - 1) >= c.loc {
            split -= 1;
        }
        while split < edges && edge(split) < c.loc {
            split += 1;
        }
        let ratio = libm::exp(-(step as f64) / c.scale);
        // tails[j]: CDF below edge j for j < split, upper tail above it otherwise
        tails.clear();
        tails.resize(edges, 0.0);
        if split > 0 {
            let mut e = libm::exp((edge(split - 1) - c.loc) / c.scale);
            for j in (0..split).rev() {
                tails[j] = transform(e);
                e *= ratio;
            }
        }
        if split < edges {
            let mut e = libm::exp(-(edge(split) - c.loc) / c.scale);
            for t in tails.iter_mut().skip(split) {
                *t = transform(e);
                e *= ratio;
            }
        }
        for (i, o) in out.iter_mut().enumerate() {
            // bucket i spans edges i-1 .. i
            let below = i < split;
            let above = i > split;
            let mass = if below {
                tails[i] - if i == 0 { 0.0 } else { tails[i - 1] }
            } else if above {
                tails[i - 1] - if i == edges { 0.0 } else { tails[i] }
            } else {
                let lower = if i == 0 { 0.0 } else { tails[i - 1] };
                let upper = if i == edges { 0.0 } else { tails[i] };
                1.0 - lower - upper
            };
            *o += c.weight * mass.max(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::{mixture_folded_pmf, lmm_pmf};
    use crate::nn::gradcheck::check_input_gradient;
    use crate::nn::ParamStore;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net(fusion: FusionKind) -> (ParamStore<f64>, ResidualNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = ResidualNet::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, 3, fusion);
        (store, net)
    }

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn planes(msb: Vec<u32>, lsb: Vec<u32>, w: usize, h: usize) -> SplitPlanes {
        SplitPlanes::from_parts(w, h, 16, 1000, 256, msb, lsb).unwrap()
    }

    #[test]
    fn residual_examples() {
        // x = 100 in the LSB plane, x̃ denormalizes to 97.3
        let p = planes(vec![0], vec![100], 1, 1);
        let xt = Tensor::from_vec([1, 2, 1, 1], vec![0.0, 97.3 / 255.0]).unwrap();
        let r = compute_residual(&p, &xt).unwrap();
        assert_eq!(r.channel(1), &[3]);

        let p = planes(vec![3, 7], vec![40, 250], 2, 1);
        let xt = Tensor::from_vec([1, 2, 1, 2], vec![3.0 / 255.0, 7.0 / 255.0, 40.0 / 255.0, 250.0 / 255.0]).unwrap();
        let r = compute_residual(&p, &xt).unwrap();
        assert!(r.values.iter().all(|&v| v == 0));
        assert_eq!(r.bounds, [(0, 0), (0, 0)]);
    }

    #[test]
    fn reconstruction_is_exact_over_small_planes() {
        // every value of a small alphabet against a sweep of reconstructions,
        // including ones far outside the valid range
        let values: Vec<u32> = (0..=255).collect();
        let n = values.len();
        for shift in [-3.7f32, -0.5, 0.0, 0.49, 0.5, 1.5, 300.0] {
            let p = planes(vec![0; n], values.clone(), n, 1);
            let xt: Vec<f32> = (0..2 * n)
                .map(|i| ((i % n) as f32 + shift * (i as f32).sin()) / 255.0)
                .collect();
            let xt = Tensor::from_vec([1, 2, 1, n], xt).unwrap();
            let r = compute_residual(&p, &xt).unwrap();
            let back = reconstruct_planes(&r, &xt, p.levels()).unwrap();
            assert_eq!(back[0], p.msb());
            assert_eq!(back[1], p.lsb());
            for (c, (lo, hi)) in r.bounds.iter().enumerate() {
                assert!(r.channel(c).iter().all(|v| (lo..=hi).contains(&v)));
            }
        }
    }

    #[test]
    fn shapes_and_zero_weight_field() {
        let (mut store, net) = net(FusionKind::Gated);
        let mut g = Graph::inference(&store);
        let xt = g.constant(random([1, 2, 16, 12], 1));
        let re = g.constant(random([1, 2, 16, 12], 2));
        let fp = net.preprocess_pseudo(&mut g, &re).unwrap();
        assert_eq!(fp.shape(), [1, 4, 16, 12]);
        let fl = net.preprocess_lossy(&mut g, &xt).unwrap();
        assert_eq!(fl.shape(), [1, 4, 16, 12]);
        let out = net.forward(&mut g, &xt, &re, [1, 1]).unwrap();
        assert_eq!(out.logits.shape(), [1, 6, 16, 12]);
        assert_eq!(g.passes.lossless, 1);

        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::inference(&store);
        let xt = g.constant(random([1, 2, 8, 8], 1));
        let re = g.constant(random([1, 2, 8, 8], 2));
        let raw = net.forward(&mut g, &xt, &re, [1, 1]).unwrap();
        let cast = |v: &Var<f64>| v.value().cast::<f32>();
        let field = LmmField::from_raw(
            MixtureKind::Laplace,
            3,
            &cast(&raw.logits),
            &cast(&raw.loc),
            &cast(&raw.log_scale),
            8,
            8,
        )
        .unwrap();
        for c in field.pixel(1, 5) {
            assert!((c.weight - 1.0 / 3.0).abs() < 1e-12);
            assert_eq!(c.loc, 0.0);
            assert_eq!(c.scale, 1.0);
        }
    }

    #[test]
    fn lossy_pre_rejects_odd_sizes() {
        let (store, net) = net(FusionKind::Gated);
        let mut g = Graph::inference(&store);
        let xt = g.constant(random([1, 2, 10, 12], 1));
        assert!(net.preprocess_lossy(&mut g, &xt).is_err());
    }

    #[test]
    fn fusion_limits() {
        let (mut store, net) = net(FusionKind::Gated);
        let fp = random([1, 4, 6, 6], 3);
        let fl = random([1, 4, 6, 6], 4);
        let set = |store: &mut ParamStore<f64>, name: &str, v: f64| {
            let id = store.find(name).unwrap();
            store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = v);
        };
        // zero the fused residual blocks so the output is the block input
        for i in 0..2 {
            set(&mut store, &format!("lossless.fusion.blocks.{i}.conv2.weight"), 0.0);
            set(&mut store, &format!("lossless.fusion.blocks.{i}.conv2.bias"), 0.0);
        }
        set(&mut store, "lossless.fusion.gate.weight", 0.0);
        set(&mut store, "lossless.fusion.gate.bias", -800.0);
        let mut g = Graph::inference(&store);
        let (a, b) = (g.constant(fp.clone()), g.constant(fl.clone()));
        let closed = net.fuse(&mut g, &a, &b).unwrap();
        let additive = {
            let add = match &net.fusion {
                Fusion::Gated { additive, .. } => additive,
                _ => unreachable!(),
            };
            add.forward(&mut g, &b).unwrap()
        };
        assert!(closed.value().zip_map(additive.value(), |x, y| x - y).max_abs() < 1e-12);

        set(&mut store, "lossless.fusion.gate.bias", 800.0);
        set(&mut store, "lossless.fusion.additive.weight", 0.0);
        let mut g = Graph::inference(&store);
        let (a, b) = (g.constant(fp.clone()), g.constant(fl));
        let open = net.fuse(&mut g, &a, &b).unwrap();
        assert!(open.value().zip_map(&fp, |x, y| x - y).max_abs() < 1e-12);
    }

    #[test]
    fn network_gradients() {
        for fusion in [FusionKind::Gated, FusionKind::Concat] {
            let (store, net) = net(fusion);
            let xt = random([1, 2, 8, 8], 5);
            let re = random([1, 2, 8, 8], 6);
            let r = random([1, 2, 8, 8], 7).map(|v| (v * 6.0).round());
            let err = check_input_gradient(&store, &re, 1e-5, |g, v| {
                let x = g.constant(xt.clone());
                let out = net.forward(g, &x, v, [3, 7])?;
                let rv = g.constant(r.clone());
                let bits = g.mixture_bits(&rv, &out.logits, &out.loc, &out.log_scale, 3, MixtureKind::Laplace)?;
                Ok(g.sum(&bits))
            })
            .unwrap();
            assert!(err < 1e-4, "{fusion:?} pseudo path {err}");
            let err = check_input_gradient(&store, &xt, 1e-5, |g, v| {
                let f = net.preprocess_lossy(g, v)?;
                let f2 = g.mul(&f, &f)?;
                Ok(g.sum(&f2))
            })
            .unwrap();
            assert!(err < 1e-4, "{fusion:?} lossy pre {err}");
        }
    }

    proptest! {
        #[test]
        fn bucket_pmf_matches_direct(
            seed in any::<u64>(),
            logistic in any::<bool>(),
            lo in -300i64..0,
            span in 0i64..600,
        ) {
            let kind = if logistic { MixtureKind::Logistic } else { MixtureKind::Laplace };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let comps: Vec<MixtureComponent<f64>> = raw
                .iter()
                .map(|w| MixtureComponent {
                    weight: w / total,
                    loc: rng.gen_range(-400.0..400.0),
                    scale: 10f64.powf(rng.gen_range(-6.0..3.0)),
                })
                .collect();
            let hi = lo + span;
            let direct = mixture_folded_pmf(kind, lo, hi, &comps);
            let (mut fast, mut scratch) = (Vec::new(), Vec::new());
            mixture_bucket_pmf(kind, &comps, lo, 1, direct.len(), &mut fast, &mut scratch);
            for (a, b) in direct.iter().zip(&fast) {
                prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
            prop_assert!((fast.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            // interior symbols agree with the unfolded pmf
            for s in (lo + 1)..hi {
                let p = lmm_pmf(kind, s as f64, &comps);
                prop_assert!((p - fast[(s - lo) as usize]).abs() < 1e-9);
            }
            // coarse buckets are sums of fine ones
            let step = 7;
            let buckets = (direct.len() + step - 1) / step;
            let mut coarse = Vec::new();
            mixture_bucket_pmf(kind, &comps, lo, step as i64, buckets, &mut coarse, &mut scratch);
            for (j, c) in coarse.iter().enumerate() {
                let s: f64 = fast[j * step..((j + 1) * step).min(fast.len())].iter().sum();
                prop_assert!((c - s).abs() < 1e-9);
            }
        }
    }
}
