//! Lossless compression of a depth map into an `.hpdc` stream and back.
//!
//! Both directions run the same decoder-side pipeline, ẑ → hyper-synthesis →
//! ŷ → synthesis → second lossy pass → residual model, so every coding table
//! is rebuilt bit-identically before the residual substream is touched. The
//! network runs a fixed number of times per image; nothing is conditioned on
//! previously decoded residuals.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::bitsplit::{channel_levels, merge, pack_normalized, split, SplitPlanes};
use crate::depth_io::{DepthMap, MAX_BIT_DEPTH, MIN_BIT_DEPTH};
use crate::entropy::stream::DIGEST_LEN;
use crate::entropy::{build_cdf_with, CdfScratch, CodecStream, QuantizedCdf, RangeDecoder, RangeEncoder, StreamHeader};
use crate::error::{Error, Result};
use crate::likelihood::{gaussian_interval_mass, PROB_FLOOR, SCALE_FLOOR};
use crate::lossy::{channel_bucket_pmf, FactorizedCdf, Quantizer, PAD_MULTIPLE};
use crate::model::Model32;
use crate::nn::{Graph, PassCounter, Tensor};
use crate::residual::{compute_residual, mixture_bucket_pmf, reconstruct_planes, LmmField, ResidualPlane, PLANES};

/// Largest coding table; wider alphabets are split into a table-coded
/// bucket and raw low bits.
pub const MAX_TABLE: usize = 4096;
/// Latent magnitudes beyond this are rejected rather than coded.
const LATENT_LIMIT: f32 = (1 << 30) as f32;

/// Sizes and estimates from one compress or decompress call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodingReport {
    pub width: usize,
    pub height: usize,
    pub z_bits: u64,
    pub y_bits: u64,
    pub r_bits: u64,
    pub total_bits: u64,
    /// Ideal residual code length under the model (encoder only).
    pub r_estimate_bits: f64,
    pub passes: PassCounter,
}

impl CodingReport {
    pub fn pixels(&self) -> f64 {
        (self.width * self.height) as f64
    }

    pub fn bpp_y(&self) -> f64 {
        self.y_bits as f64 / self.pixels()
    }

    pub fn bpp_z(&self) -> f64 {
        self.z_bits as f64 / self.pixels()
    }

    pub fn bpp_residual(&self) -> f64 {
        self.r_bits as f64 / self.pixels()
    }

    pub fn bpp_overall(&self) -> f64 {
        self.total_bits as f64 / self.pixels()
    }
}

/// Integer alphabet `lo..=hi`, coded as `(v - lo) >> shift` under a table
/// plus `shift` raw bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Alphabet {
    lo: i64,
    hi: i64,
    shift: u32,
    buckets: usize,
}

impl Alphabet {
    fn new(lo: i64, hi: i64) -> Self {
        debug_assert!(lo <= hi);
        let size = (hi - lo) as u64 + 1;
        let mut shift = 0;
        while (size - 1) >> shift >= MAX_TABLE as u64 {
            shift += 1;
        }
        Alphabet {
            lo,
            hi,
            shift,
            buckets: (((size - 1) >> shift) + 1) as usize,
        }
    }

    fn step(&self) -> i64 {
        1 << self.shift
    }

    fn bucket(&self, v: i64) -> usize {
        ((v - self.lo) >> self.shift) as usize
    }

    fn encode(&self, enc: &mut RangeEncoder, cdf: &QuantizedCdf, v: i64) {
        let off = (v - self.lo) as u64;
        enc.encode(cdf, (off >> self.shift) as usize);
        let mut left = self.shift;
        while left > 0 {
            let n = left.min(16);
            left -= n;
            enc.encode_bits(((off >> left) & ((1 << n) - 1)) as u32, n);
        }
    }

    fn decode(&self, dec: &mut RangeDecoder<'_>, cdf: &QuantizedCdf) -> Result<i64> {
        let mut off = dec.decode(cdf)? as u64;
        let mut left = self.shift;
        while left > 0 {
            let n = left.min(16);
            left -= n;
            off = (off << n) | u64::from(dec.decode_bits(n)?);
        }
        let v = self.lo + off as i64;
        if v > self.hi {
            return Err(Error::Decode(format!("symbol {v} above alphabet bound {}", self.hi)));
        }
        Ok(v)
    }

    /// Model code length of `v` given the bucket pmf.
    fn cost(&self, pmf: &[f64], v: i64) -> f64 {
        -pmf[self.bucket(v)].max(PROB_FLOOR).log2() + f64::from(self.shift)
    }
}

/// Tables for a run of symbols, built in parallel and in memory-bounded
/// chunks, then consumed in order by `emit`.
fn for_each_table<P, E>(count: usize, buckets: usize, pmf_of: P, mut emit: E) -> Result<()>
where
    P: Fn(usize, &mut Vec<f64>, &mut Vec<f64>) + Sync,
    E: FnMut(usize, &QuantizedCdf, &[f64]) -> Result<()>,
{
    let chunk = ((1usize << 22) / (buckets + 1)).clamp(64, 16384);
    let mut start = 0;
    while start < count {
        let end = (start + chunk).min(count);
        let tables: Vec<Result<(QuantizedCdf, Vec<f64>)>> = (start..end)
            .into_par_iter()
            .map_init(
                || (Vec::new(), CdfScratch::default()),
                |(tails, scratch), i| {
                    let mut pmf = Vec::with_capacity(buckets);
                    pmf_of(i, &mut pmf, tails);
                    let cdf = build_cdf_with(&pmf, scratch)?;
                    Ok((cdf, pmf))
                },
            )
            .collect();
        for (i, t) in (start..end).zip(tables) {
            let (cdf, pmf) = t?;
            emit(i, &cdf, &pmf)?;
        }
        start = end;
    }
    Ok(())
}

fn gaussian_bucket_pmf(mean: f64, scale: f64, a: &Alphabet, out: &mut Vec<f64>) {
    out.clear();
    let edge = |j: usize| (a.lo + (j as i64) * a.step()) as f64 - 0.5;
    for j in 0..a.buckets {
        let lo = if j == 0 { f64::NEG_INFINITY } else { edge(j) };
        let hi = if j + 1 == a.buckets { f64::INFINITY } else { edge(j + 1) };
        out.push(gaussian_interval_mass(lo, hi, mean, scale).max(0.0));
    }
}

fn to_symbols(t: &Tensor<f32>, what: &str) -> Result<Vec<i32>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.is_finite() && v.abs() < LATENT_LIMIT {
                Ok(v.round() as i32)
            } else {
                Err(Error::Data(format!("{what} value {v} cannot be coded")))
            }
        })
        .collect()
}

fn from_symbols(shape: [usize; 4], s: &[i32]) -> Result<Tensor<f32>> {
    Tensor::from_vec(shape, s.iter().map(|&v| v as f32).collect())
}

fn bounds(s: &[i32]) -> (i32, i32) {
    s.iter().fold((i32::MAX, i32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn padded(n: usize) -> usize {
    n.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE
}

fn digest(map: &DepthMap) -> [u8; DIGEST_LEN] {
    let mut h = Sha256::new();
    h.update((map.width() as u32).to_le_bytes());
    h.update((map.height() as u32).to_le_bytes());
    h.update([map.bit_depth()]);
    h.update(map.precision().to_le_bytes());
    for &v in map.data() {
        h.update(v.to_le_bytes());
    }
    let full: [u8; 32] = h.finalize().into();
    full[..DIGEST_LEN].try_into().unwrap()
}

/// Decoder-side state shared by both directions.
struct Decoded {
    x_tilde: Tensor<f32>,
    field: LmmField,
}

/// ẑ → (mean, scale) of ŷ in coding precision.
fn y_prior(model: &Model32, g: &mut Graph<'_, f32>, z_hat: Tensor<f32>) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = g.constant(z_hat);
    let (mean, log_scale) = model.lossy.hyper_synthesis(g, &z)?;
    let mean = mean.value().data().iter().map(|&m| f64::from(m)).collect();
    let scale = log_scale
        .value()
        .data()
        .iter()
        .map(|&s| libm::exp(f64::from(s)).max(SCALE_FLOOR))
        .collect();
    Ok((mean, scale))
}

/// ŷ → x̃ → x̃_sim → mixture field over the unpadded window.
fn reconstruct(
    model: &Model32,
    g: &mut Graph<'_, f32>,
    y_hat: Tensor<f32>,
    levels: [u32; PLANES],
    width: usize,
    height: usize,
) -> Result<Decoded> {
    let y = g.constant(y_hat);
    let x_tilde = model.lossy.synthesis(g, &y)?;
    let second = model.lossy.forward(g, &x_tilde, &mut Quantizer::Round)?;
    let r_est = g.sub(&x_tilde, &second.x_tilde)?;
    let raw = model.residual.forward(g, &x_tilde, &r_est, levels)?;
    let field = LmmField::from_raw(
        model.config.mixture,
        model.config.components,
        raw.logits.value(),
        raw.loc.value(),
        raw.log_scale.value(),
        width,
        height,
    )?;
    Ok(Decoded {
        x_tilde: x_tilde.into_tensor(),
        field,
    })
}

fn encode_z(symbols: &[i32], shape: [usize; 4], prior: &FactorizedCdf) -> Result<Vec<u8>> {
    let (lo, hi) = bounds(symbols);
    let a = Alphabet::new(lo.into(), hi.into());
    let plane = shape[2] * shape[3];
    let tables: Vec<QuantizedCdf> = (0..shape[1])
        .into_par_iter()
        .map_init(CdfScratch::default, |scratch, c| {
            build_cdf_with(&channel_bucket_pmf(prior, c, a.lo, a.step(), a.buckets), scratch)
        })
        .collect::<Result<_>>()?;
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        a.encode(&mut enc, &tables[(i / plane) % shape[1]], s.into());
    }
    Ok(with_bounds(lo, hi, enc.finish()))
}

fn decode_z(bytes: &[u8], shape: [usize; 4], prior: &FactorizedCdf) -> Result<Vec<i32>> {
    let (a, payload) = read_bounds(bytes)?;
    let plane = shape[2] * shape[3];
    let tables: Vec<QuantizedCdf> = (0..shape[1])
        .into_par_iter()
        .map_init(CdfScratch::default, |scratch, c| {
            build_cdf_with(&channel_bucket_pmf(prior, c, a.lo, a.step(), a.buckets), scratch)
        })
        .collect::<Result<_>>()?;
    let mut dec = RangeDecoder::new(payload)?;
    (0..shape.iter().product::<usize>())
        .map(|i| Ok(a.decode(&mut dec, &tables[(i / plane) % shape[1]])? as i32))
        .collect()
}

fn encode_y(symbols: &[i32], mean: &[f64], scale: &[f64]) -> Result<Vec<u8>> {
    let (lo, hi) = bounds(symbols);
    let a = Alphabet::new(lo.into(), hi.into());
    let mut enc = RangeEncoder::new();
    for_each_table(
        symbols.len(),
        a.buckets,
        |i, pmf, _| gaussian_bucket_pmf(mean[i], scale[i], &a, pmf),
        |i, cdf, _| {
            a.encode(&mut enc, cdf, symbols[i].into());
            Ok(())
        },
    )?;
    Ok(with_bounds(lo, hi, enc.finish()))
}

fn decode_y(bytes: &[u8], mean: &[f64], scale: &[f64]) -> Result<Vec<i32>> {
    let (a, payload) = read_bounds(bytes)?;
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(mean.len());
    for_each_table(
        mean.len(),
        a.buckets,
        |i, pmf, _| gaussian_bucket_pmf(mean[i], scale[i], &a, pmf),
        |_, cdf, _| {
            out.push(a.decode(&mut dec, cdf)? as i32);
            Ok(())
        },
    )?;
    Ok(out)
}

fn with_bounds(lo: i32, hi: i32, payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + payload.len());
    out.extend_from_slice(&lo.to_le_bytes());
    out.extend_from_slice(&hi.to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

fn read_bounds(bytes: &[u8]) -> Result<(Alphabet, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Decode("latent substream shorter than its bounds".into()));
    }
    let lo = i32::from_le_bytes(bytes[..4].try_into().unwrap());
    let hi = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if lo > hi {
        return Err(Error::Decode(format!("latent bounds {lo} > {hi}")));
    }
    Ok((Alphabet::new(lo.into(), hi.into()), &bytes[8..]))
}

/// Codes both residual planes; returns the bytes and the model code length.
fn encode_residual(residual: &ResidualPlane, field: &LmmField) -> Result<(Vec<u8>, f64)> {
    let mut enc = RangeEncoder::new();
    let mut estimate = 0.0;
    for c in 0..PLANES {
        let (lo, hi) = residual.bounds[c];
        let a = Alphabet::new(lo.into(), hi.into());
        let values = residual.channel(c);
        for_each_table(
            values.len(),
            a.buckets,
            |i, pmf, tails| {
                mixture_bucket_pmf(field.kind, field.pixel(c, i), a.lo, a.step(), a.buckets, pmf, tails)
            },
            |i, cdf, pmf| {
                let v = i64::from(values[i]);
                estimate += a.cost(pmf, v);
                a.encode(&mut enc, cdf, v);
                Ok(())
            },
        )?;
    }
    Ok((enc.finish(), estimate))
}

fn decode_residual(bytes: &[u8], bounds: [(i32, i32); PLANES], field: &LmmField) -> Result<ResidualPlane> {
    let mut dec = RangeDecoder::new(bytes)?;
    let n = field.width * field.height;
    let mut values = Vec::with_capacity(PLANES * n);
    for (c, &(lo, hi)) in bounds.iter().enumerate() {
        let a = Alphabet::new(lo.into(), hi.into());
        for_each_table(
            n,
            a.buckets,
            |i, pmf, tails| {
                mixture_bucket_pmf(field.kind, field.pixel(c, i), a.lo, a.step(), a.buckets, pmf, tails)
            },
            |_, cdf, _| {
                values.push(a.decode(&mut dec, cdf)? as i32);
                Ok(())
            },
        )?;
    }
    Ok(ResidualPlane {
        width: field.width,
        height: field.height,
        values,
        bounds,
    })
}

/// Compresses `map` with split divisor `divisor`.
pub fn compress(model: &Model32, map: &DepthMap, divisor: u32) -> Result<(Vec<u8>, CodingReport)> {
    let planes = split(map, divisor)?;
    let levels = planes.levels();
    let (w, h) = (map.width(), map.height());
    let (pw, ph) = (padded(w), padded(h));
    let x = pack_normalized::<f32>(&planes).pad_replicate(ph, pw)?;

    let mut g = Graph::inference(&model.store);
    let xv = g.constant(x);
    let y = model.lossy.analysis(&mut g, &xv)?;
    let z = model.lossy.hyper_analysis(&mut g, &y)?;
    let z_sym = to_symbols(z.value(), "hyper-latent")?;
    let y_sym = to_symbols(y.value(), "latent")?;
    let (z_shape, y_shape) = (z.shape(), y.shape());

    let (mean, scale) = y_prior(model, &mut g, from_symbols(z_shape, &z_sym)?)?;
    let decoded = reconstruct(model, &mut g, from_symbols(y_shape, &y_sym)?, levels, w, h)?;
    let residual = compute_residual(&planes, &decoded.x_tilde)?;

    let prior = model.lossy.prior().snapshot(&model.store);
    let z_bytes = encode_z(&z_sym, z_shape, &prior)?;
    let y_bytes = encode_y(&y_sym, &mean, &scale)?;
    let (r_bytes, r_estimate_bits) = encode_residual(&residual, &decoded.field)?;

    let stream = CodecStream {
        header: StreamHeader {
            width: w as u32,
            height: h as u32,
            bit_depth: map.bit_depth(),
            divisor,
            precision: map.precision(),
            checkpoint_hash: model.hash(),
            residual_bounds: residual.bounds,
            padded_width: pw as u32,
            padded_height: ph as u32,
        },
        z: z_bytes,
        y: y_bytes,
        r: r_bytes,
        digest: digest(map),
    };
    let bytes = stream.write();
    let report = CodingReport {
        width: w,
        height: h,
        z_bits: 8 * stream.z.len() as u64,
        y_bits: 8 * stream.y.len() as u64,
        r_bits: 8 * stream.r.len() as u64,
        total_bits: 8 * bytes.len() as u64,
        r_estimate_bits,
        passes: g.passes,
    };
    Ok((bytes, report))
}

pub fn decompress(model: &Model32, bytes: &[u8]) -> Result<(DepthMap, CodingReport)> {
    let stream = CodecStream::read(bytes)?;
    let hd = &stream.header;
    if hd.checkpoint_hash != model.hash() {
        return Err(Error::HashMismatch);
    }
    if !(MIN_BIT_DEPTH..=MAX_BIT_DEPTH).contains(&hd.bit_depth) || hd.divisor < 2 {
        return Err(Error::format(format!(
            "bit depth {} / divisor {} out of range",
            hd.bit_depth, hd.divisor
        )));
    }
    let (w, h) = (hd.width as usize, hd.height as usize);
    let (pw, ph) = (padded(w), padded(h));
    if (pw, ph) != (hd.padded_width as usize, hd.padded_height as usize) {
        return Err(Error::format(format!(
            "padded size {}x{} does not match {w}x{h}",
            hd.padded_width, hd.padded_height
        )));
    }
    let levels = channel_levels(hd.bit_depth, hd.divisor);
    let n = model.config.lossy_channels;
    let y_shape = [1, n, ph / 16, pw / 16];
    let z_shape = [1, n, ph / PAD_MULTIPLE, pw / PAD_MULTIPLE];

    let mut g = Graph::inference(&model.store);
    let prior = model.lossy.prior().snapshot(&model.store);
    let z_sym = decode_z(&stream.z, z_shape, &prior)?;
    let (mean, scale) = y_prior(model, &mut g, from_symbols(z_shape, &z_sym)?)?;
    let y_sym = decode_y(&stream.y, &mean, &scale)?;
    let decoded = reconstruct(model, &mut g, from_symbols(y_shape, &y_sym)?, levels, w, h)?;
    let residual = decode_residual(&stream.r, hd.residual_bounds, &decoded.field)?;
    let [msb, lsb] = reconstruct_planes(&residual, &decoded.x_tilde, levels)?;
    let planes = SplitPlanes::from_parts(w, h, hd.bit_depth, hd.precision, hd.divisor, msb, lsb)
        .map_err(|e| Error::Decode(e.to_string()))?;
    let map = merge(&planes).map_err(|e| Error::Decode(e.to_string()))?;
    if digest(&map) != stream.digest {
        return Err(Error::Verification("decoded map does not match the stream digest".into()));
    }
    let report = CodingReport {
        width: w,
        height: h,
        z_bits: 8 * stream.z.len() as u64,
        y_bits: 8 * stream.y.len() as u64,
        r_bits: 8 * stream.r.len() as u64,
        total_bits: 8 * bytes.len() as u64,
        r_estimate_bits: 0.0,
        passes: g.passes,
    };
    Ok((map, report))
}

/// [`compress`] followed by a full decode that must reproduce `map`.
pub fn compress_verified(model: &Model32, map: &DepthMap, divisor: u32) -> Result<(Vec<u8>, CodingReport)> {
    let (bytes, report) = compress(model, map, divisor)?;
    let (back, _) = decompress(model, &bytes)?;
    if &back != map {
        return Err(Error::Verification("decoded map differs from the input".into()));
    }
    Ok((bytes, report))
}
