//! Built-in health checks run by `hpdc selftest`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitsplit::{merge, split};
use crate::codec::{compress, decompress};
use crate::depth_io::DepthMap;
use crate::entropy::{build_cdf, RangeDecoder, RangeEncoder};
use crate::error::Result;
use crate::likelihood::{mixture_folded_pmf, MixtureComponent, MixtureKind};
use crate::model::{Model32, ModelConfig};
use crate::nn::gradcheck::check_input_gradient;
use crate::nn::layers::{AttentionBlock, Conv2d, ResBlock, Upsample};
use crate::nn::{ParamBuilder, ParamStore, Tensor};
use crate::trainer::synthetic_dataset;

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    /// Decode with a table shifted by one symbol, to prove the coder suite
    /// notices a broken CDF.
    pub inject_cdf_fault: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct SelftestReport {
    pub suites: Vec<SuiteResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            out.push_str(&format!(
                "{:<6} {:<12} {:>9.3}s  {}\n",
                if s.passed { "PASS" } else { "FAIL" },
                s.name,
                s.elapsed.as_secs_f64(),
                s.detail
            ));
        }
        out
    }
}

pub fn run(options: SelftestOptions) -> SelftestReport {
    let suites: [(&'static str, Box<dyn Fn() -> Result<String>>); 4] = [
        ("gradients", Box::new(gradients)),
        ("split-merge", Box::new(split_merge)),
        ("coder", Box::new(move || coder(options.inject_cdf_fault))),
        ("pmf", Box::new(pmf_normalization)),
    ];
    let suites = suites
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let outcome = f();
            let elapsed = start.elapsed();
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(e) => (false, e.to_string()),
            };
            SuiteResult {
                name,
                passed,
                detail,
                elapsed,
            }
        })
        .collect();
    SelftestReport { suites }
}

fn fail(msg: String) -> crate::Error {
    crate::Error::Verification(msg)
}

fn gradients() -> Result<String> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let rb = ResBlock::new(&mut b, "rb", 3);
    let att = AttentionBlock::new(&mut b, "att", 3);
    let down = Conv2d::new(&mut b, "down", 3, 3, 3, 2);
    let up = Upsample::new(&mut b, "up", 3, 3);
    let n = 2 * 3 * 4 * 4;
    let x = Tensor::from_vec([2, 3, 4, 4], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let mut worst = 0.0f64;
    worst = worst.max(check_input_gradient(&store, &x, 1e-5, |g, v| {
        let h = rb.forward(g, v)?;
        let h = g.mul(&h, &h)?;
        Ok(g.sum(&h))
    })?);
    worst = worst.max(check_input_gradient(&store, &x, 1e-5, |g, v| {
        let h = att.forward(g, v)?;
        let h = g.mul(&h, &h)?;
        Ok(g.sum(&h))
    })?);
    worst = worst.max(check_input_gradient(&store, &x, 1e-5, |g, v| {
        let h = down.forward(g, v)?;
        let h = g.leaky_relu(&h);
        let h = up.forward(g, &h)?;
        let h = g.mul(&h, &h)?;
        Ok(g.sum(&h))
    })?);

    // mixture bits with respect to the location parameters
    let k = 3;
    let xs = Tensor::from_vec([1, 1, 2, 2], vec![0.3, -1.7, 2.2, 0.0])?;
    let params = |rng: &mut ChaCha8Rng| -> Result<Tensor<f64>> {
        Tensor::from_vec([1, k, 2, 2], (0..4 * k).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let logits = params(&mut rng)?;
    let log_scale = params(&mut rng)?;
    let loc = params(&mut rng)?;
    for kind in [MixtureKind::Laplace, MixtureKind::Logistic] {
        worst = worst.max(check_input_gradient(&store, &loc, 1e-5, |g, v| {
            let xv = g.constant(xs.clone());
            let lg = g.constant(logits.clone());
            let ls = g.constant(log_scale.clone());
            let bits = g.mixture_bits(&xv, &lg, v, &ls, k, kind)?;
            Ok(g.sum(&bits))
        })?);
    }
    if worst < GRAD_TOLERANCE {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(fail(format!("max relative error {worst:.2e} >= {GRAD_TOLERANCE:e}")))
    }
}

fn split_merge() -> Result<String> {
    let xs: Vec<u32> = (0..1u32 << 12).collect();
    let map = DepthMap::new(64, 64, 12, 1000, xs.clone())?;
    let divisors = [8, 64, 256, 512, 1024];
    for d in divisors {
        let back = merge(&split(&map, d)?)?;
        if back.data() != xs.as_slice() {
            return Err(fail(format!("merge(split(x, {d})) != x")));
        }
    }
    Ok(format!("{} values x {} divisors", xs.len(), divisors.len()))
}

fn coder(inject_fault: bool) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let size = 40;
    let raw: Vec<f64> = (0..size).map(|_| rng.gen_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let pmf: Vec<f64> = raw.iter().map(|p| p / total).collect();
    let cdf = build_cdf(&pmf)?;
    let decode_cdf = if inject_fault {
        let mut shifted = pmf[1..].to_vec();
        shifted.push(pmf[0]);
        build_cdf(&shifted)?
    } else {
        cdf.clone()
    };
    let symbols: Vec<usize> = (0..5000).map(|_| rng.gen_range(0..size)).collect();
    let mut enc = RangeEncoder::new();
    for &s in &symbols {
        enc.encode(&cdf, s);
    }
    let bytes = enc.finish();
    let mut dec = RangeDecoder::new(&bytes)?;
    for (i, &s) in symbols.iter().enumerate() {
        let got = dec.decode(&decode_cdf)?;
        if got != s {
            return Err(fail(format!("range coder symbol {i}: decoded {got}, expected {s}")));
        }
    }

    let model = Model32::new(ModelConfig::tiny())?;
    let maps = synthetic_dataset(2, 48, 40, 16, 5);
    let mut total = 0;
    for map in &maps {
        let (stream, _) = compress(&model, map, 256)?;
        let (back, _) = decompress(&model, &stream)?;
        if &back != map {
            return Err(fail("codec round trip changed the map".into()));
        }
        total += stream.len();
    }
    Ok(format!(
        "{} symbols in {} bytes; {} maps in {total} bytes",
        symbols.len(),
        bytes.len(),
        maps.len()
    ))
}

fn pmf_normalization() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let trials = 500;
    for i in 0..trials {
        let kind = if i % 2 == 0 { MixtureKind::Laplace } else { MixtureKind::Logistic };
        let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let comps: Vec<MixtureComponent<f64>> = raw
            .iter()
            .map(|&w| MixtureComponent {
                weight: w / total,
                loc: rng.gen_range(-30.0..30.0),
                scale: rng.gen_range(0.05..20.0),
            })
            .collect();
        let lo = rng.gen_range(-60..0);
        let hi = rng.gen_range(1..60);
        let sum: f64 = mixture_folded_pmf(kind, lo, hi, &comps).iter().sum();
        worst = worst.max((sum - 1.0).abs());
    }
    if worst < 1e-6 {
        Ok(format!("{trials} mixtures, max |sum - 1| = {worst:.1e}"))
    } else {
        Err(fail(format!("pmf sums deviate from 1 by {worst:.1e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes() {
        let report = run(SelftestOptions::default());
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.suites.len(), 4);
    }

    #[test]
    fn cdf_fault_fails_coder_suite() {
        let report = run(SelftestOptions { inject_cdf_fault: true });
        assert!(!report.passed());
        let coder = report.suites.iter().find(|s| s.name == "coder").unwrap();
        assert!(!coder.passed, "{}", report.render());
        assert!(report.suites.iter().filter(|s| s.name != "coder").all(|s| s.passed));
        assert!(report.render().contains("s  "));
    }
}
