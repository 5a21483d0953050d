//! Discretized continuous densities.
//!
//! A continuous density over residuals (or latents) is turned into a
//! probability for an integer `r` by integrating it over `[r - 1/2, r + 1/2]`.
//! The coding path evaluates CDF differences directly; the training path uses
//! log-domain forms with analytic partial derivatives so that far-off values
//! still receive useful gradients.

use serde::{Deserialize, Serialize};

use crate::scalar::{lit, Scalar};

/// Smallest probability any coded symbol may receive.
pub const PROB_FLOOR: f64 = 1.0 / 65536.0;
/// Lower bound applied to every scale parameter.
pub const SCALE_FLOOR: f64 = 1e-6;
/// Largest number of mixture components supported by the fused kernels.
pub const MAX_COMPONENTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MixtureKind {
    #[default]
    Laplace,
    Logistic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureComponent<T> {
    pub weight: T,
    pub loc: T,
    pub scale: T,
}

pub fn laplace_cdf<T: Scalar>(t: T, loc: T, scale: T) -> T {
    let u = (t - loc) / scale;
    let half: T = lit(0.5);
    if u < T::zero() {
        half * u.exp()
    } else {
        T::one() - half * (-u).exp()
    }
}

pub fn logistic_cdf<T: Scalar>(t: T, loc: T, scale: T) -> T {
    sigmoid((t - loc) / scale)
}

pub fn gaussian_cdf<T: Scalar>(t: T, loc: T, scale: T) -> T {
    let u = (t - loc) / scale;
    lit::<T>(0.5) * (-u / T::SQRT_2()).erfc()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Probability mass of `[a, b]` under one component. Endpoints may be
/// infinite; tails are evaluated on the side that avoids cancellation.
pub fn interval_mass<T: Scalar>(kind: MixtureKind, a: T, b: T, loc: T, scale: T) -> T {
    let ua = (a - loc) / scale;
    let ub = (b - loc) / scale;
    let half: T = lit(0.5);
    match kind {
        MixtureKind::Laplace => {
            if ub <= T::zero() {
                half * (ub.exp() - ua.exp())
            } else if ua >= T::zero() {
                half * ((-ua).exp() - (-ub).exp())
            } else {
                -half * ua.exp_m1() - half * (-ub).exp_m1()
            }
        }
        MixtureKind::Logistic => {
            if ua >= T::zero() {
                sigmoid(-ua) - sigmoid(-ub)
            } else {
                sigmoid(ub) - sigmoid(ua)
            }
        }
    }
}

/// Mass of `[a, b]` under a Gaussian, with the same tail handling.
pub fn gaussian_interval_mass<T: Scalar>(a: T, b: T, loc: T, scale: T) -> T {
    let ua = (a - loc) / scale;
    let ub = (b - loc) / scale;
    let half: T = lit(0.5);
    let upper = |u: T| half * (u / T::SQRT_2()).erfc();
    let lower = |u: T| half * (-u / T::SQRT_2()).erfc();
    if ua >= T::zero() {
        upper(ua) - upper(ub)
    } else if ub <= T::zero() {
        lower(ub) - lower(ua)
    } else {
        T::one() - lower(ua) - upper(ub)
    }
}

/// Discretized mixture pmf at integer `r` (no floor).
pub fn lmm_pmf<T: Scalar>(kind: MixtureKind, r: T, comps: &[MixtureComponent<T>]) -> T {
    let half: T = lit(0.5);
    comps
        .iter()
        .map(|c| c.weight * interval_mass(kind, r - half, r + half, c.loc, c.scale))
        .sum()
}

/// Probability the coder sees for `r`: the pmf floored at [`PROB_FLOOR`].
pub fn lmm_pmf_floored<T: Scalar>(kind: MixtureKind, r: T, comps: &[MixtureComponent<T>]) -> T {
    lmm_pmf(kind, r, comps).max(lit(PROB_FLOOR))
}

/// Masses of the integer alphabet `lo..=hi` with everything below `lo - 1/2`
/// folded into `lo` and everything above `hi + 1/2` folded into `hi`.
pub fn folded_pmf<T: Scalar>(lo: i64, hi: i64, mass: impl Fn(T, T) -> T) -> Vec<T> {
    debug_assert!(lo <= hi);
    let half: T = lit(0.5);
    (lo..=hi)
        .map(|s| {
            let a = if s == lo {
                T::neg_infinity()
            } else {
                T::from_i64(s).unwrap() - half
            };
            let b = if s == hi {
                T::infinity()
            } else {
                T::from_i64(s).unwrap() + half
            };
            mass(a, b).max(T::zero())
        })
        .collect()
}

pub fn mixture_folded_pmf<T: Scalar>(
    kind: MixtureKind,
    lo: i64,
    hi: i64,
    comps: &[MixtureComponent<T>],
) -> Vec<T> {
    folded_pmf(lo, hi, |a, b| {
        comps
            .iter()
            .map(|c| c.weight * interval_mass(kind, a, b, c.loc, c.scale))
            .sum()
    })
}

pub fn gaussian_folded_pmf<T: Scalar>(lo: i64, hi: i64, loc: T, scale: T) -> Vec<T> {
    folded_pmf(lo, hi, |a, b| gaussian_interval_mass(a, b, loc, scale))
}

/// Log mass of the unit bin centred on `x` with partial derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogMass<T> {
    pub log_mass: T,
    pub d_x: T,
    pub d_loc: T,
    pub d_scale: T,
}

/// Log of the Laplace mass of `[x - 1/2, x + 1/2]`, exact in all tails.
pub fn laplace_log_mass<T: Scalar>(x: T, loc: T, scale: T) -> LogMass<T> {
    let half: T = lit(0.5);
    let ua = (x - half - loc) / scale;
    let ub = (x + half - loc) / scale;
    let w = T::one() / scale;
    // d log m / d ua, d log m / d ub
    let (log_mass, ga, gb) = if ub <= T::zero() {
        let one_minus = -(-w).exp_m1();
        let gb = T::one() / one_minus;
        (half.ln() + ub + one_minus.ln(), T::one() - gb, gb)
    } else if ua >= T::zero() {
        let one_minus = -(-w).exp_m1();
        let ga = -T::one() / one_minus;
        (half.ln() - ua + one_minus.ln(), ga, -T::one() - ga)
    } else {
        let ea = ua.exp();
        let eb = (-ub).exp();
        let m = -half * ua.exp_m1() - half * (-ub).exp_m1();
        (m.ln(), -half * ea / m, half * eb / m)
    };
    chain(log_mass, ga, gb, ua, ub, scale)
}

pub fn logistic_log_mass<T: Scalar>(x: T, loc: T, scale: T) -> LogMass<T> {
    let half: T = lit(0.5);
    let ua = (x - half - loc) / scale;
    let ub = (x + half - loc) / scale;
    let log_mass = if ua >= T::zero() {
        // sigma(-ua) - sigma(-ub) = sigma(-ua) * (1 - ratio)
        let ratio = (ua - ub).exp() * (T::one() + (-ua).exp()) / (T::one() + (-ub).exp());
        log_sigmoid(-ua) + (-ratio).ln_1p()
    } else if ub <= T::zero() {
        let ratio = (ua - ub).exp() * (T::one() + ub.exp()) / (T::one() + ua.exp());
        log_sigmoid(ub) + (-ratio).ln_1p()
    } else {
        (sigmoid(ub) - sigmoid(ua)).ln()
    };
    let log_dens = |u: T| log_sigmoid(u) + log_sigmoid(-u);
    let ga = -(log_dens(ua) - log_mass).exp();
    let gb = (log_dens(ub) - log_mass).exp();
    chain(log_mass, ga, gb, ua, ub, scale)
}

/// `ln(sigmoid(u))` without overflow.
pub fn log_sigmoid<T: Scalar>(u: T) -> T {
    -((-u).max(T::zero()) + (-u.abs()).exp().ln_1p())
}

fn chain<T: Scalar>(log_mass: T, ga: T, gb: T, ua: T, ub: T, scale: T) -> LogMass<T> {
    LogMass {
        log_mass,
        d_x: (ga + gb) / scale,
        d_loc: -(ga + gb) / scale,
        d_scale: -(ga * ua + gb * ub) / scale,
    }
}

/// Log mass of the unit bin centred on `x` under a Gaussian.
pub fn gaussian_log_mass<T: Scalar>(x: T, loc: T, scale: T, floor: T) -> LogMass<T> {
    let half: T = lit(0.5);
    let diff = x - loc;
    let v = diff.abs();
    let l = (v - half) / scale;
    let u = (v + half) / scale;
    let q = |t: T| half * (t / T::SQRT_2()).erfc();
    let m = q(l) - q(u);
    if !(m > floor) {
        return LogMass {
            log_mass: floor.ln(),
            d_x: T::zero(),
            d_loc: T::zero(),
            d_scale: T::zero(),
        };
    }
    let inv_sqrt_2pi: T = lit(0.398_942_280_401_432_7);
    let phi = |t: T| inv_sqrt_2pi * (-half * t * t).exp();
    let dm_dv = (phi(u) - phi(l)) / scale;
    let dm_ds = (l * phi(l) - u * phi(u)) / scale;
    let sign = if diff > T::zero() {
        T::one()
    } else if diff < T::zero() {
        -T::one()
    } else {
        T::zero()
    };
    LogMass {
        log_mass: m.ln(),
        d_x: sign * dm_dv / m,
        d_loc: -sign * dm_dv / m,
        d_scale: dm_ds / m,
    }
}

/// Bits of `x` under a mixture parameterized by weight logits, locations and
/// log-scales, with gradients with respect to every input.
#[derive(Clone, Copy, Debug)]
pub struct MixtureNll<T> {
    pub bits: T,
    pub d_x: T,
    pub d_logits: [T; MAX_COMPONENTS],
    pub d_loc: [T; MAX_COMPONENTS],
    pub d_log_scale: [T; MAX_COMPONENTS],
}

pub fn mixture_nll<T: Scalar>(
    kind: MixtureKind,
    x: T,
    logits: &[T],
    locs: &[T],
    log_scales: &[T],
) -> MixtureNll<T> {
    let k = logits.len();
    debug_assert!(k <= MAX_COMPONENTS && locs.len() == k && log_scales.len() == k);
    let zero = [T::zero(); MAX_COMPONENTS];
    let max_logit = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut log_norm = T::zero();
    for &l in logits {
        log_norm += (l - max_logit).exp();
    }
    let log_norm = max_logit + log_norm.ln();
    let scale_floor: T = lit(SCALE_FLOOR);

    let mut terms = zero;
    let mut masses = [LogMass {
        log_mass: T::zero(),
        d_x: T::zero(),
        d_loc: T::zero(),
        d_scale: T::zero(),
    }; MAX_COMPONENTS];
    let mut scales = zero;
    for i in 0..k {
        let raw = log_scales[i].exp();
        scales[i] = raw.max(scale_floor);
        masses[i] = match kind {
            MixtureKind::Laplace => laplace_log_mass(x, locs[i], scales[i]),
            MixtureKind::Logistic => logistic_log_mass(x, locs[i], scales[i]),
        };
        terms[i] = logits[i] - log_norm + masses[i].log_mass;
    }
    let max_term = terms[..k].iter().copied().fold(T::neg_infinity(), T::max);
    let mut acc = T::zero();
    for &t in &terms[..k] {
        acc += (t - max_term).exp();
    }
    let log_p = max_term + acc.ln();

    let to_bits = -T::one() / T::LN_2();
    let mut out = MixtureNll {
        bits: log_p * to_bits,
        d_x: T::zero(),
        d_logits: zero,
        d_loc: zero,
        d_log_scale: zero,
    };
    for i in 0..k {
        let resp = (terms[i] - log_p).exp();
        let weight = (logits[i] - log_norm).exp();
        out.d_logits[i] = (resp - weight) * to_bits;
        out.d_loc[i] = resp * masses[i].d_loc * to_bits;
        let dscale_dlog = if log_scales[i].exp() > scale_floor {
            scales[i]
        } else {
            T::zero()
        };
        out.d_log_scale[i] = resp * masses[i].d_scale * dscale_dlog * to_bits;
        out.d_x += resp * masses[i].d_x * to_bits;
    }
    out
}
