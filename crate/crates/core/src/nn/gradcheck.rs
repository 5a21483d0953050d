//! Central-difference gradient checks in 64-bit.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Absolute part of the relative-error denominator.
pub const ABS_FLOOR: f64 = 1e-8;
/// Entries are compared relative to at least this fraction of the largest
/// gradient entry, so round-off in near-zero entries does not dominate.
pub const SCALE_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn worst_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (SCALE_FLOOR * scale).max(ABS_FLOOR);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |w, (&a, &n)| w.max(relative_error(a, n, floor)))
}

fn scalar_of(v: &Var<f64>) -> Result<f64> {
    if v.value().len() != 1 {
        return Err(Error::shape("gradient check needs a scalar function"));
    }
    Ok(v.value().data()[0])
}

/// Largest relative error between the reverse-mode gradient of `f` with
/// respect to its input and central differences with step `h`.
pub fn check_input_gradient<F>(store: &ParamStore<f64>, point: &Tensor<f64>, h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph<'_, f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let x = g.input_tracked(point.clone());
        let out = f(&mut g, &x)?;
        let grads = g.backward(&out)?;
        grads
            .input(&x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(point.shape()))
    };
    let mut eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::inference(store);
        let x = g.constant(p);
        scalar_of(&f(&mut g, &x)?)
    };
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(worst_error(analytic.data(), &numeric))
}

/// Same check against selected elements of one parameter tensor.
pub fn check_param_gradient<F>(store: &ParamStore<f64>, id: ParamId, indices: &[usize], h: f64, f: F) -> Result<f64>
where
    F: FnMut(&mut Graph<'_, f64>) -> Result<Var<f64>>,
{
    let (analytic, numeric) = param_gradient_pairs(store, id, indices, h, f)?;
    Ok(worst_error(&analytic, &numeric))
}

/// Largest deviation over a slice relative to the slice's largest gradient
/// entry. Suited to large objectives, where central differences carry
/// round-off of order `eps * |f| / h` in every entry.
pub fn slice_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(ABS_FLOOR);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |w, (&a, &n)| w.max((a - n).abs() / scale))
}

/// Reverse-mode and central-difference gradients of selected elements.
pub fn param_gradient_pairs<F>(
    store: &ParamStore<f64>,
    id: ParamId,
    indices: &[usize],
    h: f64,
    f: F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&mut Graph<'_, f64>) -> Result<Var<f64>>,
{
    let pairs = param_gradient_probe(store, id, indices, h, f)?;
    Ok((pairs.analytic, pairs.numeric))
}

/// Gradient pairs plus, per element, whether the two difference points sit
/// on different sides of a leaky-ReLU kink. Central differences are not a
/// valid reference for those elements.
pub struct GradientProbe {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub crossed: Vec<bool>,
}

impl GradientProbe {
    /// [`slice_error`] over the elements whose stencil crossed no kink.
    pub fn smooth_error(&self) -> f64 {
        let (a, n): (Vec<f64>, Vec<f64>) = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .zip(&self.crossed)
            .filter(|(_, &c)| !c)
            .map(|((&a, &n), _)| (a, n))
            .unzip();
        slice_error(&a, &n)
    }
}

pub fn param_gradient_probe<F>(
    store: &ParamStore<f64>,
    id: ParamId,
    indices: &[usize],
    h: f64,
    mut f: F,
) -> Result<GradientProbe>
where
    F: FnMut(&mut Graph<'_, f64>) -> Result<Var<f64>>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        let grads = g.backward(&out)?;
        grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
    };
    let mut numeric = Vec::with_capacity(indices.len());
    let mut crossed = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut eval = |delta: f64| -> Result<(f64, Vec<u64>)> {
            let mut s = store.clone();
            s.value_mut(id).data_mut()[i] += delta;
            let mut g = Graph::inference(&s);
            g.track_kinks();
            let v = scalar_of(&f(&mut g)?)?;
            Ok((v, g.kink_pattern().unwrap_or_default().to_vec()))
        };
        let (plus, kp) = eval(h)?;
        let (minus, km) = eval(-h)?;
        numeric.push((plus - minus) / (2.0 * h));
        crossed.push(kp != km);
    }
    let picked = indices.iter().map(|&i| analytic.data()[i]).collect();
    Ok(GradientProbe {
        analytic: picked,
        numeric,
        crossed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Tensor::from_vec([1, 2, 3, 4], (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let store = ParamStore::new();
        let err = check_input_gradient(&store, &p, 1e-5, |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(&sq))
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function() {
        let store = ParamStore::new();
        let p = Tensor::full([1, 1, 2, 2], 0.3);
        let err = check_input_gradient(&store, &p, 1e-5, |g, _| Ok(g.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(err, 0.0);
    }
}
