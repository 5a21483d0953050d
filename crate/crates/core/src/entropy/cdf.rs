//! Quantized cumulative frequency tables.

use crate::error::{Error, Result};

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;
/// Largest alphabet a table may hold; the rest of the total is headroom so
/// every symbol keeps a usable frequency.
pub const MAX_ALPHABET: usize = (FREQ_TOTAL - 256) as usize;

/// Cumulative counts `c[0] = 0 < c[1] < ... < c[S] = 65536`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    cum: Vec<u32>,
}

impl QuantizedCdf {
    /// Validates raw cumulative counts.
    pub fn from_cumulative(cum: Vec<u32>) -> Result<Self> {
        if cum.len() < 2 || cum[0] != 0 || *cum.last().unwrap() != FREQ_TOTAL {
            return Err(Error::format("cumulative table must run from 0 to 65536"));
        }
        if cum.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::format("cumulative table not strictly increasing"));
        }
        if cum.len() - 1 > MAX_ALPHABET {
            return Err(Error::Alphabet {
                size: cum.len() - 1,
                limit: MAX_ALPHABET,
            });
        }
        Ok(QuantizedCdf { cum })
    }

    /// A uniform table over `size` symbols.
    pub fn uniform(size: usize) -> Result<Self> {
        build_cdf(&vec![1.0 / size as f64; size])
    }

    pub fn alphabet_size(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    /// `(start, frequency)` of a symbol.
    #[inline]
    pub fn range(&self, symbol: usize) -> (u32, u32) {
        let lo = self.cum[symbol];
        (lo, self.cum[symbol + 1] - lo)
    }

    pub fn frequency(&self, symbol: usize) -> u32 {
        self.range(symbol).1
    }

    /// Symbol whose interval contains `target`.
    #[inline]
    pub fn find(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Ideal code length of a symbol under this table.
    pub fn bits(&self, symbol: usize) -> f64 {
        f64::from(FREQ_BITS) - f64::from(self.frequency(symbol)).log2()
    }
}

/// Largest-remainder quantization to a total of 65536, every symbol getting at
/// least one count. Remainder ties go to the lower index.
pub fn build_cdf(pmf: &[f64]) -> Result<QuantizedCdf> {
    let mut scratch = CdfScratch::default();
    let mut cum = Vec::new();
    build_cdf_into(pmf, &mut scratch, &mut cum)?;
    Ok(QuantizedCdf { cum })
}

/// [`build_cdf`] with caller-owned scratch buffers.
pub fn build_cdf_with(pmf: &[f64], scratch: &mut CdfScratch) -> Result<QuantizedCdf> {
    let mut cum = Vec::with_capacity(pmf.len() + 1);
    build_cdf_into(pmf, scratch, &mut cum)?;
    Ok(QuantizedCdf { cum })
}

/// Reusable buffers for [`build_cdf_into`].
#[derive(Default)]
pub struct CdfScratch {
    order: Vec<(f64, u32)>,
    counts: Vec<u32>,
}

/// Same as [`build_cdf`], writing the cumulative table into `cum`.
pub fn build_cdf_into(pmf: &[f64], scratch: &mut CdfScratch, cum: &mut Vec<u32>) -> Result<()> {
    let size = pmf.len();
    if size == 0 {
        return Err(Error::argument("empty pmf"));
    }
    if size > MAX_ALPHABET {
        return Err(Error::Alphabet {
            size,
            limit: MAX_ALPHABET,
        });
    }
    let mut total = 0.0;
    for &p in pmf {
        if !(p >= 0.0 && p.is_finite()) {
            return Err(Error::argument(format!("invalid probability {p}")));
        }
        total += p;
    }
    if (total - 1.0).abs() > 1e-4 {
        return Err(Error::argument(format!("pmf sums to {total}")));
    }

    let spare = f64::from(FREQ_TOTAL) - size as f64;
    let counts = &mut scratch.counts;
    counts.clear();
    let order = &mut scratch.order;
    order.clear();
    let mut assigned = 0u32;
    for (i, &p) in pmf.iter().enumerate() {
        let exact = p / total * spare;
        let whole = exact.floor();
        let c = 1 + whole as u32;
        counts.push(c);
        assigned += c;
        order.push((exact - whole, i as u32));
    }
    let mut left = FREQ_TOTAL.saturating_sub(assigned) as usize;
    // floating round-off can push the floor sum one past the budget
    while assigned > FREQ_TOTAL {
        let (i, _) = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 1)
            .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
            .expect("some count exceeds one");
        counts[i] -= 1;
        assigned -= 1;
    }
    if left > 0 {
        let by_remainder = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if left < order.len() {
            order.select_nth_unstable_by(left - 1, by_remainder);
        }
        for &(_, i) in &order[..left.min(order.len())] {
            counts[i as usize] += 1;
        }
        left = left.saturating_sub(order.len());
        // only reachable for a degenerate pmf summing well below one
        if left > 0 {
            counts[0] += left as u32;
        }
    }

    cum.clear();
    cum.reserve(size + 1);
    cum.push(0);
    let mut acc = 0u32;
    for &c in counts.iter() {
        acc += c;
        cum.push(acc);
    }
    debug_assert_eq!(acc, FREQ_TOTAL);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(cdf: &QuantizedCdf) -> Vec<u32> {
        cdf.cumulative().windows(2).map(|w| w[1] - w[0]).collect()
    }

    #[test]
    fn examples() {
        assert_eq!(counts(&build_cdf(&[0.5, 0.5]).unwrap()), vec![32768, 32768]);
        assert_eq!(counts(&build_cdf(&[1.0, 0.0]).unwrap()), vec![65535, 1]);
        assert_eq!(counts(&build_cdf(&[1.0]).unwrap()), vec![65536]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        // three equal thirds of 65533 spare counts leave one count to hand out
        let c = counts(&build_cdf(&[1.0 / 3.0; 3]).unwrap());
        assert_eq!(c.iter().sum::<u32>(), FREQ_TOTAL);
        assert!(c[0] >= c[1] && c[1] >= c[2]);
        assert_eq!(c[0] - c[2], 1);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            build_cdf(&vec![1.0 / 70000.0; 70000]),
            Err(Error::Alphabet { .. })
        ));
        assert!(build_cdf(&[0.5, 0.2]).is_err());
        assert!(build_cdf(&[f64::NAN, 1.0]).is_err());
        assert!(build_cdf(&[]).is_err());
    }

    #[test]
    fn find_inverts_range() {
        let cdf = build_cdf(&[0.1, 0.0, 0.6, 0.3]).unwrap();
        for s in 0..4 {
            let (lo, f) = cdf.range(s);
            assert_eq!(cdf.find(lo), s);
            assert_eq!(cdf.find(lo + f - 1), s);
        }
    }

    proptest! {
        #[test]
        fn construction_invariants(raw in prop::collection::vec(0.0f64..1.0, 1..2000)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 0.0);
            let pmf: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let cdf = build_cdf(&pmf).unwrap();
            let c = counts(&cdf);
            prop_assert_eq!(c.len(), pmf.len());
            prop_assert_eq!(c.iter().map(|&v| u64::from(v)).sum::<u64>(), u64::from(FREQ_TOTAL));
            prop_assert!(c.iter().all(|&v| v >= 1));
            // every count is within one of its exact share
            let spare = f64::from(FREQ_TOTAL) - pmf.len() as f64;
            for (p, &n) in pmf.iter().zip(&c) {
                let exact = 1.0 + p * spare;
                prop_assert!((f64::from(n) - exact).abs() < 1.0 + 1e-6);
            }
        }
    }
}
