//! Probability models for quantized latents and their discretization to the
//! integer frequency tables the range coder consumes.
//!
//! A latent symbol s is modeled by a Gaussian convolved with a unit uniform,
//! so `pmf(s) = CDF((s + 0.5 - mu)/sigma) - CDF((s - 0.5 - mu)/sigma)`, with
//! the two edge symbols absorbing the tails. Coding parameters are first
//! snapped to a coarse grid (a 64-entry log-spaced sigma table, a 1/16 mu
//! grid) so encoder and decoder build byte-identical tables from the
//! entropy-parameter floats regardless of platform.

use std::collections::HashMap;
use std::sync::Arc;

use crate::gauss::normal_cdf;
use crate::tensor::{Result, TensorError};

/// Smallest sigma the continuous models may carry.
pub const SIGMA_MIN: f64 = 1e-6;
/// Likelihood floor used in bit estimation (and the training loss).
pub const MIN_LIKELIHOOD: f64 = 1e-9;
/// Frequency precision of every CDF table in this crate.
pub const PRECISION_BITS: u8 = 16;
/// Quantized latents saturate into this symbol range.
pub const SYMBOL_MIN: i32 = -128;
pub const SYMBOL_MAX: i32 = 127;

/// 64 log-spaced sigma values from 0.01 to 64.0. Quantization maps a sigma
/// to the nearest table entry not below it (clamping at both ends).
pub struct ScaleTable {
    values: Vec<f64>,
}

impl Default for ScaleTable {
    fn default() -> Self {
        Self::new()
    }
}

impl ScaleTable {
    pub fn new() -> ScaleTable {
        let (lo, hi) = (0.01f64, 64.0f64);
        let n = 64;
        let mut values: Vec<f64> = (0..n)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
            .collect();
        values[0] = lo;
        values[n - 1] = hi;
        ScaleTable { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn value(&self, idx: u8) -> f64 {
        self.values[idx as usize]
    }

    /// Index of the smallest entry >= sigma; 63 when sigma exceeds the table.
    pub fn quantize_index(&self, sigma: f64) -> u8 {
        let i = self.values.partition_point(|&v| v < sigma);
        i.min(self.values.len() - 1) as u8
    }
}

/// Per-element location/scale parameters after grid snapping. `mu_16` is the
/// numerator of a 1/16-grid mean; `sigma_idx` indexes the [`ScaleTable`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantizedGaussian {
    pub mu_16: i32,
    pub sigma_idx: u8,
}

impl QuantizedGaussian {
    pub fn mu(&self) -> f64 {
        self.mu_16 as f64 / 16.0
    }

    pub fn sigma(&self, table: &ScaleTable) -> f64 {
        table.value(self.sigma_idx)
    }

    fn cache_key(&self) -> u32 {
        ((self.sigma_idx as u32) << 16) | ((self.mu_16 + 2048) as u32)
    }
}

/// Snap (mu, sigma) to the coding grid. Pure, idempotent, and identical on
/// the encode and decode paths.
pub fn quantize_params(mu: f32, sigma: f32, table: &ScaleTable) -> QuantizedGaussian {
    let mu_16 = ((mu as f64) * 16.0).round().clamp(-2048.0, 2047.0) as i32;
    QuantizedGaussian {
        mu_16,
        sigma_idx: table.quantize_index(sigma as f64),
    }
}

/// Mixture parameters after grid snapping: (weight/256, mu_16, sigma_idx).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QuantizedGmm {
    pub components: Vec<(u16, i32, u8)>,
}

/// Snap GMM parameters: weights to a /256 grid summing exactly to 256,
/// means and sigmas like the single-Gaussian case.
pub fn quantize_gmm_params(components: &[(f32, f32, f32)], table: &ScaleTable) -> QuantizedGmm {
    let total = 256u32;
    let targets: Vec<f64> = components
        .iter()
        .map(|&(pi, _, _)| pi as f64 * total as f64)
        .collect();
    let mut base: Vec<u32> = targets.iter().map(|&t| t.max(0.0) as u32).collect();
    let assigned: u32 = base.iter().sum();
    let leftover = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..components.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = targets[a] - base[a] as f64;
        let rb = targets[b] - base[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(leftover as usize) {
        base[i] += 1;
    }
    QuantizedGmm {
        components: components
            .iter()
            .zip(base.iter())
            .map(|(&(_, mu, sigma), &pi256)| {
                let q = quantize_params(mu, sigma, table);
                (pi256 as u16, q.mu_16, q.sigma_idx)
            })
            .collect(),
    }
}

/// Discretized Gaussian PMF over the closed symbol range. Interior symbols
/// integrate the unit-uniform-convolved density; the edge symbols absorb the
/// tails so the vector sums to 1 up to float precision.
pub fn discretized_gaussian_pmf(mu: f64, sigma: f64, s_min: i32, s_max: i32) -> Result<Vec<f64>> {
    if s_min > s_max {
        return Err(TensorError::Contract {
            context: "discretized_gaussian_pmf",
            message: format!("degenerate symbol range [{s_min}, {s_max}]"),
        });
    }
    let sigma = sigma.max(SIGMA_MIN);
    let n = (s_max - s_min + 1) as usize;
    let mut pmf = Vec::with_capacity(n);
    let mut prev = 0.0f64;
    // outside +/- 9 sigma the CDF saturates below 1e-18; skip the erf there
    let lo_edge = mu - 9.0 * sigma;
    let hi_edge = mu + 9.0 * sigma;
    for s in s_min..=s_max {
        let edge = s as f64 + 0.5;
        let upper = if s == s_max || edge >= hi_edge {
            1.0
        } else if edge <= lo_edge {
            0.0
        } else {
            normal_cdf((edge - mu) / sigma)
        };
        pmf.push((upper - prev).max(0.0));
        prev = upper;
    }
    Ok(pmf)
}

/// Discretized K-component Gaussian mixture PMF: the convex combination of
/// per-component discretized Gaussians.
pub fn discretized_gmm_pmf(
    components: &[(f64, f64, f64)],
    s_min: i32,
    s_max: i32,
) -> Result<Vec<f64>> {
    if components.is_empty() {
        return Err(TensorError::Contract {
            context: "discretized_gmm_pmf",
            message: "at least one mixture component required".into(),
        });
    }
    let weight_sum: f64 = components.iter().map(|c| c.0).sum();
    if components.iter().any(|c| c.0 < 0.0) || (weight_sum - 1.0).abs() > 1e-6 {
        return Err(TensorError::Contract {
            context: "discretized_gmm_pmf",
            message: format!("mixture weights must be >= 0 and sum to 1, got sum {weight_sum}"),
        });
    }
    let n = (s_max - s_min + 1) as usize;
    let mut pmf = vec![0.0f64; n];
    for &(pi, mu, sigma) in components {
        let comp = discretized_gaussian_pmf(mu, sigma, s_min, s_max)?;
        for (acc, p) in pmf.iter_mut().zip(comp.iter()) {
            *acc += pi * p;
        }
    }
    Ok(pmf)
}

/// Integer cumulative-frequency table at fixed precision; the sole interface
/// between the entropy models and the range coder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    pub precision_bits: u8,
    pub s_min: i32,
    pub s_max: i32,
    /// cdf[0] = 0, cdf[last] = 1 << precision_bits, strictly increasing.
    pub cdf: Vec<u32>,
}

impl CdfTable {
    pub fn total(&self) -> u32 {
        1u32 << self.precision_bits
    }

    pub fn num_symbols(&self) -> usize {
        (self.s_max - self.s_min + 1) as usize
    }

    pub fn contains(&self, sym: i32) -> bool {
        sym >= self.s_min && sym <= self.s_max
    }

    /// Cumulative interval [lo, hi) of a symbol.
    pub fn range_of(&self, sym: i32) -> (u32, u32) {
        let i = (sym - self.s_min) as usize;
        (self.cdf[i], self.cdf[i + 1])
    }

    pub fn freq(&self, sym: i32) -> u32 {
        let (lo, hi) = self.range_of(sym);
        hi - lo
    }

    /// Symbol whose interval contains the cumulative value `cum`.
    pub fn find(&self, cum: u32) -> i32 {
        debug_assert!(cum < self.total());
        let idx = self.cdf.partition_point(|&c| c <= cum) - 1;
        self.s_min + idx as i32
    }

    /// Code length of a symbol under this table, in bits.
    pub fn bits(&self, sym: i32) -> f64 {
        -((self.freq(sym) as f64 / self.total() as f64).log2())
    }
}

/// Turn a PMF into integer frequencies summing to exactly 2^precision, every
/// symbol getting frequency >= 1 so any in-range symbol stays decodable.
/// Apportionment is floor-then-largest-remainder with index-order ties.
pub fn build_cdf(pmf: &[f64], s_min: i32, precision_bits: u8) -> Result<CdfTable> {
    let n = pmf.len();
    if n == 0 {
        return Err(TensorError::Contract {
            context: "build_cdf",
            message: "empty pmf".into(),
        });
    }
    if pmf.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(TensorError::Contract {
            context: "build_cdf",
            message: "pmf entries must be finite and non-negative".into(),
        });
    }
    let total: u64 = 1u64 << precision_bits;
    if (n as u64) > total {
        return Err(TensorError::Contract {
            context: "build_cdf",
            message: format!(
                "{n} symbols cannot each get frequency 1 at precision {precision_bits}"
            ),
        });
    }
    let sum: f64 = pmf.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(TensorError::Contract {
            context: "build_cdf",
            message: format!("pmf must sum to 1 +/- 1e-6, got {sum}"),
        });
    }
    let free = total - n as u64;
    let targets: Vec<f64> = pmf.iter().map(|&p| p * free as f64).collect();
    let mut freqs: Vec<u64> = targets.iter().map(|&t| t as u64).collect();
    let assigned: u64 = freqs.iter().sum();
    let leftover = (free - assigned) as usize;
    if leftover > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let ra = targets[a] - freqs[a] as f64;
            let rb = targets[b] - freqs[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter().take(leftover) {
            freqs[i] += 1;
        }
    }
    let mut cdf = Vec::with_capacity(n + 1);
    let mut acc = 0u64;
    cdf.push(0);
    for f in &freqs {
        acc += f + 1; // +1: the per-symbol frequency floor
        cdf.push(acc as u32);
    }
    debug_assert_eq!(acc, total);
    Ok(CdfTable {
        precision_bits,
        s_min,
        s_max: s_min + n as i32 - 1,
        cdf,
    })
}

/// Build the coding table for snapped Gaussian parameters over the full
/// symbol range.
pub fn gaussian_cdf_table(q: QuantizedGaussian, scale: &ScaleTable) -> CdfTable {
    let pmf = discretized_gaussian_pmf(q.mu(), q.sigma(scale), SYMBOL_MIN, SYMBOL_MAX)
        .expect("fixed range is valid");
    build_cdf(&pmf, SYMBOL_MIN, PRECISION_BITS).expect("gaussian pmf is valid")
}

/// Build the coding table for snapped mixture parameters.
pub fn gmm_cdf_table(q: &QuantizedGmm, scale: &ScaleTable) -> CdfTable {
    let comps: Vec<(f64, f64, f64)> = q
        .components
        .iter()
        .map(|&(pi, mu_16, sigma_idx)| {
            (
                pi as f64 / 256.0,
                mu_16 as f64 / 16.0,
                scale.value(sigma_idx),
            )
        })
        .collect();
    let pmf = discretized_gmm_pmf(&comps, SYMBOL_MIN, SYMBOL_MAX).expect("weights sum to 1");
    build_cdf(&pmf, SYMBOL_MIN, PRECISION_BITS).expect("gmm pmf is valid")
}

/// Memoizes tables per quantized parameter pair; encode and decode build
/// identical tables because construction is a pure function of the key.
#[derive(Default)]
pub struct TableCache {
    map: HashMap<u32, Arc<CdfTable>>,
}

impl TableCache {
    pub fn new() -> TableCache {
        TableCache {
            map: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&mut self, q: QuantizedGaussian, scale: &ScaleTable) -> Arc<CdfTable> {
        Arc::clone(
            self.map
                .entry(q.cache_key())
                .or_insert_with(|| Arc::new(gaussian_cdf_table(q, scale))),
        )
    }

    /// Tables for a whole parameter slice; missing entries are built in
    /// parallel (construction is pure, so the result is deterministic).
    pub fn get_many(
        &mut self,
        params: &[QuantizedGaussian],
        scale: &ScaleTable,
    ) -> Vec<Arc<CdfTable>> {
        let mut missing: Vec<QuantizedGaussian> = Vec::new();
        let mut seen: HashMap<u32, ()> = HashMap::new();
        for q in params {
            let key = q.cache_key();
            if !self.map.contains_key(&key) && seen.insert(key, ()).is_none() {
                missing.push(*q);
            }
        }
        let built = crate::par::map_indices(missing.len(), missing.len() * 40_000, |i| {
            Arc::new(gaussian_cdf_table(missing[i], scale))
        });
        for (q, table) in missing.iter().zip(built) {
            self.map.insert(q.cache_key(), table);
        }
        params
            .iter()
            .map(|q| Arc::clone(&self.map[&q.cache_key()]))
            .collect()
    }
}

/// Sum of -log2 pmf(symbol) over a slice of symbols (estimated entropy in
/// bits). Symbols must lie within the pmf's range.
pub fn estimate_bits(pmf: &[f64], s_min: i32, symbols: &[i32]) -> Result<f64> {
    let mut bits = 0.0f64;
    for &s in symbols {
        let idx = s - s_min;
        if idx < 0 || idx as usize >= pmf.len() {
            return Err(TensorError::Contract {
                context: "estimate_bits",
                message: format!("symbol {s} outside table range starting at {s_min}"),
            });
        }
        bits += -(pmf[idx as usize].max(MIN_LIKELIHOOD)).log2();
    }
    Ok(bits)
}

/// Estimated bits for one symbol under continuous Gaussian parameters. This
/// is the same interval likelihood the training loss uses.
pub fn gaussian_bits(mu: f64, sigma: f64, symbol: f64) -> f64 {
    let sigma = sigma.max(SIGMA_MIN);
    let upper = normal_cdf((symbol + 0.5 - mu) / sigma);
    let lower = normal_cdf((symbol - 0.5 - mu) / sigma);
    -((upper - lower).max(MIN_LIKELIHOOD)).log2()
}

/// Per-channel factorized prior for the hyper latent: learned location and
/// scale shared by every position in a channel.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl FactorizedPrior {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> FactorizedPrior {
        debug_assert_eq!(mu.len(), sigma.len());
        let sigma = sigma.into_iter().map(|s| s.max(SIGMA_MIN)).collect();
        FactorizedPrior { mu, sigma }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

/// Estimated bits of a quantized hyper latent under the factorized prior.
/// `z` is NCHW with `prior.channels()` channels; values are already rounded.
pub fn factorized_bits(z: &crate::tensor::Tensor, prior: &FactorizedPrior) -> f64 {
    let [n, c, h, w] = z.shape();
    debug_assert_eq!(c, prior.channels());
    let plane = h * w;
    let mut bits = 0.0f64;
    for b in 0..n {
        for ci in 0..c {
            let (mu, sigma) = (prior.mu[ci], prior.sigma[ci]);
            for &v in &z.data()[(b * c + ci) * plane..][..plane] {
                bits += gaussian_bits(mu, sigma, v as f64);
            }
        }
    }
    bits
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: Taylor-series erf, evaluated well inside its
    /// convergence range.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..80 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn unit_gaussian_center_mass() {
        let pmf = discretized_gaussian_pmf(0.0, 1.0, -8, 8).unwrap();
        let expected = erf_series(0.5 / std::f64::consts::SQRT_2); // CDF(0.5)-CDF(-0.5)
        assert!((pmf[8] - expected).abs() < 1e-4, "pmf(0) = {}", pmf[8]);
        assert!((pmf[8] - 0.38292).abs() < 1e-4);
    }

    #[test]
    fn tiny_sigma_concentrates_at_mean() {
        let pmf = discretized_gaussian_pmf(0.0, SIGMA_MIN, -8, 8).unwrap();
        assert!((pmf[8] - 1.0).abs() < 1e-12);
        assert!(pmf.iter().sum::<f64>() > 1.0 - 1e-12);
    }

    #[test]
    fn pmf_symmetry_at_zero_mean() {
        // symbols -S..S: pmf(s) == pmf(-s) to 1e-9
        let pmf = discretized_gaussian_pmf(0.0, 2.37, -64, 64).unwrap();
        let n = pmf.len();
        for i in 0..n {
            assert!((pmf[i] - pmf[n - 1 - i]).abs() < 1e-9, "asymmetric at {i}");
        }
    }

    #[test]
    fn pmf_sums_to_one() {
        for &(mu, sigma) in &[(0.0, 1.0), (3.7, 0.2), (-20.0, 8.0), (100.0, 0.01)] {
            let pmf = discretized_gaussian_pmf(mu, sigma, SYMBOL_MIN, SYMBOL_MAX).unwrap();
            let sum: f64 = pmf.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "sum {sum} for mu={mu} sigma={sigma}");
        }
    }

    #[test]
    fn degenerate_range_rejected() {
        assert!(discretized_gaussian_pmf(0.0, 1.0, 5, 4).is_err());
    }

    #[test]
    fn gmm_single_component_reduces_to_gaussian() {
        let g = discretized_gaussian_pmf(1.3, 0.7, -16, 16).unwrap();
        let m = discretized_gmm_pmf(&[(1.0, 1.3, 0.7)], -16, 16).unwrap();
        assert_eq!(g, m);
    }

    #[test]
    fn gmm_identical_components_collapse() {
        let single = discretized_gaussian_pmf(0.4, 1.1, -16, 16).unwrap();
        let double = discretized_gmm_pmf(&[(0.3, 0.4, 1.1), (0.7, 0.4, 1.1)], -16, 16).unwrap();
        for (a, b) in single.iter().zip(double.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gmm_symmetric_mixture() {
        let pmf = discretized_gmm_pmf(&[(0.5, -2.0, 0.5), (0.5, 2.0, 0.5)], -16, 16).unwrap();
        let at = |s: i32| pmf[(s + 16) as usize];
        assert!((at(-2) - at(2)).abs() < 1e-9);
        assert!((at(-5) - at(5)).abs() < 1e-9);
    }

    #[test]
    fn gmm_weight_validation() {
        assert!(discretized_gmm_pmf(&[(0.5, 0.0, 1.0), (0.6, 0.0, 1.0)], -4, 4).is_err());
        assert!(discretized_gmm_pmf(&[], -4, 4).is_err());
    }

    #[test]
    fn scale_table_shape_and_quantization() {
        let t = ScaleTable::new();
        assert_eq!(t.len(), 64);
        assert_eq!(t.value(0), 0.01);
        assert_eq!(t.value(63), 64.0);
        for i in 1..64 {
            assert!(t.value(i) > t.value(i - 1));
        }
        // nearest-not-below
        assert_eq!(t.quantize_index(0.005), 0); // clamps up to 0.01
        assert_eq!(t.quantize_index(1000.0), 63); // clamps down to 64
        for i in 0..64u8 {
            assert_eq!(t.quantize_index(t.value(i)), i);
            assert_eq!(t.quantize_index(t.value(i) * 0.999), i);
        }
    }

    #[test]
    fn quantize_params_examples() {
        let t = ScaleTable::new();
        let q = quantize_params(0.131, 0.005, &t);
        assert_eq!(q.mu(), 0.125);
        assert_eq!(q.sigma(&t), 0.01);
        // idempotence
        let q2 = quantize_params(q.mu() as f32, q.sigma(&t) as f32, &t);
        assert_eq!(q, q2);
    }

    #[test]
    fn build_cdf_uniform_and_point_mass() {
        let uniform = vec![0.25f64; 4];
        let t = build_cdf(&uniform, 0, 16).unwrap();
        assert_eq!(t.cdf, vec![0, 16384, 32768, 49152, 65536]);

        let point = vec![1.0, 0.0, 0.0];
        let t = build_cdf(&point, -1, 16).unwrap();
        assert_eq!(t.freq(-1), 65534);
        assert_eq!(t.freq(0), 1);
        assert_eq!(t.freq(1), 1);
    }

    #[test]
    fn build_cdf_invariants_fuzzed() {
        let mut rng = crate::rng::SplitMix64::new(77);
        for _ in 0..200 {
            let n = 2 + rng.below(300);
            let mut pmf: Vec<f64> = (0..n).map(|_| rng.next_f64().powi(3)).collect();
            let sum: f64 = pmf.iter().sum();
            pmf.iter_mut().for_each(|p| *p /= sum);
            let t = build_cdf(&pmf, -5, 16).unwrap();
            assert_eq!(*t.cdf.last().unwrap(), 65536);
            assert_eq!(t.cdf[0], 0);
            for i in 1..t.cdf.len() {
                assert!(t.cdf[i] > t.cdf[i - 1], "cdf not strictly increasing");
            }
        }
    }

    #[test]
    fn build_cdf_rejects_bad_input() {
        assert!(build_cdf(&[0.5, -0.5, 1.0], 0, 16).is_err());
        assert!(build_cdf(&[0.5, 0.4], 0, 16).is_err()); // sums to 0.9
        assert!(build_cdf(&[], 0, 16).is_err());
    }

    #[test]
    fn estimate_bits_examples() {
        let uniform = vec![1.0 / 256.0; 256];
        let symbols = vec![7i32; 100];
        assert_eq!(estimate_bits(&uniform, -128, &symbols).unwrap(), 800.0);

        assert_eq!(estimate_bits(&[0.5, 0.5], 0, &[1]).unwrap(), 1.0);

        // reorder invariance
        let pmf = discretized_gaussian_pmf(0.0, 3.0, -32, 32).unwrap();
        let syms: Vec<i32> = (-20..20).collect();
        let mut rev = syms.clone();
        rev.reverse();
        let a = estimate_bits(&pmf, -32, &syms).unwrap();
        let b = estimate_bits(&pmf, -32, &rev).unwrap();
        assert!((a - b).abs() < 1e-9);

        assert!(estimate_bits(&pmf, -32, &[40]).is_err());
    }

    #[test]
    fn factorized_bits_examples() {
        use crate::tensor::Tensor;
        let prior = FactorizedPrior::new(vec![0.0], vec![1.0]);
        let z = Tensor::zeros([1, 1, 4, 4]);
        let per_symbol = gaussian_bits(0.0, 1.0, 0.0);
        let expected = 16.0 * per_symbol;
        assert!((factorized_bits(&z, &prior) - expected).abs() < 1e-9);
        // matches the unit-Gaussian center mass
        assert!((per_symbol - -(0.38292f64.log2())).abs() < 1e-3);

        let empty = Tensor::zeros([1, 1, 0, 0]);
        assert_eq!(factorized_bits(&empty, &prior), 0.0);

        let z2 = Tensor::zeros([2, 1, 4, 4]);
        assert!((factorized_bits(&z2, &prior) - 2.0 * expected).abs() < 1e-9);
    }

    #[test]
    fn tables_identical_via_cache_and_direct() {
        let scale = ScaleTable::new();
        let q = QuantizedGaussian {
            mu_16: 37,
            sigma_idx: 20,
        };
        let direct = gaussian_cdf_table(q, &scale);
        let mut cache = TableCache::new();
        let cached = cache.get(q, &scale);
        let again = cache.get(q, &scale);
        assert_eq!(direct, *cached);
        assert_eq!(*cached, *again);
        assert_eq!(cache.len(), 1);

        // batch path builds the same bytes
        let params = vec![q; 10];
        let mut cache2 = TableCache::new();
        let many = cache2.get_many(&params, &scale);
        assert!(many.iter().all(|t| **t == direct));
    }

    #[test]
    fn gmm_table_deterministic() {
        let scale = ScaleTable::new();
        let q = quantize_gmm_params(
            &[(0.3, -2.0, 0.5), (0.5, 2.0, 0.5), (0.2, 0.0, 4.0)],
            &scale,
        );
        assert_eq!(q.components.iter().map(|c| c.0 as u32).sum::<u32>(), 256);
        let a = gmm_cdf_table(&q, &scale);
        let b = gmm_cdf_table(&q, &scale);
        assert_eq!(a, b);
        assert_eq!(*a.cdf.last().unwrap(), 65536);
    }
}
