//! Integer CDF tables for range coding, built from per-channel Gaussians.
//!
//! Encoder and decoder must agree bit-exactly, so all table arithmetic is
//! integer-only once the per-symbol probabilities are computed.

use super::gaussian::{interval_probability, norm_cdf};
use crate::tensor::SIGMA_FLOOR;
use crate::{Error, Result};

/// Symbol support: integers in [SYMBOL_MIN, SYMBOL_MAX].
pub const SYMBOL_MIN: i32 = -64;
pub const SYMBOL_MAX: i32 = 63;
pub const NUM_SYMBOLS: usize = (SYMBOL_MAX - SYMBOL_MIN + 1) as usize;

/// CDF precision: counts sum to exactly 2^16.
pub const CDF_BITS: u32 = 16;
pub const CDF_TOTAL: u32 = 1 << CDF_BITS;

/// Cumulative counts for one channel: `cdf[0] = 0`, `cdf[NUM_SYMBOLS] =
/// CDF_TOTAL`, strictly increasing so every symbol has frequency >= 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelCdf {
    cdf: Vec<u32>,
}

impl ChannelCdf {
    /// Discretized zero-mean Gaussian over the support, tails folded into
    /// the edge symbols. The continuous bin masses are scaled to integer
    /// counts with a floor of 1 per symbol; the rounding residue lands on
    /// the largest bin where its relative effect is smallest.
    pub fn from_gaussian(sigma: f64) -> ChannelCdf {
        let sigma = sigma.max(SIGMA_FLOOR);
        let mut probs = [0.0f64; NUM_SYMBOLS];
        for (idx, p) in probs.iter_mut().enumerate() {
            let k = SYMBOL_MIN + idx as i32;
            *p = if k == SYMBOL_MIN {
                norm_cdf((f64::from(k) + 0.5) / sigma)
            } else if k == SYMBOL_MAX {
                1.0 - norm_cdf((f64::from(k) - 0.5) / sigma)
            } else {
                interval_probability((f64::from(k) - 0.5) / sigma, (f64::from(k) + 0.5) / sigma)
            };
        }
        let mut counts = [0u32; NUM_SYMBOLS];
        for (c, p) in counts.iter_mut().zip(probs.iter()) {
            *c = ((p * f64::from(CDF_TOTAL)) as u32).max(1);
        }
        let sum: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        let largest = (0..NUM_SYMBOLS).max_by_key(|&i| counts[i]).expect("non-empty");
        // Floor rounding keeps the raw sum at or below 2^16; the +1 floors
        // add at most NUM_SYMBOLS, and the largest bin holds far more than
        // that, so the adjustment below can never drive it to zero.
        let target = u64::from(CDF_TOTAL);
        if sum > target {
            counts[largest] -= (sum - target) as u32;
        } else {
            counts[largest] += (target - sum) as u32;
        }
        Self::from_counts(&counts)
    }

    /// Build directly from per-symbol counts. Counts must be positive and
    /// sum to CDF_TOTAL; violations are construction bugs.
    pub fn from_counts(counts: &[u32; NUM_SYMBOLS]) -> ChannelCdf {
        let mut cdf = Vec::with_capacity(NUM_SYMBOLS + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for &c in counts {
            assert!(c >= 1, "CDF bin with zero frequency");
            acc = acc.checked_add(c).expect("CDF counts overflow");
            cdf.push(acc);
        }
        assert_eq!(acc, CDF_TOTAL, "CDF counts must total 2^{CDF_BITS}");
        ChannelCdf { cdf }
    }

    /// (cumulative-low, frequency) for a symbol, as the coder consumes it.
    pub fn span(&self, symbol: i32) -> Result<(u32, u32)> {
        let idx = symbol_index(symbol)?;
        Ok((self.cdf[idx], self.cdf[idx + 1] - self.cdf[idx]))
    }

    pub fn freq(&self, symbol: i32) -> Result<u32> {
        Ok(self.span(symbol)?.1)
    }

    /// Symbol whose cumulative span contains `cum`. `cum` < CDF_TOTAL.
    pub fn find(&self, cum: u32) -> i32 {
        debug_assert!(cum < CDF_TOTAL);
        // partition_point: first idx with cdf[idx] > cum; symbol is idx-1.
        let idx = self.cdf.partition_point(|&c| c <= cum) - 1;
        SYMBOL_MIN + idx as i32
    }

    /// Information content of a symbol under this table, in bits.
    pub fn symbol_bits(&self, symbol: i32) -> Result<f64> {
        let f = self.freq(symbol)?;
        Ok(-(f64::from(f) / f64::from(CDF_TOTAL)).log2())
    }

    /// Probability of the most likely symbol.
    pub fn mode_probability(&self) -> f64 {
        let best = (0..NUM_SYMBOLS).map(|i| self.cdf[i + 1] - self.cdf[i]).max().expect("non-empty");
        f64::from(best) / f64::from(CDF_TOTAL)
    }
}

pub fn symbol_index(symbol: i32) -> Result<usize> {
    if !(SYMBOL_MIN..=SYMBOL_MAX).contains(&symbol) {
        return Err(Error::Invalid(format!(
            "symbol {symbol} outside coder support [{SYMBOL_MIN}, {SYMBOL_MAX}]"
        )));
    }
    Ok((symbol - SYMBOL_MIN) as usize)
}

/// Per-channel entropy parameters of the latent distribution.
#[derive(Clone, Debug)]
pub struct LikelihoodModel {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl LikelihoodModel {
    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<LikelihoodModel> {
        if mu.len() != log_sigma.len() || mu.is_empty() {
            return Err(Error::Invalid(format!(
                "entropy model wants matching non-empty mu/log-sigma, got {} and {}",
                mu.len(),
                log_sigma.len()
            )));
        }
        if mu.iter().chain(log_sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("entropy model parameters must be finite".into()));
        }
        Ok(LikelihoodModel { mu, log_sigma })
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self, channel: usize) -> f64 {
        self.log_sigma[channel].exp().max(SIGMA_FLOOR)
    }

    /// Continuous discretized-Gaussian probability of quantized value `v`
    /// for a channel; `v` sits on the integer grid offset by the channel
    /// mean.
    pub fn bin_probability(&self, channel: usize, v: f64) -> f64 {
        super::gaussian::bin_probability(v, self.mu[channel], self.sigma(channel))
    }

    /// One integer CDF table per channel.
    pub fn tables(&self) -> Vec<ChannelCdf> {
        (0..self.channels()).map(|c| ChannelCdf::from_gaussian(self.sigma(c))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_are_strictly_increasing_and_total_is_exact() {
        for sigma in [0.005, 0.01, 0.3, 1.0, 7.0, 40.0] {
            let t = ChannelCdf::from_gaussian(sigma);
            assert_eq!(t.cdf[0], 0);
            assert_eq!(t.cdf[NUM_SYMBOLS], CDF_TOTAL);
            for i in 0..NUM_SYMBOLS {
                assert!(t.cdf[i + 1] > t.cdf[i], "sigma {sigma}: flat bin at {i}");
            }
        }
    }

    #[test]
    fn unit_gaussian_center_bin_matches_the_oracle() {
        // Exact oracle for the continuous likelihood.
        let m = LikelihoodModel::new(vec![0.0], vec![0.0]).unwrap();
        assert!((m.bin_probability(0, 0.0) - 0.3829249225480262).abs() < 1e-12);
        // The integer table additionally pays the min-frequency floor for
        // every tail symbol out of the mode's mass.
        let t = ChannelCdf::from_gaussian(1.0);
        let p = f64::from(t.freq(0).unwrap()) / f64::from(CDF_TOTAL);
        let slack = (NUM_SYMBOLS as f64 + 1.0) / f64::from(CDF_TOTAL);
        assert!((p - 0.3829249225480262).abs() < slack, "p = {p}");
    }

    #[test]
    fn continuous_likelihood_is_symmetric_and_normalized() {
        let m = LikelihoodModel::new(vec![0.0], vec![0.37]).unwrap();
        for k in 0..=SYMBOL_MAX {
            let a = m.bin_probability(0, f64::from(k));
            let b = m.bin_probability(0, f64::from(-k));
            assert!((a - b).abs() < 1e-12, "k={k}");
        }
        // Tail folding: edge bins absorb everything beyond the support.
        let sigma = m.sigma(0);
        let mut total = norm_cdf((f64::from(SYMBOL_MIN) + 0.5) / sigma);
        for k in SYMBOL_MIN + 1..SYMBOL_MAX {
            total += m.bin_probability(0, f64::from(k));
        }
        total += 1.0 - norm_cdf((f64::from(SYMBOL_MAX) - 0.5) / sigma);
        assert!((total - 1.0).abs() < 1e-9, "total {total}");
    }

    #[test]
    fn zero_mean_table_is_symmetric() {
        let t = ChannelCdf::from_gaussian(2.3);
        // The largest-bin adjustment gets the rounding residue, so allow it
        // one count of slack against its mirror.
        for k in 1..SYMBOL_MAX {
            let a = t.freq(k).unwrap();
            let b = t.freq(-k).unwrap();
            assert!(a.abs_diff(b) <= 1, "k={k}: {a} vs {b}");
        }
    }

    #[test]
    fn find_inverts_span() {
        let t = ChannelCdf::from_gaussian(0.7);
        for k in SYMBOL_MIN..=SYMBOL_MAX {
            let (low, freq) = t.span(k).unwrap();
            assert_eq!(t.find(low), k);
            assert_eq!(t.find(low + freq - 1), k);
        }
        assert_eq!(t.find(0), SYMBOL_MIN);
        assert_eq!(t.find(CDF_TOTAL - 1), SYMBOL_MAX);
    }

    #[test]
    fn floor_sigma_concentrates_on_the_mode() {
        let t = ChannelCdf::from_gaussian(0.0);
        let p = t.mode_probability();
        // 127 tail symbols keep 1 count each; everything else is the mode.
        assert_eq!(p, f64::from(CDF_TOTAL - (NUM_SYMBOLS as u32 - 1)) / f64::from(CDF_TOTAL));
        assert!(-p.log2() < 0.06, "mode cost {} bits", -p.log2());
    }

    #[test]
    fn out_of_support_symbols_are_rejected() {
        let t = ChannelCdf::from_gaussian(1.0);
        assert!(t.span(64).is_err());
        assert!(t.span(-65).is_err());
        let msg = t.span(200).unwrap_err().to_string();
        assert!(msg.contains("200") && msg.contains("support"), "{msg}");
    }

    #[test]
    fn model_sigma_applies_the_floor() {
        let m = LikelihoodModel::new(vec![0.0, 0.1], vec![-9.0, 0.5]).unwrap();
        assert_eq!(m.sigma(0), 0.01);
        assert!((m.sigma(1) - 0.5f64.exp()).abs() < 1e-15);
        assert!(LikelihoodModel::new(vec![0.0], vec![f64::NAN]).is_err());
        assert!(LikelihoodModel::new(vec![0.0], vec![]).is_err());
    }

    #[test]
    fn information_content_of_equiprobable_symbols() {
        // Symbols at exactly 1/4 and 1/2 probability cost exactly 2 and 1
        // bits, and N draws of a quarter-probability symbol cost 2N.
        let mut counts = [1u32; NUM_SYMBOLS];
        counts[symbol_index(0).unwrap()] = CDF_TOTAL / 2;
        counts[symbol_index(1).unwrap()] = CDF_TOTAL / 4;
        counts[symbol_index(2).unwrap()] = CDF_TOTAL / 4 - (NUM_SYMBOLS as u32 - 3);
        let t = ChannelCdf::from_counts(&counts);
        assert_eq!(t.symbol_bits(0).unwrap(), 1.0);
        assert_eq!(t.symbol_bits(1).unwrap(), 2.0);
        let n_draws: f64 = (0..5).map(|_| t.symbol_bits(1).unwrap()).sum();
        assert_eq!(n_draws, 10.0);
    }
}
