//! Bjontegaard deltas between two rate-distortion curves.
//!
//! Each curve is a set of (rate, metric) points. Metric deltas integrate a
//! least-squares polynomial (degree 3, or n-1 for shorter curves) of metric
//! against log rate over the shared log-rate interval; rate deltas swap the
//! axes and report the average rate ratio as a percentage.

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BdResult {
    /// Average metric difference (test minus anchor), or percent rate change
    /// for [`bd_rate`] where negative means the test curve spends fewer bits.
    pub value: f64,
    /// Integration interval on the independent axis (log rate for metric
    /// deltas, metric value for rate deltas).
    pub overlap: (f64, f64),
    /// False when either curve is not strictly monotone; the delta is still
    /// reported, callers decide whether to warn.
    pub monotone: bool,
}

fn validate(points: &[(f64, f64)], who: &str) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::Invalid(format!(
            "{who} curve has {} point(s); Bjontegaard deltas need at least 3",
            points.len()
        )));
    }
    for &(r, m) in points {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::Invalid(format!("{who} curve has non-positive rate {r}")));
        }
        if !m.is_finite() {
            return Err(Error::Invalid(format!("{who} curve has non-finite metric {m}")));
        }
    }
    Ok(())
}

fn strictly_monotone(points: &[(f64, f64)]) -> bool {
    let mut sorted: Vec<_> = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    sorted.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1)
}

/// Least-squares polynomial fit about the mean of `xs`. Centering keeps the
/// normal equations well conditioned for metric values in the tens.
fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Result<(Vec<f64>, f64)> {
    let n = degree + 1;
    let center = xs.iter().sum::<f64>() / xs.len() as f64;
    let mut ata = vec![0.0f64; n * n];
    let mut atb = vec![0.0f64; n];
    for (&x, &y) in xs.iter().zip(ys) {
        let u = x - center;
        let mut pow = vec![1.0f64; n];
        for k in 1..n {
            pow[k] = pow[k - 1] * u;
        }
        for i in 0..n {
            atb[i] += pow[i] * y;
            for j in 0..n {
                ata[i * n + j] += pow[i] * pow[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting; systems are at most 4x4.
    let mut coeffs = atb;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| ata[a * n + col].abs().total_cmp(&ata[b * n + col].abs()))
            .unwrap();
        if ata[pivot * n + col].abs() < 1e-12 {
            return Err(Error::Invalid(
                "rate-distortion points are degenerate; polynomial fit is singular".into(),
            ));
        }
        if pivot != col {
            for j in 0..n {
                ata.swap(col * n + j, pivot * n + j);
            }
            coeffs.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = ata[row * n + col] / ata[col * n + col];
            for j in col..n {
                ata[row * n + j] -= f * ata[col * n + j];
            }
            coeffs[row] -= f * coeffs[col];
        }
    }
    for col in (0..n).rev() {
        for row in 0..col {
            let f = ata[row * n + col] / ata[col * n + col];
            coeffs[row] -= f * coeffs[col];
        }
        coeffs[col] /= ata[col * n + col];
    }
    Ok((coeffs, center))
}

/// Definite integral of the fitted polynomial over [lo, hi] in original x.
fn integrate(coeffs: &[f64], center: f64, lo: f64, hi: f64) -> f64 {
    let (a, b) = (lo - center, hi - center);
    let mut total = 0.0;
    let (mut pa, mut pb) = (a, b);
    for (k, &c) in coeffs.iter().enumerate() {
        total += c / (k + 1) as f64 * (pb - pa);
        pa *= a;
        pb *= b;
    }
    total
}

fn average_curve_gap(
    anchor: &[(f64, f64)],
    test: &[(f64, f64)],
) -> Result<(f64, (f64, f64), bool)> {
    let span = |pts: &[(f64, f64)]| {
        let lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (alo, ahi) = span(anchor);
    let (tlo, thi) = span(test);
    let lo = alo.max(tlo);
    let hi = ahi.min(thi);
    if !(lo < hi) {
        return Err(Error::Invalid(format!(
            "curves do not overlap on the integration axis ([{alo:.4}, {ahi:.4}] vs \
             [{tlo:.4}, {thi:.4}])"
        )));
    }
    let fit = |pts: &[(f64, f64)]| -> Result<f64> {
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let (coeffs, center) = polyfit(&xs, &ys, 3.min(pts.len() - 1))?;
        Ok(integrate(&coeffs, center, lo, hi))
    };
    let avg = (fit(test)? - fit(anchor)?) / (hi - lo);
    let monotone = strictly_monotone(anchor) && strictly_monotone(test);
    Ok((avg, (lo, hi), monotone))
}

/// Average metric gain of `test` over `anchor` at equal rate. Points are
/// (rate, metric) with rate in any positive unit.
pub fn bd_metric(anchor: &[(f64, f64)], test: &[(f64, f64)]) -> Result<BdResult> {
    validate(anchor, "anchor")?;
    validate(test, "test")?;
    let to_log: fn(&(f64, f64)) -> (f64, f64) = |&(r, m)| (r.ln(), m);
    let a: Vec<_> = anchor.iter().map(to_log).collect();
    let t: Vec<_> = test.iter().map(to_log).collect();
    let (value, overlap, monotone) = average_curve_gap(&a, &t)?;
    Ok(BdResult { value, overlap, monotone })
}

/// Average percent rate change of `test` against `anchor` at equal metric.
/// Negative means the test curve reaches the same quality with fewer bits.
pub fn bd_rate(anchor: &[(f64, f64)], test: &[(f64, f64)]) -> Result<BdResult> {
    validate(anchor, "anchor")?;
    validate(test, "test")?;
    let swap: fn(&(f64, f64)) -> (f64, f64) = |&(r, m)| (m, r.ln());
    let a: Vec<_> = anchor.iter().map(swap).collect();
    let t: Vec<_> = test.iter().map(swap).collect();
    let (avg_log_ratio, overlap, monotone) = average_curve_gap(&a, &t)?;
    Ok(BdResult { value: (avg_log_ratio.exp() - 1.0) * 100.0, overlap, monotone })
}
