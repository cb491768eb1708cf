//! Small statistical helpers shared by the benchmark harness and the
//! validation suites.

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Binomial standard error `sqrt(p (1 - p) / n)`.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Two-sided Kolmogorov-Smirnov statistic of a sample against a CDF.
pub fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    let mut ks: f64 = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let f = cdf(*x);
        ks = ks.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    ks
}

/// KS critical value at significance `alpha` (asymptotic).
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt()
}

/// Chi-squared goodness-of-fit p-value for observed category counts
/// against equal expected frequencies.
pub fn chi2_uniform_pvalue(counts: &[usize]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let k = counts.len();
    let n: usize = counts.iter().sum();
    if k < 2 || n == 0 {
        return f64::NAN;
    }
    let expected = n as f64 / k as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let dist = ChiSquared::new((k - 1) as f64).expect("valid dof");
    1.0 - dist.cdf(stat)
}

/// Mode of a collection of small nonnegative integers; ties resolve to
/// the smallest value.
pub fn mode(xs: &[usize]) -> Option<usize> {
    if xs.is_empty() {
        return None;
    }
    let max = *xs.iter().max().unwrap();
    let mut counts = vec![0usize; max + 1];
    for &x in xs {
        counts[x] += 1;
    }
    counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(v, _)| v)
}

/// Median of a sample (averages the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 5.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn mode_prefers_smallest_on_ties() {
        assert_eq!(mode(&[2, 2, 3, 3, 1]), Some(2));
        assert_eq!(mode(&[4]), Some(4));
        assert_eq!(mode(&[]), None);
    }

    #[test]
    fn chi2_uniform_detects_skew() {
        let uniform = vec![100usize; 10];
        assert!(chi2_uniform_pvalue(&uniform) > 0.9);
        let mut skewed = vec![100usize; 10];
        skewed[0] = 400;
        assert!(chi2_uniform_pvalue(&skewed) < 1e-6);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
