//! Small statistics kit used by the simulator and the test suites:
//! compensated summation, batch-mean confidence intervals, a jackknife
//! standard error for ratio estimators, and a two-sample
//! Kolmogorov-Smirnov distance.

/// Kahan compensated accumulator. Keeps O(eps) error on sums of millions of
/// terms regardless of magnitude ordering.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut acc = KahanSum::new();
    for &x in xs {
        acc.add(x);
    }
    acc.value() / xs.len() as f64
}

/// Standard error of the sample mean (unbiased variance, n-1 denominator).
pub fn standard_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let mut acc = KahanSum::new();
    for &x in xs {
        let d = x - m;
        acc.add(d * d);
    }
    (acc.value() / ((n - 1) as f64 * n as f64)).sqrt()
}

/// Mean and standard error in one pass over the data.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    (mean(xs), standard_error(xs))
}

/// Ratio of means `sum(num) / sum(den)` with a delete-one jackknife standard
/// error. This is the estimator used for long-run MSE, which is a ratio of
/// per-cycle error integrals to per-cycle durations, where the plain
/// per-cycle ratio would be biased.
pub fn ratio_with_jackknife_se(num: &[f64], den: &[f64]) -> (f64, f64) {
    assert_eq!(num.len(), den.len(), "paired samples required");
    let n = num.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut num_sum = KahanSum::new();
    let mut den_sum = KahanSum::new();
    for i in 0..n {
        num_sum.add(num[i]);
        den_sum.add(den[i]);
    }
    let ns = num_sum.value();
    let ds = den_sum.value();
    let ratio = ns / ds;
    if n < 2 {
        return (ratio, f64::NAN);
    }
    // Delete-one replicates; each drops a single pair from the pooled sums.
    let mut reps = Vec::with_capacity(n);
    for i in 0..n {
        reps.push((ns - num[i]) / (ds - den[i]));
    }
    let rep_mean = mean(&reps);
    let mut acc = KahanSum::new();
    for &r in &reps {
        let d = r - rep_mean;
        acc.add(d * d);
    }
    let var = acc.value() * (n - 1) as f64 / n as f64;
    (ratio, var.sqrt())
}

/// Two-sample Kolmogorov-Smirnov statistic: the supremum distance between
/// the empirical CDFs of `a` and `b`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "samples must be non-empty");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).expect("NaN in KS input"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("NaN in KS input"));
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        let gap = (i as f64 / n as f64 - j as f64 / m as f64).abs();
        if gap > d {
            d = gap;
        }
    }
    d
}

/// Critical KS distance at the 1% significance level for sample sizes
/// `n` and `m` (asymptotic formula, c(0.01) = 1.628).
pub fn ks_critical_1pct(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    1.628 * ((n + m) / (n * m)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_sum_handles_cancellation() {
        // 1 + 1e-16 repeated: naive f64 summation loses the small terms.
        let mut acc = KahanSum::new();
        acc.add(1.0);
        for _ in 0..10_000_000 {
            acc.add(1e-16);
        }
        let expect = 1.0 + 1e-9;
        assert!((acc.value() - expect).abs() < 1e-15);
    }

    #[test]
    fn mean_and_se_match_hand_computation() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let (m, se) = mean_and_se(&xs);
        assert!((m - 2.5).abs() < 1e-15);
        // var = 5/3, se = sqrt(5/3/4)
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ratio_jackknife_constant_ratio_has_zero_se() {
        let num = [2.0, 4.0, 6.0, 8.0];
        let den = [1.0, 2.0, 3.0, 4.0];
        let (r, se) = ratio_with_jackknife_se(&num, &den);
        assert!((r - 2.0).abs() < 1e-15);
        assert!(se.abs() < 1e-12);
    }

    #[test]
    fn ratio_jackknife_se_is_plausible() {
        // num_i = den_i + noise; ratio near 1, se small but nonzero.
        let den = [1.0, 2.0, 1.5, 2.5, 1.2, 1.8, 2.2, 0.9];
        let num = [1.1, 1.9, 1.6, 2.4, 1.3, 1.7, 2.1, 1.0];
        let (r, se) = ratio_with_jackknife_se(&num, &den);
        assert!((r - 1.0).abs() < 0.1);
        assert!(se > 0.0 && se < 0.1);
    }

    #[test]
    fn ks_identical_samples_zero() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(ks_statistic(&a, &a), 0.0);
    }

    #[test]
    fn ks_disjoint_samples_one() {
        let a = [1.0, 2.0, 3.0];
        let b = [10.0, 11.0, 12.0];
        assert!((ks_statistic(&a, &b) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ks_interleaved_small_distance() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..100).map(|i| i as f64 + 0.5).collect();
        let d = ks_statistic(&a, &b);
        assert!(d <= 0.01 + 1e-12, "d = {d}");
    }
}
