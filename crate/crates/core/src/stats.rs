//! Sample statistics and Kolmogorov–Smirnov distances.

use crate::scalar::Scalar;

/// Two-sided KS statistic of sorted samples against a continuous CDF.
pub fn ks_statistic<T: Scalar>(sorted: &[T], cdf: impl Fn(T) -> T) -> T {
    let n = T::from_usize_lossy(sorted.len());
    let mut d = T::zero();
    for (i, x) in sorted.iter().enumerate() {
        let c = cdf(*x);
        let below = T::from_usize_lossy(i) / n;
        let above = T::from_usize_lossy(i + 1) / n;
        d = d.max((c - below).abs()).max((above - c).abs());
    }
    d
}

/// Sorts a copy of the samples (NaNs last).
pub fn sorted<T: Scalar>(samples: &[T]) -> Vec<T> {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Greater));
    v
}

/// Empirical quantile of sorted samples: the smallest sample whose empirical
/// CDF reaches `q`.
pub fn empirical_quantile<T: Scalar>(sorted: &[T], q: T) -> T {
    if sorted.is_empty() {
        return T::nan();
    }
    let n = sorted.len();
    let rank = (q * T::from_usize_lossy(n)).ceil().to_usize().unwrap_or(1);
    sorted[rank.clamp(1, n) - 1]
}

/// Mean, variance and third central moment (population normalisation).
pub fn central_moments<T: Scalar>(samples: &[T]) -> (T, T, T) {
    let n = T::from_usize_lossy(samples.len());
    let mean = samples.iter().copied().sum::<T>() / n;
    let (mut m2, mut m3) = (T::zero(), T::zero());
    for x in samples {
        let d = *x - mean;
        m2 = m2 + d * d;
        m3 = m3 + d * d * d;
    }
    (mean, m2 / n, m3 / n)
}
