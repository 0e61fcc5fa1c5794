//! Log-normal transition law of the underlying, exact GBM sampling and the
//! log-space quadrature stencil every backward engine is built on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::{norm_cdf, norm_pdf, Scalar};

/// Kernel tails are cut at this many standard deviations in log-space.
pub const KERNEL_TRUNCATION_SD: f64 = 8.0;

/// Objective-measure drift, volatility and risk-free rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketParams<T> {
    pub mu: T,
    pub sigma: T,
    pub r: T,
}

impl<T: Scalar> MarketParams<T> {
    pub fn new(mu: T, sigma: T, r: T) -> Result<Self> {
        let p = Self { mu, sigma, r };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(Error::config("market.mu", "must be finite"));
        }
        if !self.r.is_finite() {
            return Err(Error::config("market.r", "must be finite"));
        }
        if !(self.sigma.is_finite() && self.sigma > T::zero()) {
            return Err(Error::config("market.sigma", "must be finite and > 0"));
        }
        Ok(())
    }

    /// Same market with the drift replaced by the risk-free rate.
    pub fn risk_neutral(&self) -> Self {
        Self {
            mu: self.r,
            ..*self
        }
    }

    /// Median drift of ln S per unit time, `mu - sigma^2/2`.
    pub fn log_drift(&self) -> T {
        self.mu - self.sigma * self.sigma / T::lit(2.0)
    }
}

/// Log-normal kernel `rho(s_to, t + dt | s_from, t)`, a density in `s_to`.
pub fn transition_density<T: Scalar>(
    s_from: T,
    s_to: T,
    dt: T,
    params: &MarketParams<T>,
) -> Result<T> {
    if !(s_from > T::zero()) || !(s_to > T::zero()) {
        return Err(Error::Domain(format!(
            "prices must be positive (s_from={s_from}, s_to={s_to})"
        )));
    }
    if !(dt > T::zero()) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let var = params.sigma * params.sigma * dt;
    let z = (s_to / s_from).ln() - params.log_drift() * dt;
    let two = T::lit(2.0);
    Ok((-(z * z) / (two * var)).exp() / (s_to * (two * T::PI() * var).sqrt()))
}

/// Exact one-step GBM move driven by a given standard normal draw.
#[inline]
pub fn step_with_normal<T: Scalar>(s: T, dt: T, params: &MarketParams<T>, z: T) -> T {
    s * (params.log_drift() * dt + params.sigma * dt.sqrt() * z).exp()
}

/// Draws `S(t + dt)` from the log-normal kernel given `S(t) = s`.
pub fn sample_step<T: Scalar, R: Rng + ?Sized>(
    s: T,
    dt: T,
    params: &MarketParams<T>,
    rng: &mut R,
) -> Result<T> {
    if !(s > T::zero()) {
        return Err(Error::Domain(format!("price must be positive, got {s}")));
    }
    if dt < T::zero() {
        return Err(Error::Domain(format!("dt must be non-negative, got {dt}")));
    }
    let z: f64 = rng.sample(StandardNormal);
    Ok(step_with_normal(s, dt, params, T::lit(z)))
}

/// Counter-addressable random stream: `(seed, stream)` fully determines the
/// sequence, so paths can be generated independently and in any order.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// How values are continued past the ends of the S grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Repeat the edge node.
    Flat,
    /// Extend linearly in S from the last two nodes.
    Linear,
}

/// One-step transition weights on a log-uniform S grid.
///
/// The stencil is translation invariant in ln S, so one set of weights serves
/// every row: row `i` sees node `i + offset` with probability `weight`.
#[derive(Debug, Clone)]
pub struct LogStencil<T> {
    pub first_offset: isize,
    pub weights: Vec<T>,
    /// `sum_k w_k exp(k dx)`: the quadrature value of `E[S'/S]`.
    pub growth: T,
    dx: T,
}

impl<T: Scalar> LogStencil<T> {
    /// Stencil for a log-increment with mean `log_drift * dt` and standard
    /// deviation `sigma * sqrt(dt)`.
    ///
    /// The Gaussian is point-sampled on the nodes, with its centre and width
    /// nudged so the discrete weights carry exactly the target mean and
    /// variance (for a well-resolved kernel the nudge is at round-off level).
    /// Kernels too narrow for that fall back to hat-function projection,
    /// which still reproduces mass and mean.
    pub fn new(dx: T, dt: T, log_drift: T, sigma: T) -> Self {
        let mean = log_drift * dt;
        let sd = sigma * dt.sqrt();
        let reach = T::lit(KERNEL_TRUNCATION_SD) * sd;
        let lo = ((mean - reach) / dx).floor().to_isize().unwrap_or(0) - 2;
        let hi = ((mean + reach) / dx).ceil().to_isize().unwrap_or(0) + 2;
        let centres: Vec<T> = (lo..=hi).map(|o| T::from_isize(o).unwrap() * dx).collect();
        let weights = matched_gaussian(&centres, dx, mean, sd).unwrap_or_else(|| {
            centres
                .iter()
                .map(|c| hat_weight(*c, dx, mean, sd))
                .collect()
        });
        // trim exact zeros at both ends
        let start = weights.iter().position(|w| *w > T::zero()).unwrap_or(0);
        let end = weights.iter().rposition(|w| *w > T::zero()).unwrap_or(0);
        let weights: Vec<T> = weights[start..=end].to_vec();
        let first_offset = lo + start as isize;
        let growth = weights
            .iter()
            .enumerate()
            .map(|(n, w)| *w * (T::from_isize(first_offset + n as isize).unwrap() * dx).exp())
            .sum();
        Self {
            first_offset,
            weights,
            growth,
            dx,
        }
    }

    /// Objective-measure stencil (drift `mu`).
    pub fn objective(dx: T, dt: T, params: &MarketParams<T>) -> Self {
        Self::new(dx, dt, params.log_drift(), params.sigma)
    }

    /// Risk-neutral stencil (drift `r`).
    pub fn risk_neutral(dx: T, dt: T, params: &MarketParams<T>) -> Self {
        Self::objective(dx, dt, &params.risk_neutral())
    }

    /// Iterates `(node index clamped to the grid, weight)` for row `i`.
    pub fn neighbours(&self, i: usize, n: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let last = n as isize - 1;
        self.weights.iter().enumerate().map(move |(m, w)| {
            let k = (i as isize + self.first_offset + m as isize).clamp(0, last) as usize;
            (k, *w)
        })
    }

    /// Quadrature of `E[f(S') | S = s_nodes[i]]` with the given continuation
    /// of `values` beyond the grid.
    pub fn expect(&self, values: &[T], s_nodes: &[T], i: usize, boundary: Boundary) -> T {
        let n = values.len() as isize;
        let mut acc = T::zero();
        for (m, w) in self.weights.iter().enumerate() {
            let k = i as isize + self.first_offset + m as isize;
            let v = if (0..n).contains(&k) {
                values[k as usize]
            } else {
                match boundary {
                    Boundary::Flat => values[k.clamp(0, n - 1) as usize],
                    Boundary::Linear => linear_ghost(values, s_nodes, k, self.dx),
                }
            };
            acc = acc + *w * v;
        }
        acc
    }

    /// Quadrature of `E[S' | S = s_nodes[i]]` with the S nodes continued the
    /// same way a density row is (flat at the edges).
    pub fn expect_price_clamped(&self, s_nodes: &[T], i: usize) -> T {
        self.neighbours(i, s_nodes.len())
            .map(|(k, w)| w * s_nodes[k])
            .sum()
    }
}

fn linear_ghost<T: Scalar>(values: &[T], s_nodes: &[T], k: isize, dx: T) -> T {
    let n = values.len();
    let (a, b) = if k < 0 { (0, 1) } else { (n - 1, n - 2) };
    let slope = (values[a] - values[b]) / (s_nodes[a] - s_nodes[b]);
    let steps = if k < 0 { k } else { k - (n as isize - 1) };
    let s_ghost = s_nodes[a] * (T::from_isize(steps).unwrap() * dx).exp();
    values[a] + slope * (s_ghost - s_nodes[a])
}

/// Normalised point samples of a Gaussian whose discrete mean and variance
/// equal `mean` and `sd^2`; `None` when the grid cannot carry that variance.
fn matched_gaussian<T: Scalar>(centres: &[T], dx: T, mean: T, sd: T) -> Option<Vec<T>> {
    let trunc = T::lit(KERNEL_TRUNCATION_SD);
    let min_var = (dx * T::lit(0.3)).powi(2);
    let target_var = sd * sd;
    if target_var < min_var {
        return None;
    }
    let (mut m, mut v) = (mean, target_var);
    let mut weights = vec![T::zero(); centres.len()];
    for _ in 0..60 {
        let s = v.sqrt();
        for (w, c) in weights.iter_mut().zip(centres) {
            let z = (*c - m) / s;
            *w = if z.abs() > trunc {
                T::zero()
            } else {
                (-(z * z) / T::lit(2.0)).exp()
            };
        }
        let total: T = weights.iter().copied().sum();
        weights.iter_mut().for_each(|w| *w = *w / total);
        let dm: T = weights.iter().zip(centres).map(|(w, c)| *w * *c).sum();
        let dv: T = weights
            .iter()
            .zip(centres)
            .map(|(w, c)| *w * (*c - dm) * (*c - dm))
            .sum();
        let (em, ev) = (mean - dm, target_var - dv);
        if em.abs() <= T::epsilon() * dx * T::lit(4.0)
            && ev.abs() <= T::epsilon() * target_var * T::lit(16.0)
        {
            return Some(weights);
        }
        m = m + em;
        v = v + ev;
        if v < min_var {
            return None;
        }
    }
    Some(weights)
}

/// `E[hat_c(X)]` for `X ~ N(mean, sd^2)` and the unit hat of half-width `dx`
/// centred at `c`.
fn hat_weight<T: Scalar>(c: T, dx: T, mean: T, sd: T) -> T {
    // call-like function g(a) = E[(X - a)^+]
    let g = |a: T| -> T {
        if sd <= T::zero() {
            (mean - a).max(T::zero())
        } else {
            let z = (mean - a) / sd;
            (mean - a) * norm_cdf(z) + sd * norm_pdf(z)
        }
    };
    let w = (g(c - dx) - T::lit(2.0) * g(c) + g(c + dx)) / dx;
    w.max(T::zero())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> MarketParams<f64> {
        MarketParams::new(0.1, 0.2, 0.05).unwrap()
    }

    /// Simpson quadrature in log-price: the integrand is Gaussian in ln s_to.
    fn log_quad(f: impl Fn(f64) -> f64, s: f64, dt: f64, p: &MarketParams<f64>) -> f64 {
        let sd = p.sigma * dt.sqrt();
        let centre = s.ln() + p.log_drift() * dt;
        let (a, b) = (centre - 12.0 * sd, centre + 12.0 * sd);
        let n = 4000;
        let h = (b - a) / n as f64;
        let mut acc = 0.0;
        for k in 0..=n {
            let x = a + k as f64 * h;
            let sto = x.exp();
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * f(sto) * transition_density(s, sto, dt, p).unwrap() * sto;
        }
        acc * h / 3.0
    }

    #[test]
    fn density_normalises_and_has_lognormal_mean() {
        let p = params();
        for &(s, dt) in &[(100.0, 0.004), (37.0, 0.5), (250.0, 2.0)] {
            let mass = log_quad(|_| 1.0, s, dt, &p);
            assert!((mass - 1.0).abs() < 1e-8, "mass {mass}");
            let mean = log_quad(|x| x, s, dt, &p);
            let expect = s * (p.mu * dt).exp();
            assert!(((mean - expect) / expect).abs() < 1e-6);
        }
    }

    #[test]
    fn median_is_drift_adjusted() {
        let p = params();
        let (s, dt) = (100.0f64, 0.25f64);
        let cdf = |x: f64| {
            let sd = p.sigma * dt.sqrt();
            let lo = s.ln() + p.log_drift() * dt - 12.0 * sd;
            let n = 4000;
            let h = (x.ln() - lo) / n as f64;
            let mut acc = 0.0;
            for k in 0..=n {
                let y = lo + k as f64 * h;
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                acc += w * transition_density(s, y.exp(), dt, &p).unwrap() * y.exp();
            }
            acc * h
        };
        let (mut a, mut b) = (50.0, 200.0);
        for _ in 0..80 {
            let m = 0.5 * (a + b);
            if cdf(m) < 0.5 {
                a = m
            } else {
                b = m
            }
        }
        let expect = s * (p.log_drift() * dt).exp();
        assert!((0.5 * (a + b) - expect).abs() < 1e-6);
    }

    #[test]
    fn density_rejects_bad_inputs() {
        let p = params();
        assert!(matches!(
            transition_density(0.0, 1.0, 1.0, &p),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            transition_density(1.0, -1.0, 1.0, &p),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            transition_density(1.0, 1.0, 0.0, &p),
            Err(Error::Domain(_))
        ));
        assert!(MarketParams::new(0.1, 0.0, 0.05).is_err());
        assert!(MarketParams::new(f64::NAN, 0.2, 0.05).is_err());
    }

    #[test]
    fn chapman_kolmogorov() {
        for &dt1 in &[0.01, 0.1, 0.5] {
            for &dt2 in &[0.02, 0.25, 1.0] {
                for &sigma in &[0.1, 0.2, 0.4] {
                    let p = MarketParams::new(0.07, sigma, 0.03).unwrap();
                    let (s, s2) = (100.0, 108.0);
                    let composed = log_quad(
                        |mid| transition_density(mid, s2, dt2, &p).unwrap(),
                        s,
                        dt1,
                        &p,
                    );
                    let direct = transition_density(s, s2, dt1 + dt2, &p).unwrap();
                    assert!(
                        (composed - direct).abs() < 1e-6 * direct.max(1e-3),
                        "dt1={dt1} dt2={dt2} sigma={sigma}: {composed} vs {direct}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_vol_step_is_deterministic() {
        let p = MarketParams {
            mu: 0.1,
            sigma: 0.0,
            r: 0.0,
        };
        let mut rng = stream_rng(1, 0);
        let s = sample_step(100.0, 0.5, &p, &mut rng).unwrap();
        assert!((s - 100.0 * (0.05f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let p = params();
        let a = sample_step(100.0, 0.1, &p, &mut stream_rng(7, 3)).unwrap();
        let b = sample_step(100.0, 0.1, &p, &mut stream_rng(7, 3)).unwrap();
        let c = sample_step(100.0, 0.1, &p, &mut stream_rng(7, 4)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a, c);
    }

    #[test]
    fn log_sample_mean_within_four_standard_errors() {
        let p = params();
        let (s, dt) = (100.0, 0.5);
        let n = 1_000_000;
        let mut rng = stream_rng(11, 0);
        let mut sum = 0.0;
        for _ in 0..n {
            sum += sample_step(s, dt, &p, &mut rng).unwrap().ln();
        }
        let mean = sum / n as f64;
        let se = p.sigma * dt.sqrt() / (n as f64).sqrt();
        let expect = s.ln() + p.log_drift() * dt;
        assert!((mean - expect).abs() < 4.0 * se);
    }

    #[test]
    fn samples_pass_kolmogorov_smirnov() {
        let p = params();
        let (s, dt) = (100.0, 0.3);
        let n = 100_000;
        let mut rng = stream_rng(5, 9);
        let mut xs: Vec<f64> = (0..n)
            .map(|_| sample_step(s, dt, &p, &mut rng).unwrap())
            .collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let sd = p.sigma * dt.sqrt();
        let cdf = |x: f64| norm_cdf((x.ln() - s.ln() - p.log_drift() * dt) / sd);
        let d = crate::stats::ks_statistic(&xs, cdf);
        // 1% critical value 1.628 / sqrt(n)
        assert!(d < 1.628 / (n as f64).sqrt(), "KS {d}");
    }

    #[test]
    fn stencil_moments_match_lognormal() {
        let p = params();
        let dt = 1.0 / 250.0;
        for &dx in &[0.005, 0.01, 0.02, 0.05] {
            let st = LogStencil::objective(dx, dt, &p);
            let mass: f64 = st.weights.iter().sum();
            assert!((mass - 1.0).abs() < 1e-14);
            let expect = (p.mu * dt).exp();
            let tol = if dx <= 0.01 {
                1e-10
            } else if dx <= 0.02 {
                1e-8
            } else {
                1e-3
            };
            assert!((st.growth - expect).abs() < tol, "dx={dx}: {}", st.growth);
            let mean: f64 = st
                .weights
                .iter()
                .enumerate()
                .map(|(n, w)| w * (st.first_offset + n as isize) as f64 * dx)
                .sum();
            assert!((mean - p.log_drift() * dt).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_boundary_reproduces_linear_functions() {
        let dx = 0.05;
        let s: Vec<f64> = (0..11)
            .map(|i| 100.0 * ((i as f64 - 5.0) * dx).exp())
            .collect();
        let f: Vec<f64> = s.iter().map(|x| 3.0 * x - 7.0).collect();
        let p = MarketParams::new(0.05, 0.3, 0.05).unwrap();
        let st = LogStencil::objective(dx, 0.1, &p);
        for i in [0, 10] {
            let e = st.expect(&f, &s, i, Boundary::Linear);
            let exact = 3.0 * s[i] * (p.mu * 0.1).exp() - 7.0;
            assert!((e - exact).abs() < 1e-8 * exact.abs());
        }
    }
}
