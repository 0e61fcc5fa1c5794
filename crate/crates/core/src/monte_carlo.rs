//! Path simulation of the hedged position: exact GBM paths, the discounted
//! hedging gain along each path and exact sampling of the terminal law.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grids::TimeGrid;
use crate::hedging::HedgeStrategy;
use crate::market::{sample_step, step_with_normal, stream_rng, MarketParams};
use crate::payoff::{sample_terminal, TerminalLaw};
use crate::report::{fmt_num, header};
use crate::scalar::Scalar;
use crate::stats::{central_moments, empirical_quantile, sorted};

/// Terminal-sampling stream ids live in the upper half of the stream space.
const TERMINAL_STREAM: u64 = 1 << 63;

/// Probabilities reported in every summary.
pub const SUMMARY_QUANTILES: [f64; 7] = [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99];

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Pair path `2m + 1` with path `2m` by negating its normals.
    pub antithetic: bool,
}

impl McConfig {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64) -> Self {
        Self {
            n_paths,
            n_steps,
            seed,
            antithetic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 1 {
            return Err(Error::config("mc.n_paths", "must be at least 1"));
        }
        if self.n_steps < 1 {
            return Err(Error::config("mc.n_steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// How terminal values are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TerminalSampling<T> {
    /// Atoms exactly, no blur.
    #[default]
    Exact,
    /// Atoms plus independent Gaussian noise of this standard deviation: the
    /// same law the grid engine starts from.
    Mollified(T),
}

#[derive(Debug, Clone)]
pub struct McResult<T> {
    /// Contract values at `t0`, in path order.
    pub samples: Vec<T>,
    pub mean: T,
    pub variance: T,
    /// Third central moment.
    pub third: T,
    pub skewness: T,
    /// Standard error of the mean (over antithetic pair averages when pairing
    /// is on).
    pub std_error: T,
    pub quantiles: Vec<(T, T)>,
}

impl<T: Scalar> McResult<T> {
    pub fn from_samples(samples: Vec<T>, antithetic: bool) -> Self {
        let (mean, variance, third) = central_moments(&samples);
        let skewness = if variance > T::zero() {
            third / variance.powf(T::lit(1.5))
        } else {
            T::zero()
        };
        let n = samples.len();
        let std_error = if antithetic && n >= 4 {
            let pairs: Vec<T> = samples
                .chunks_exact(2)
                .map(|p| (p[0] + p[1]) * T::lit(0.5))
                .collect();
            let (_, v, _) = central_moments(&pairs);
            (v / T::from_usize_lossy(pairs.len())).sqrt()
        } else {
            (variance / T::from_usize_lossy(n.max(1))).sqrt()
        };
        let sorted = sorted(&samples);
        let quantiles = SUMMARY_QUANTILES
            .iter()
            .map(|p| (T::lit(*p), empirical_quantile(&sorted, T::lit(*p))))
            .collect();
        Self {
            samples,
            mean,
            variance,
            third,
            skewness,
            std_error,
            quantiles,
        }
    }

    pub fn std_dev(&self) -> T {
        self.variance.sqrt()
    }

    pub fn quantile(&self, q: T) -> T {
        empirical_quantile(&sorted(&self.samples), q)
    }

    /// Single-column CSV with header `f`.
    pub fn write_samples_csv<W: Write>(
        &self,
        out: &mut W,
        head: Option<&str>,
    ) -> std::io::Result<()> {
        header(out, head)?;
        writeln!(out, "f")?;
        for x in &self.samples {
            writeln!(out, "{}", fmt_num(*x))?;
        }
        Ok(())
    }
}

/// Exact GBM path on the nodes of `time`, starting at `s0` at `t0`.
pub fn simulate_path<T: Scalar, R: Rng + ?Sized>(
    s0: T,
    time: &TimeGrid<T>,
    params: &MarketParams<T>,
    rng: &mut R,
) -> Result<Vec<T>> {
    if !(s0 > T::zero()) {
        return Err(Error::Domain(format!(
            "initial price must be positive, got {s0}"
        )));
    }
    let dt = time.dt();
    let mut path = Vec::with_capacity(time.n_steps + 1);
    path.push(s0);
    for _ in 0..time.n_steps {
        let s = *path.last().unwrap();
        path.push(sample_step(s, dt, params, rng)?);
    }
    Ok(path)
}

/// Path driven by the normals of `rng`, negated when `mirror` is set.
fn path_from_stream<T: Scalar, R: Rng + ?Sized>(
    s0: T,
    time: &TimeGrid<T>,
    params: &MarketParams<T>,
    rng: &mut R,
    mirror: bool,
) -> Vec<T> {
    let dt = time.dt();
    let mut path = Vec::with_capacity(time.n_steps + 1);
    let mut s = s0;
    path.push(s);
    for _ in 0..time.n_steps {
        let z: f64 = rng.sample(StandardNormal);
        let z = T::lit(if mirror { -z } else { z });
        s = step_with_normal(s, dt, params, z);
        path.push(s);
    }
    path
}

/// Discounted hedging gain `sum_k phi_k (S_{k+1} - S_k e^{r dt}) e^{r (t0 - t_{k+1})}`.
pub fn hedge_pnl<T: Scalar>(
    path: &[T],
    hedge: &HedgeStrategy<T>,
    time: &TimeGrid<T>,
    params: &MarketParams<T>,
) -> Result<T> {
    if path.len() != time.n_steps + 1 {
        return Err(Error::State(format!(
            "path has {} points, time grid has {} nodes",
            path.len(),
            time.n_steps + 1
        )));
    }
    if let HedgeStrategy::Zero = hedge {
        return Ok(T::zero());
    }
    let dt = time.dt();
    let growth = (params.r * dt).exp();
    let step_disc = (-params.r * dt).exp();
    let mut disc = T::one();
    let mut total = T::zero();
    for k in 0..time.n_steps {
        disc = disc * step_disc;
        let phi = hedge.at_time(time.time(k), path[k], time.maturity, params)?;
        total = total + phi * (path[k + 1] - path[k] * growth) * disc;
    }
    Ok(total)
}

/// Contract values at `t0` for `mc.n_paths` paths from `s0`:
/// `e^{-r (T - t0)} F_T - Psi`, with `F_T` drawn from the terminal law at
/// the path's end and `Psi` its hedging gain. Results are in path order and
/// do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn empirical_distribution<T: Scalar>(
    s0: T,
    hedge: &HedgeStrategy<T>,
    terminal: &TerminalLaw<T>,
    mc: &McConfig,
    t0: T,
    maturity: T,
    params: &MarketParams<T>,
    sampling: TerminalSampling<T>,
) -> Result<McResult<T>> {
    mc.validate()?;
    params.validate()?;
    if !(s0 > T::zero()) {
        return Err(Error::Domain(format!(
            "initial price must be positive, got {s0}"
        )));
    }
    let time = TimeGrid::new(t0, maturity, mc.n_steps)?;
    let disc = (-params.r * (maturity - t0)).exp();
    let samples = (0..mc.n_paths)
        .into_par_iter()
        .map(|p| {
            let (stream, mirror) = if mc.antithetic {
                ((p / 2) as u64, p % 2 == 1)
            } else {
                (p as u64, false)
            };
            let mut rng = stream_rng(mc.seed, stream);
            let path = path_from_stream(s0, &time, params, &mut rng, mirror);
            let psi = hedge_pnl(&path, hedge, &time, params)?;
            let mut trng = stream_rng(mc.seed, TERMINAL_STREAM | p as u64);
            let mut f_t = sample_terminal(terminal, path[mc.n_steps], &mut trng)?;
            if let TerminalSampling::Mollified(w) = sampling {
                let z: f64 = trng.sample(StandardNormal);
                f_t = f_t + w * T::lit(z);
            }
            Ok(disc * f_t - psi)
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(McResult::from_samples(samples, mc.antithetic))
}
