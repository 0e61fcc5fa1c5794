//! Hedging strategies and the two optimisers: the variance-minimising hedge
//! and the stepwise quantile-maximising hedge.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evolution::{sweep_with, EvolutionOptions, EvolutionReport};
use crate::grids::{interp_nodes, ConditionalPdf, SpaceGrid, TimeGrid};
use crate::market::{Boundary, LogStencil, MarketParams};
use crate::moments::{bs_closed_form, pdf_moments, s_derivative};
use crate::report::{fmt_num, header};
use crate::scalar::Scalar;

/// Hedge positions tabulated on S nodes, one row per time step. Row `k`
/// holds the position kept from `times[k]` to the next node.
#[derive(Debug, Clone)]
pub struct HedgeTable<T> {
    pub times: Vec<T>,
    pub s_nodes: Vec<T>,
    log_s: Vec<T>,
    pub values: Vec<Vec<T>>,
}

impl<T: Scalar> HedgeTable<T> {
    pub fn new(times: Vec<T>, s_nodes: Vec<T>, values: Vec<Vec<T>>) -> Result<Self> {
        if s_nodes.len() < 2 || s_nodes.iter().any(|s| !(*s > T::zero())) {
            return Err(Error::config(
                "hedge.table",
                "needs at least two positive S nodes",
            ));
        }
        if s_nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("hedge.table", "S nodes must increase"));
        }
        if values.len() != times.len() {
            return Err(Error::config(
                "hedge.table",
                format!("{} rows for {} times", values.len(), times.len()),
            ));
        }
        for row in &values {
            if row.len() != s_nodes.len() {
                return Err(Error::config(
                    "hedge.table",
                    format!("row of {} values for {} S nodes", row.len(), s_nodes.len()),
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("hedge.table", "values must be finite"));
            }
        }
        let log_s = s_nodes.iter().map(|s| s.ln()).collect();
        Ok(Self {
            times,
            s_nodes,
            log_s,
            values,
        })
    }

    /// Position at price `s` for step `k`: linear in ln S, flat beyond the
    /// first and last node.
    pub fn at(&self, k: usize, s: T) -> T {
        let x = s.ln();
        let ls = &self.log_s;
        let n = ls.len();
        let row = &self.values[k.min(self.values.len() - 1)];
        if x <= ls[0] {
            return row[0];
        }
        if x >= ls[n - 1] {
            return row[n - 1];
        }
        let hi = ls.partition_point(|v| *v <= x).min(n - 1);
        let lo = hi - 1;
        let a = (x - ls[lo]) / (ls[hi] - ls[lo]);
        row[lo] + (row[hi] - row[lo]) * a
    }

    /// Writes `t,s,phi`.
    pub fn write_csv<W: Write>(&self, out: &mut W, head: Option<&str>) -> std::io::Result<()> {
        crate::report::write_surface(out, head, "phi", &self.times, &self.s_nodes, &self.values)
    }
}

/// Shares of the underlying held per short contract, as a function of
/// price and time.
#[derive(Debug, Clone)]
pub enum HedgeStrategy<T> {
    Zero,
    Constant(T),
    /// Black–Scholes call delta for the given strike, at the market's `r`
    /// and `sigma`.
    BlackScholesDelta {
        strike: T,
    },
    Tabulated(Arc<HedgeTable<T>>),
}

impl<T: Scalar> HedgeStrategy<T> {
    pub fn tabulated(table: HedgeTable<T>) -> Self {
        HedgeStrategy::Tabulated(Arc::new(table))
    }

    /// Checks a tabulated strategy covers every step of `time`.
    pub fn check_dimensions(&self, time: &TimeGrid<T>, _grid: &SpaceGrid<T>) -> Result<()> {
        match self {
            HedgeStrategy::Tabulated(t) => {
                if t.values.len() != time.n_steps {
                    return Err(Error::config(
                        "hedge.table",
                        format!("{} rows for {} time steps", t.values.len(), time.n_steps),
                    ));
                }
                Ok(())
            }
            HedgeStrategy::Constant(c) if !c.is_finite() => {
                Err(Error::config("hedge.phi", "must be finite"))
            }
            HedgeStrategy::BlackScholesDelta { strike } if !(*strike > T::zero()) => {
                Err(Error::config("hedge.strike", "must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Position at price `s` held over step `k` (from node `k`).
    pub fn at(&self, k: usize, s: T, time: &TimeGrid<T>, params: &MarketParams<T>) -> Result<T> {
        match self {
            HedgeStrategy::Tabulated(t) => Ok(t.at(k, s)),
            _ => self.at_time(time.time(k), s, time.maturity, params),
        }
    }

    /// Position at price `s` and time `t`; a tabulated strategy uses the
    /// row of the latest tabulated time not after `t`.
    pub fn at_time(&self, t: T, s: T, maturity: T, params: &MarketParams<T>) -> Result<T> {
        Ok(match self {
            HedgeStrategy::Zero => T::zero(),
            HedgeStrategy::Constant(c) => *c,
            HedgeStrategy::BlackScholesDelta { strike } => {
                let tau = maturity - t;
                if tau > T::zero() {
                    bs_closed_form(s, *strike, tau, params)?.1
                } else if s > *strike {
                    T::one()
                } else {
                    T::zero()
                }
            }
            HedgeStrategy::Tabulated(table) => {
                let slack = T::lit(1e-9) * (T::one() + t.abs());
                let k = table.times.partition_point(|x| *x <= t + slack);
                table.at(k.saturating_sub(1), s)
            }
        })
    }

    /// Positions at every S node for step `k`.
    pub fn row(
        &self,
        k: usize,
        time: &TimeGrid<T>,
        grid: &SpaceGrid<T>,
        params: &MarketParams<T>,
    ) -> Result<Vec<T>> {
        match self {
            HedgeStrategy::Tabulated(t)
                if t.s_nodes.len() == grid.n_s() && t.s_nodes == grid.s_nodes =>
            {
                Ok(t.values[k.min(t.values.len() - 1)].clone())
            }
            _ => grid
                .s_nodes
                .iter()
                .map(|s| self.at(k, *s, time, params))
                .collect(),
        }
    }

    /// The strategy evaluated on the grid, one row per step.
    pub fn to_table(
        &self,
        time: &TimeGrid<T>,
        grid: &SpaceGrid<T>,
        params: &MarketParams<T>,
    ) -> Result<HedgeTable<T>> {
        let values = (0..time.n_steps)
            .map(|k| self.row(k, time, grid, params))
            .collect::<Result<Vec<_>>>()?;
        HedgeTable::new(
            (0..time.n_steps).map(|k| time.time(k)).collect(),
            grid.s_nodes.clone(),
            values,
        )
    }
}

/// The variance-minimising hedge and the mean surface it is the slope of.
#[derive(Debug, Clone)]
pub struct VarianceMinHedge<T> {
    pub strategy: HedgeStrategy<T>,
    /// Risk-neutral discounted expectation of the terminal mean,
    /// `[time node][S node]`.
    pub mean_surface: Vec<Vec<T>>,
}

/// Propagates the terminal mean back under the risk-neutral kernel and
/// takes its S-slope at every node as the hedge.
pub fn variance_min_hedge<T: Scalar>(
    terminal_mean: &[T],
    time: &TimeGrid<T>,
    grid: &SpaceGrid<T>,
    params: &MarketParams<T>,
) -> Result<VarianceMinHedge<T>> {
    params.validate()?;
    let n_s = grid.n_s();
    if terminal_mean.len() != n_s || terminal_mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::State(format!(
            "terminal mean must hold {n_s} finite values"
        )));
    }
    let n = time.n_steps;
    let st = LogStencil::risk_neutral(grid.dx, time.dt(), params);
    let disc = (-params.r * time.dt()).exp();
    let s = &grid.s_nodes;
    let mut surface = vec![Vec::new(); n + 1];
    surface[n] = terminal_mean.to_vec();
    for k in (0..n).rev() {
        surface[k] = (0..n_s)
            .map(|i| disc * st.expect(&surface[k + 1], s, i, Boundary::Linear))
            .collect();
    }
    let values = (0..n).map(|k| s_derivative(&surface[k], s)).collect();
    let table = HedgeTable::new((0..n).map(|k| time.time(k)).collect(), s.clone(), values)?;
    Ok(VarianceMinHedge {
        strategy: HedgeStrategy::tabulated(table),
        mean_surface: surface,
    })
}

/// Variance floor reached by the variance-minimising hedge: the terminal
/// variance carried back under the objective kernel and discounted at `2r`.
pub fn min_variance_surface<T: Scalar>(
    v_terminal: &[T],
    time: &TimeGrid<T>,
    grid: &SpaceGrid<T>,
    params: &MarketParams<T>,
) -> Result<Vec<Vec<T>>> {
    params.validate()?;
    let n_s = grid.n_s();
    if v_terminal.len() != n_s || v_terminal.iter().any(|v| !v.is_finite() || *v < T::zero()) {
        return Err(Error::State(format!(
            "terminal variance must hold {n_s} finite non-negative values"
        )));
    }
    let n = time.n_steps;
    let st = LogStencil::objective(grid.dx, time.dt(), params);
    let disc = (-T::lit(2.0) * params.r * time.dt()).exp();
    let mut surface = vec![Vec::new(); n + 1];
    surface[n] = v_terminal.to_vec();
    for k in (0..n).rev() {
        surface[k] = (0..n_s)
            .map(|i| disc * st.expect(&surface[k + 1], &grid.s_nodes, i, Boundary::Flat))
            .collect();
    }
    Ok(surface)
}

/// Default threshold on `d ln P / dF` below which the quantile condition is
/// treated as degenerate.
pub const DEFAULT_EPSILON_DENOM: f64 = 1e-6;

/// Relative density floor inside logarithms.
pub const LOG_FLOOR_RELATIVE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct QuantileStep<T> {
    pub phi: Vec<T>,
    /// Quantile of each row of the slice the step was computed from.
    pub f_q: Vec<T>,
    pub degenerate: Vec<bool>,
}

impl<T> QuantileStep<T> {
    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|d| **d).count()
    }
}

/// Quantile-maximising positions for the step ending at `pdf_next`,
/// computed from the log-density slopes at each row's q-quantile.
///
/// A node is degenerate when `d ln P / dF` at the quantile does not exceed
/// `epsilon_denom`: there the stationary point is not a maximum, or does not
/// exist. Degenerate nodes take `fallback[i]`, or without a fallback the
/// value of the nearest regular node.
pub fn quantile_hedge_step<T: Scalar>(
    pdf_next: &ConditionalPdf<T>,
    q: T,
    params: &MarketParams<T>,
    epsilon_denom: T,
    fallback: Option<&[T]>,
) -> Result<QuantileStep<T>> {
    params.validate()?;
    if !(q > T::zero() && q < T::one()) {
        return Err(Error::config(
            "run.q",
            format!("must lie in (0, 1), got {q}"),
        ));
    }
    let grid = pdf_next.grid();
    let n_s = grid.n_s();
    if let Some(f) = fallback {
        if f.len() != n_s {
            return Err(Error::State(format!(
                "fallback row has {} entries, grid has {n_s} S nodes",
                f.len()
            )));
        }
    }
    let f_q: Vec<T> = (0..n_s)
        .map(|i| pdf_next.row_quantile(i, q))
        .collect::<Result<_>>()?;
    let floors: Vec<T> = pdf_next
        .rows()
        .map(|r| r.iter().copied().fold(T::zero(), T::max) * T::lit(LOG_FLOOR_RELATIVE))
        .collect();
    let h = grid.df;
    let s = &grid.s_nodes;
    let log_at = |row: usize, f: T, floor: T| -> T {
        (interp_nodes(pdf_next.row(row), grid.f_position(f)) + floor).ln()
    };
    let drift_term = |i: usize| (params.mu - params.r) / (params.sigma * params.sigma * s[i]);
    let raw: Vec<Option<T>> = (0..n_s)
        .into_par_iter()
        .map(|i| {
            let fq = f_q[i];
            let floor = floors[i];
            let d_f = (log_at(i, fq + h, floor) - log_at(i, fq - h, floor)) / (T::lit(2.0) * h);
            if !(d_f > epsilon_denom) {
                return None;
            }
            let (a, b) = if i == 0 {
                (0, 1)
            } else if i == n_s - 1 {
                (n_s - 2, n_s - 1)
            } else {
                (i - 1, i + 1)
            };
            let d_s = if a + 2 == b {
                let vals = [
                    log_at(a, fq, floor),
                    log_at(i, fq, floor),
                    log_at(b, fq, floor),
                ];
                s_derivative(&vals, &s[a..=b])[1]
            } else {
                (log_at(b, fq, floor) - log_at(a, fq, floor)) / (s[b] - s[a])
            };
            let phi = -(drift_term(i) + d_s) / d_f;
            phi.is_finite().then_some(phi)
        })
        .collect();
    let degenerate: Vec<bool> = raw.iter().map(|r| r.is_none()).collect();
    let phi = match fallback {
        Some(f) => raw.iter().zip(f).map(|(r, fb)| r.unwrap_or(*fb)).collect(),
        None => {
            let regular: Vec<usize> = (0..n_s).filter(|i| raw[*i].is_some()).collect();
            if regular.is_empty() {
                return Err(Error::State(format!(
                    "quantile condition is degenerate at every S node of the slice at t={} and no fallback was given",
                    pdf_next.time()
                )));
            }
            (0..n_s)
                .map(|i| {
                    raw[i].unwrap_or_else(|| {
                        let p = regular.partition_point(|j| *j < i);
                        let j = if p == 0 {
                            regular[0]
                        } else if p == regular.len() {
                            regular[p - 1]
                        } else if regular[p] - i < i - regular[p - 1] {
                            regular[p]
                        } else {
                            regular[p - 1]
                        };
                        raw[j].unwrap()
                    })
                })
                .collect()
        }
    };
    Ok(QuantileStep {
        phi,
        f_q,
        degenerate,
    })
}

#[derive(Debug, Clone)]
pub struct QuantileOptions<T> {
    pub epsilon_denom: T,
    /// Strategy used at degenerate nodes; `None` uses the variance-minimising
    /// hedge of the terminal mean.
    pub fallback: Option<HedgeStrategy<T>>,
    pub evolution: EvolutionOptions,
}

impl<T: Scalar> Default for QuantileOptions<T> {
    fn default() -> Self {
        Self {
            epsilon_denom: T::lit(DEFAULT_EPSILON_DENOM),
            fallback: None,
            evolution: EvolutionOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuantileDp<T> {
    pub strategy: HedgeStrategy<T>,
    pub report: EvolutionReport<T>,
    /// q-quantile of every row at every time node, `[time node][S node]`.
    pub quantile_surface: Vec<Vec<T>>,
    /// Degenerate nodes per step.
    pub degenerate_per_step: Vec<usize>,
}

impl<T: Scalar> QuantileDp<T> {
    /// Writes `step,time,degenerate`.
    pub fn write_degeneracy_csv<W: Write>(
        &self,
        out: &mut W,
        head: Option<&str>,
        time: &TimeGrid<T>,
    ) -> std::io::Result<()> {
        header(out, head)?;
        writeln!(out, "step,time,degenerate")?;
        for (k, d) in self.degenerate_per_step.iter().enumerate() {
            writeln!(out, "{k},{},{d}", fmt_num(time.time(k)))?;
        }
        Ok(())
    }
}

/// Backward dynamic programme: the position for each step is read off the
/// already evolved slice at the end of that step, then the slice is stepped
/// back with it.
pub fn quantile_dp<T: Scalar>(
    terminal: &ConditionalPdf<T>,
    q: T,
    time: &TimeGrid<T>,
    params: &MarketParams<T>,
    options: &QuantileOptions<T>,
) -> Result<QuantileDp<T>> {
    let grid = terminal.grid();
    let n = time.n_steps;
    let fallback = match &options.fallback {
        Some(f) => {
            f.check_dimensions(time, grid)?;
            f.clone()
        }
        None => {
            let means: Vec<T> = pdf_moments(terminal)?.iter().map(|m| m.mean).collect();
            variance_min_hedge(&means, time, grid, params)?.strategy
        }
    };
    let mut rows = vec![Vec::new(); n];
    let mut quantiles = vec![Vec::new(); n + 1];
    let mut degenerate = vec![0; n];
    let report = sweep_with(terminal, time, params, &options.evolution, |k, next| {
        let fb = fallback.row(k, time, grid, params)?;
        let step = quantile_hedge_step(next, q, params, options.epsilon_denom, Some(&fb))?;
        degenerate[k] = step.degenerate_count();
        quantiles[k + 1] = step.f_q;
        rows[k] = step.phi.clone();
        Ok(step.phi)
    })?;
    let initial = report.initial();
    quantiles[0] = (0..grid.n_s())
        .map(|i| initial.row_quantile(i, q))
        .collect::<Result<_>>()?;
    let table = HedgeTable::new(
        (0..n).map(|k| time.time(k)).collect(),
        grid.s_nodes.clone(),
        rows,
    )?;
    Ok(QuantileDp {
        strategy: HedgeStrategy::tabulated(table),
        report,
        quantile_surface: quantiles,
        degenerate_per_step: degenerate,
    })
}
