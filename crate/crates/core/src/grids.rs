//! Discretisation of the (S, F, t) space and the conditional density container.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::payoff::TerminalLaw;
use crate::scalar::Scalar;

/// Rows whose mass differs from one by more than this are rejected by the
/// quantile and moment extractors.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-3;

/// User-facing grid request; `build_grids` turns it into validated grids.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig<T> {
    pub s_min: T,
    pub s_max: T,
    pub n_s: usize,
    /// Optional lower bound of the F axis; always widened to cover the payoff.
    pub f_min: Option<T>,
    pub f_max: Option<T>,
    pub n_f: usize,
    /// Extra F room on each side, as a fraction of the payoff range.
    pub margin: T,
    pub t0: T,
    pub maturity: T,
    pub n_steps: usize,
}

impl<T: Scalar> GridConfig<T> {
    pub fn new(s_min: T, s_max: T, n_s: usize, n_f: usize, maturity: T, n_steps: usize) -> Self {
        Self {
            s_min,
            s_max,
            n_s,
            f_min: None,
            f_max: None,
            n_f,
            margin: T::lit(0.2),
            t0: T::zero(),
            maturity,
            n_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<T> {
    pub t0: T,
    pub maturity: T,
    pub n_steps: usize,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn new(t0: T, maturity: T, n_steps: usize) -> Result<Self> {
        if !(t0.is_finite() && maturity.is_finite() && maturity > t0) {
            return Err(Error::config("time.maturity", "must exceed time.t0"));
        }
        if n_steps == 0 {
            return Err(Error::config("time.n_steps", "must be at least 1"));
        }
        Ok(Self {
            t0,
            maturity,
            n_steps,
        })
    }

    pub fn dt(&self) -> T {
        (self.maturity - self.t0) / T::from_usize_lossy(self.n_steps)
    }

    /// Time of node `k`, `0 <= k <= n_steps`.
    pub fn time(&self, k: usize) -> T {
        if k == self.n_steps {
            self.maturity
        } else {
            self.t0 + self.dt() * T::from_usize_lossy(k)
        }
    }
}

/// Log-uniform S nodes and uniform F nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGrid<T> {
    pub s_nodes: Vec<T>,
    pub log_s: Vec<T>,
    pub dx: T,
    pub f_nodes: Vec<T>,
    pub df: T,
}

impl<T: Scalar> SpaceGrid<T> {
    pub fn new(s_min: T, s_max: T, n_s: usize, f_min: T, f_max: T, n_f: usize) -> Result<Self> {
        if !(s_min > T::zero()) {
            return Err(Error::config("grid.s_min", "must be positive"));
        }
        if !(s_max > s_min) {
            return Err(Error::config(
                "grid.s_min",
                format!("must be below grid.s_max (s_min={s_min}, s_max={s_max})"),
            ));
        }
        if n_s < 3 {
            return Err(Error::config(
                "grid.n_s",
                format!("needs at least 3 nodes, got {n_s}"),
            ));
        }
        if n_f < 3 {
            return Err(Error::config(
                "grid.n_f",
                format!("needs at least 3 nodes, got {n_f}"),
            ));
        }
        if !(f_max > f_min) {
            return Err(Error::config("grid.f_min", "must be below grid.f_max"));
        }
        let (x0, x1) = (s_min.ln(), s_max.ln());
        let dx = (x1 - x0) / T::from_usize_lossy(n_s - 1);
        let log_s: Vec<T> = (0..n_s)
            .map(|i| {
                if i == n_s - 1 {
                    x1
                } else {
                    x0 + dx * T::from_usize_lossy(i)
                }
            })
            .collect();
        let mut s_nodes: Vec<T> = log_s.iter().map(|x| x.exp()).collect();
        s_nodes[0] = s_min;
        s_nodes[n_s - 1] = s_max;
        let df = (f_max - f_min) / T::from_usize_lossy(n_f - 1);
        let f_nodes = (0..n_f)
            .map(|j| {
                if j == n_f - 1 {
                    f_max
                } else {
                    f_min + df * T::from_usize_lossy(j)
                }
            })
            .collect();
        Ok(Self {
            s_nodes,
            log_s,
            dx,
            f_nodes,
            df,
        })
    }

    pub fn n_s(&self) -> usize {
        self.s_nodes.len()
    }

    pub fn n_f(&self) -> usize {
        self.f_nodes.len()
    }

    pub fn f_min(&self) -> T {
        self.f_nodes[0]
    }

    pub fn f_max(&self) -> T {
        self.f_nodes[self.n_f() - 1]
    }

    /// Fractional F index of a contract value.
    pub fn f_position(&self, f: T) -> T {
        (f - self.f_min()) / self.df
    }

    /// Index of the S node closest to `s` in log distance.
    pub fn nearest_s_index(&self, s: T) -> usize {
        let p = ((s.ln() - self.log_s[0]) / self.dx).round();
        p.max(T::zero()).to_usize().unwrap_or(0).min(self.n_s() - 1)
    }
}

/// Builds the time and space grids. The F axis is the union of the requested
/// range and the payoff range over `[s_min, s_max]`, padded by `margin`.
pub fn build_grids<T: Scalar>(
    config: &GridConfig<T>,
    law: &TerminalLaw<T>,
) -> Result<(TimeGrid<T>, SpaceGrid<T>)> {
    let time = TimeGrid::new(config.t0, config.maturity, config.n_steps)?;
    if !(config.margin >= T::zero()) {
        return Err(Error::config("grid.margin", "must be non-negative"));
    }
    // validate the S axis before the payoff is evaluated on it
    let probe = SpaceGrid::new(
        config.s_min,
        config.s_max,
        config.n_s,
        T::zero(),
        T::one(),
        config.n_f,
    )?;
    let (mut lo, mut hi) = match law.payoff_range(&probe.s_nodes) {
        Some((a, b)) => {
            let span = if b > a {
                b - a
            } else {
                config.s_max - config.s_min
            };
            let pad = config.margin * span;
            (a - pad, b + pad)
        }
        None => (T::infinity(), T::neg_infinity()),
    };
    if let Some(f) = config.f_min {
        lo = lo.min(f);
    }
    if let Some(f) = config.f_max {
        hi = hi.max(f);
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::config(
            "grid.f_min",
            "F range undetermined; set grid.f_min and grid.f_max",
        ));
    }
    let space = SpaceGrid::new(config.s_min, config.s_max, config.n_s, lo, hi, config.n_f)?;
    Ok((time, space))
}

/// Trapezoid integral of samples with uniform spacing.
pub fn trapezoid<T: Scalar>(values: &[T], h: T) -> T {
    match values.len() {
        0 | 1 => T::zero(),
        n => {
            let inner: T = values[1..n - 1].iter().copied().sum();
            h * (inner + (values[0] + values[n - 1]) / T::lit(2.0))
        }
    }
}

/// Cumulative trapezoid mass at each node.
pub fn cumulative<T: Scalar>(values: &[T], h: T) -> Vec<T> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = T::zero();
    out.push(acc);
    for w in values.windows(2) {
        acc = acc + h * (w[0] + w[1]) / T::lit(2.0);
        out.push(acc);
    }
    out
}

/// Quantile of a density row: the smallest F whose (linearly interpolated)
/// discrete CDF reaches `q` times the row mass.
pub fn quantile_of_row<T: Scalar>(values: &[T], f_min: T, h: T, q: T) -> Result<T> {
    if !(q > T::zero() && q < T::one()) {
        return Err(Error::Domain(format!(
            "quantile level must lie in (0,1), got {q}"
        )));
    }
    let cdf = cumulative(values, h);
    let mass = *cdf.last().unwrap_or(&T::zero());
    if (mass - T::one()).abs() > T::lit(NORMALIZATION_TOLERANCE) {
        return Err(Error::State(format!("row not normalised (mass {mass})")));
    }
    let target = q * mass;
    let j = cdf.partition_point(|c| *c < target);
    if j == 0 {
        return Ok(f_min);
    }
    let (c0, c1) = (cdf[j - 1], cdf[j]);
    let frac = (target - c0) / (c1 - c0);
    Ok(f_min + h * (T::from_usize_lossy(j - 1) + frac))
}

/// Discrete conditional density `P(F_j | S_i, t)` on a shared space grid.
#[derive(Debug, Clone)]
pub struct ConditionalPdf<T> {
    grid: Arc<SpaceGrid<T>>,
    values: Vec<T>,
    time: T,
}

impl<T: Scalar> ConditionalPdf<T> {
    /// Wraps row-major values (`n_s` rows of `n_f`).
    pub fn new(grid: Arc<SpaceGrid<T>>, values: Vec<T>, time: T) -> Result<Self> {
        if values.len() != grid.n_s() * grid.n_f() {
            return Err(Error::State(format!(
                "density has {} values, grid needs {}",
                values.len(),
                grid.n_s() * grid.n_f()
            )));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !(**v >= T::zero()) || !v.is_finite())
        {
            return Err(Error::State(format!(
                "density entry {v} is negative or not finite"
            )));
        }
        Ok(Self { grid, values, time })
    }

    pub(crate) fn from_parts_unchecked(grid: Arc<SpaceGrid<T>>, values: Vec<T>, time: T) -> Self {
        Self { grid, values, time }
    }

    pub fn grid(&self) -> &SpaceGrid<T> {
        &self.grid
    }

    pub fn shared_grid(&self) -> Arc<SpaceGrid<T>> {
        Arc::clone(&self.grid)
    }

    pub fn time(&self) -> T {
        self.time
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.grid.n_f();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks(self.grid.n_f())
    }

    pub fn row_integral(&self, i: usize) -> T {
        trapezoid(self.row(i), self.grid.df)
    }

    pub fn row_quantile(&self, i: usize, q: T) -> Result<T> {
        quantile_of_row(self.row(i), self.grid.f_min(), self.grid.df, q)
    }

    /// Linearly interpolated CDF of row `i` at `f`.
    pub fn row_cdf_at(&self, i: usize, f: T) -> T {
        let cdf = cumulative(self.row(i), self.grid.df);
        interp_nodes(&cdf, self.grid.f_position(f))
    }

    /// Divides every row by its mass; returns the masses before scaling.
    pub fn normalize_rows(&mut self) -> Vec<T> {
        let (n, h) = (self.grid.n_f(), self.grid.df);
        self.values
            .chunks_mut(n)
            .map(|row| {
                let m = trapezoid(row, h);
                if m > T::zero() {
                    row.iter_mut().for_each(|v| *v = *v / m);
                }
                m
            })
            .collect()
    }

    /// Writes `s,f,p` rows, row-major in s.
    pub fn write_csv<W: std::io::Write>(
        &self,
        out: &mut W,
        header: Option<&str>,
    ) -> std::io::Result<()> {
        if let Some(h) = header {
            writeln!(out, "# {h}")?;
        }
        writeln!(out, "s,f,p")?;
        for (i, row) in self.rows().enumerate() {
            let s = crate::report::fmt_num(self.grid.s_nodes[i]);
            for (j, p) in row.iter().enumerate() {
                writeln!(
                    out,
                    "{s},{},{}",
                    crate::report::fmt_num(self.grid.f_nodes[j]),
                    crate::report::fmt_num(*p)
                )?;
            }
        }
        Ok(())
    }
}

/// Linear interpolation of node values at a fractional index, clamped to the
/// end values outside the grid.
pub fn interp_nodes<T: Scalar>(nodes: &[T], pos: T) -> T {
    let n = nodes.len();
    if pos <= T::zero() {
        return nodes[0];
    }
    let last = T::from_usize_lossy(n - 1);
    if pos >= last {
        return nodes[n - 1];
    }
    let m = pos.floor();
    let a = pos - m;
    let m = m.to_usize().unwrap_or(0);
    nodes[m] * (T::one() - a) + nodes[m + 1] * a
}
