//! Backward evolution of conditional densities under a hedging strategy.
//!
//! [`backward_step`] is the reference transfer operator; [`pde_step`] is an
//! explicit finite-difference stepper for the equivalent PDE.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grids::{trapezoid, ConditionalPdf, SpaceGrid, TimeGrid};
use crate::hedging::HedgeStrategy;
use crate::interp::{FRemap, PreparedRow};
use crate::market::{LogStencil, MarketParams};
use crate::scalar::Scalar;

/// Largest mass a single row may lose off the F grid in one step.
pub const MAX_STEP_LEAKAGE: f64 = 0.01;

/// Values below this fraction of the row maximum are dropped (and tallied as
/// leakage) to keep row supports from creeping across the whole grid.
pub const CHOP_RELATIVE: f64 = 1e-15;

/// Which time slices a sweep keeps. The terminal and initial slices are
/// always kept.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Retain {
    #[default]
    Ends,
    All,
    /// Time-node indices (0 = t0, n_steps = maturity).
    Nodes(Vec<usize>),
}

impl Retain {
    fn keeps(&self, node: usize, n_steps: usize) -> bool {
        node == 0
            || node == n_steps
            || match self {
                Retain::Ends => false,
                Retain::All => true,
                Retain::Nodes(v) => v.contains(&node),
            }
    }
}

#[derive(Debug, Clone)]
pub struct EvolutionOptions {
    pub remap: FRemap,
    /// Rescale every row to unit mass after each step.
    pub renormalize: bool,
    pub retain: Retain,
}

impl Default for EvolutionOptions {
    fn default() -> Self {
        Self {
            remap: FRemap::default(),
            renormalize: true,
            retain: Retain::Ends,
        }
    }
}

/// Result of one backward step.
#[derive(Debug, Clone)]
pub struct StepOutcome<T> {
    pub pdf: ConditionalPdf<T>,
    /// Mass lost off the F grid, per S row.
    pub leakage: Vec<T>,
    /// Largest `|mass_out + leakage - mass_in|` over rows, before any
    /// renormalisation.
    pub mass_deviation: T,
}

#[derive(Debug, Clone)]
pub struct EvolutionReport<T> {
    /// Retained slices, latest time first.
    pub slices: Vec<ConditionalPdf<T>>,
    /// Time-node index of each retained slice.
    pub slice_nodes: Vec<usize>,
    /// Worst row leakage of the step from node `k + 1` to node `k`.
    pub leakage_per_step: Vec<T>,
    pub mass_deviation_per_step: Vec<T>,
    pub renormalized: bool,
}

impl<T: Scalar> EvolutionReport<T> {
    /// Slice at `t0`.
    pub fn initial(&self) -> &ConditionalPdf<T> {
        self.slices.last().expect("a sweep always retains t0")
    }

    pub fn terminal(&self) -> &ConditionalPdf<T> {
        &self.slices[0]
    }

    pub fn slice_at_node(&self, node: usize) -> Option<&ConditionalPdf<T>> {
        self.slice_nodes
            .iter()
            .position(|n| *n == node)
            .map(|k| &self.slices[k])
    }

    pub fn total_leakage(&self) -> T {
        self.leakage_per_step.iter().copied().sum()
    }

    /// Writes `step,time,leakage`; `step` k is the step ending at node k.
    pub fn write_leakage_csv<W: std::io::Write>(
        &self,
        out: &mut W,
        header: Option<&str>,
        time: &TimeGrid<T>,
    ) -> std::io::Result<()> {
        crate::report::write_step_series(out, header, "leakage", time, &self.leakage_per_step)
    }
}

/// One backward step prepared for evaluating rows individually.
pub struct RowStepper<'a, T> {
    grid: &'a SpaceGrid<T>,
    stencil: LogStencil<T>,
    prepared: Vec<PreparedRow<'a, T>>,
    masses: Vec<T>,
    growth: T,
    /// `d mean / d S` of the later density at the low and high S edges.
    edge_slopes: (T, T),
}

impl<'a, T: Scalar> RowStepper<'a, T> {
    pub fn new(
        pdf_next: &'a ConditionalPdf<T>,
        dt: T,
        params: &MarketParams<T>,
        remap: FRemap,
    ) -> Result<Self> {
        params.validate()?;
        if !(dt > T::zero()) {
            return Err(Error::Domain(format!(
                "step length must be positive, got {dt}"
            )));
        }
        let grid = pdf_next.grid();
        let h = grid.df;
        let masses: Vec<T> = pdf_next.rows().map(|row| trapezoid(row, h)).collect();
        let mean = |i: usize| {
            let first: T = pdf_next
                .row(i)
                .iter()
                .zip(&grid.f_nodes)
                .map(|(p, f)| *p * *f)
                .sum();
            if masses[i] > T::zero() {
                first * h / masses[i]
            } else {
                T::zero()
            }
        };
        let s = &grid.s_nodes;
        let n = grid.n_s();
        let edge_slopes = if n < 2 {
            (T::zero(), T::zero())
        } else {
            (
                (mean(1) - mean(0)) / (s[1] - s[0]),
                (mean(n - 1) - mean(n - 2)) / (s[n - 1] - s[n - 2]),
            )
        };
        Ok(Self {
            grid,
            stencil: LogStencil::objective(grid.dx, dt, params),
            prepared: pdf_next
                .rows()
                .map(|row| PreparedRow::new(row, remap))
                .collect(),
            masses,
            growth: (params.r * dt).exp(),
            edge_slopes,
        })
    }

    /// Unnormalised row `i` at the earlier time when holding `phi` shares,
    /// with its leakage and mass-balance error.
    pub fn row(&self, i: usize, phi: T) -> (Vec<T>, T, T) {
        let grid = self.grid;
        let (n_s, n_f) = (grid.n_s(), grid.n_f());
        let s = &grid.s_nodes;
        let h = grid.df;
        let c = self.growth;
        let shift0 = (c - T::one()) * grid.f_min();
        let mut out = vec![T::zero(); n_f];
        let mut leak = T::zero();
        let mut mass_in = T::zero();
        let last = n_s as isize - 1;
        for (m, w) in self.stencil.weights.iter().copied().enumerate() {
            // Beyond the S grid the edge row is translated along F by the
            // linearly extrapolated row mean.
            let raw = i as isize + self.stencil.first_offset + m as isize;
            let k = raw.clamp(0, last) as usize;
            let (s_k, drift) = if raw == k as isize {
                (s[k], T::zero())
            } else {
                let ghost = s[k] * (T::from_isize(raw - k as isize).unwrap() * grid.dx).exp();
                let slope = if raw < 0 {
                    self.edge_slopes.0
                } else {
                    self.edge_slopes.1
                };
                (ghost, slope * (ghost - s[k]))
            };
            let a = phi * (s_k - c * s[i]);
            let p0 = (shift0 + a - drift) / h;
            let row = &self.prepared[k];
            row.accumulate(p0, c, w, &mut out);
            leak = leak + w * (self.masses[k] - row.covered(p0, c, n_f) * h);
            mass_in = mass_in + w * self.masses[k];
        }
        let peak = out.iter().copied().fold(T::zero(), T::max);
        let floor = peak * T::lit(CHOP_RELATIVE);
        let mut chopped = T::zero();
        for v in out.iter_mut() {
            if *v < floor {
                chopped = chopped + *v;
                *v = T::zero();
            }
        }
        leak = leak + chopped * h;
        let deviation = (trapezoid(&out, h) + leak - mass_in).abs();
        (out, leak, deviation)
    }

    /// Row `i` rescaled to unit mass.
    pub fn normalized_row(&self, i: usize, phi: T) -> Result<Vec<T>> {
        let (mut row, _, _) = self.row(i, phi);
        let mass = trapezoid(&row, self.grid.df);
        if !(mass > T::zero()) {
            return Err(Error::Numerical(format!(
                "row S={} has no mass left",
                self.grid.s_nodes[i]
            )));
        }
        row.iter_mut().for_each(|v| *v = *v / mass);
        Ok(row)
    }
}

/// One backward step of length `dt`: the density at `t - dt` from the one at
/// `t`, holding `phi_row[i]` shares at S node `i` over the step.
pub fn backward_step<T: Scalar>(
    pdf_next: &ConditionalPdf<T>,
    phi_row: &[T],
    dt: T,
    params: &MarketParams<T>,
    options: &EvolutionOptions,
) -> Result<StepOutcome<T>> {
    let grid = pdf_next.grid();
    let n_s = grid.n_s();
    if phi_row.len() != n_s {
        return Err(Error::State(format!(
            "hedge row has {} entries, grid has {} S nodes",
            phi_row.len(),
            n_s
        )));
    }
    if let Some(bad) = phi_row.iter().find(|p| !p.is_finite()) {
        return Err(Error::Numerical(format!("non-finite hedge value {bad}")));
    }
    let stepper = RowStepper::new(pdf_next, dt, params, options.remap)?;
    let rows: Vec<(Vec<T>, T, T)> = (0..n_s)
        .into_par_iter()
        .map(|i| stepper.row(i, phi_row[i]))
        .collect();

    let s = &grid.s_nodes;
    let mut values = Vec::with_capacity(n_s * grid.n_f());
    let mut leakage = Vec::with_capacity(n_s);
    let mut mass_deviation = T::zero();
    for (i, (row, leak, dev)) in rows.into_iter().enumerate() {
        if leak > T::lit(MAX_STEP_LEAKAGE) {
            return Err(Error::Numerical(format!(
                "row S={} lost {} of its mass off the F grid [{}, {}] in one step; widen the F range",
                s[i],
                leak,
                grid.f_min(),
                grid.f_max()
            )));
        }
        values.extend(row);
        leakage.push(leak);
        mass_deviation = mass_deviation.max(dev);
    }
    let mut pdf =
        ConditionalPdf::from_parts_unchecked(pdf_next.shared_grid(), values, pdf_next.time() - dt);
    if options.renormalize {
        let masses = pdf.normalize_rows();
        if let Some(i) = masses.iter().position(|m| !(*m > T::zero())) {
            return Err(Error::Numerical(format!("row S={} has no mass left", s[i])));
        }
    }
    Ok(StepOutcome {
        pdf,
        leakage,
        mass_deviation,
    })
}

/// Evolves `terminal` (at maturity) back to `t0`, evaluating the hedge at
/// the start of each step.
pub fn backward_sweep<T: Scalar>(
    terminal: &ConditionalPdf<T>,
    hedge: &HedgeStrategy<T>,
    time: &TimeGrid<T>,
    params: &MarketParams<T>,
    options: &EvolutionOptions,
) -> Result<EvolutionReport<T>> {
    hedge.check_dimensions(time, terminal.grid())?;
    sweep_with(terminal, time, params, options, |k, _| {
        hedge.row(k, time, terminal.grid(), params)
    })
}

/// Sweep whose hedge row for step `k` (node `k + 1` to `k`) is produced from
/// the slice at node `k + 1`.
pub(crate) fn sweep_with<T: Scalar, H>(
    terminal: &ConditionalPdf<T>,
    time: &TimeGrid<T>,
    params: &MarketParams<T>,
    options: &EvolutionOptions,
    mut hedge_row: H,
) -> Result<EvolutionReport<T>>
where
    H: FnMut(usize, &ConditionalPdf<T>) -> Result<Vec<T>>,
{
    let n = time.n_steps;
    let tol = T::lit(1e-9) * (T::one() + time.maturity.abs());
    if (terminal.time() - time.maturity).abs() > tol {
        return Err(Error::State(format!(
            "terminal slice is at t={}, maturity is {}",
            terminal.time(),
            time.maturity
        )));
    }
    let dt = time.dt();
    let mut slices = vec![terminal.clone()];
    let mut slice_nodes = vec![n];
    let mut leakage_per_step = vec![T::zero(); n];
    let mut mass_deviation_per_step = vec![T::zero(); n];
    let mut current = terminal.clone();
    for k in (0..n).rev() {
        let phi = hedge_row(k, &current)?;
        let step = backward_step(&current, &phi, dt, params, options)?;
        leakage_per_step[k] = step.leakage.iter().copied().fold(T::zero(), T::max);
        mass_deviation_per_step[k] = step.mass_deviation;
        current = step.pdf;
        // pin the slice time to the grid node to avoid drift from repeated subtraction
        current = ConditionalPdf::from_parts_unchecked(
            current.shared_grid(),
            current.values().to_vec(),
            time.time(k),
        );
        if options.retain.keeps(k, n) {
            slices.push(current.clone());
            slice_nodes.push(k);
        }
    }
    Ok(EvolutionReport {
        slices,
        slice_nodes,
        leakage_per_step,
        mass_deviation_per_step,
        renormalized: options.renormalize,
    })
}

/// Largest explicit step [`pde_step`] accepts for the given hedge row.
pub fn pde_stable_dt<T: Scalar>(grid: &SpaceGrid<T>, phi_row: &[T], params: &MarketParams<T>) -> T {
    let s_max = grid.s_nodes[grid.n_s() - 1];
    let phi_max = phi_row.iter().fold(T::one(), |m, p| m.max(p.abs()));
    let m = grid.dx.min(grid.df / (s_max * phi_max));
    T::lit(0.25) * m * m / (params.sigma * params.sigma)
}

/// One explicit backward step of the density PDE in `(ln S, F)`, with
/// central differences. Zero density beyond the F grid, edge rows repeated
/// beyond the S grid.
pub fn pde_step<T: Scalar>(
    pdf: &ConditionalPdf<T>,
    phi_row: &[T],
    params: &MarketParams<T>,
    dt_sub: T,
) -> Result<ConditionalPdf<T>> {
    params.validate()?;
    let grid = pdf.grid();
    let (n_s, n_f) = (grid.n_s(), grid.n_f());
    if phi_row.len() != n_s {
        return Err(Error::State(format!(
            "hedge row has {} entries, grid has {} S nodes",
            phi_row.len(),
            n_s
        )));
    }
    if !(dt_sub > T::zero()) {
        return Err(Error::Domain(format!(
            "step length must be positive, got {dt_sub}"
        )));
    }
    let limit = pde_stable_dt(grid, phi_row, params);
    if dt_sub > limit {
        return Err(Error::config(
            "time.n_steps",
            format!("explicit PDE step {dt_sub} exceeds the stability limit {limit}"),
        ));
    }
    let (mu, r, sigma) = (params.mu, params.r, params.sigma);
    let var = sigma * sigma;
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let (dx, df) = (grid.dx, grid.df);
    let p = pdf.values();
    let at = |i: isize, j: isize| -> T {
        if j < 0 || j >= n_f as isize {
            return T::zero();
        }
        let i = i.clamp(0, n_s as isize - 1) as usize;
        p[i * n_f + j as usize]
    };
    let f_at = |j: isize| grid.f_min() + T::from_isize(j).unwrap() * df;
    let out: Vec<Vec<T>> = (0..n_s)
        .into_par_iter()
        .map(|i| {
            let s = grid.s_nodes[i];
            let phi = phi_row[i];
            let ii = i as isize;
            (0..n_f)
                .map(|j| {
                    let jj = j as isize;
                    let c = at(ii, jj);
                    let (fp, fm) = (at(ii, jj + 1), at(ii, jj - 1));
                    let (xp, xm) = (at(ii + 1, jj), at(ii - 1, jj));
                    let flux_p = (f_at(jj + 1) - phi * s) * fp;
                    let flux_m = (f_at(jj - 1) - phi * s) * fm;
                    let d_flux = (flux_p - flux_m) / (two * df);
                    let p_f = (fp - fm) / (two * df);
                    let p_ff = (fp - two * c + fm) / (df * df);
                    let p_x = (xp - xm) / (two * dx);
                    let p_xx = (xp - two * c + xm) / (dx * dx);
                    let p_xf = (at(ii + 1, jj + 1) - at(ii + 1, jj - 1) - at(ii - 1, jj + 1)
                        + at(ii - 1, jj - 1))
                        / (T::lit(4.0) * dx * df);
                    let generator = r * d_flux
                        + mu * phi * s * p_f
                        + (mu - half * var) * p_x
                        + half * var * (phi * phi * s * s * p_ff + two * phi * s * p_xf + p_xx);
                    c + dt_sub * generator
                })
                .collect()
        })
        .collect();
    let mut values = Vec::with_capacity(n_s * n_f);
    for (i, row) in out.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            if !v.is_finite() || v < T::lit(-1e-12) {
                return Err(Error::Numerical(format!(
                    "explicit PDE step produced density {v} at S={}, F={}",
                    grid.s_nodes[i], grid.f_nodes[j]
                )));
            }
            values.push(v.max(T::zero()));
        }
    }
    Ok(ConditionalPdf::from_parts_unchecked(
        pdf.shared_grid(),
        values,
        pdf.time() - dt_sub,
    ))
}

/// Advances backward by `dt` with as many equal explicit sub-steps as the
/// stability limit requires.
pub fn pde_advance<T: Scalar>(
    pdf: &ConditionalPdf<T>,
    phi_row: &[T],
    params: &MarketParams<T>,
    dt: T,
) -> Result<ConditionalPdf<T>> {
    let limit = pde_stable_dt(pdf.grid(), phi_row, params);
    let n = (dt / limit).ceil().to_usize().unwrap_or(1).max(1);
    let sub = dt / T::from_usize_lossy(n);
    let mut current = pdf.clone();
    for _ in 0..n {
        current = pde_step(&current, phi_row, params, sub)?;
    }
    Ok(current)
}

/// Row-normalised density sampled from `density(s, f)` on the grid.
pub fn pdf_from_fn<T: Scalar>(
    grid: Arc<SpaceGrid<T>>,
    time: T,
    density: impl Fn(T, T) -> T,
) -> Result<ConditionalPdf<T>> {
    let mut values = Vec::with_capacity(grid.n_s() * grid.n_f());
    for s in &grid.s_nodes {
        for f in &grid.f_nodes {
            values.push(density(*s, *f));
        }
    }
    let mut pdf = ConditionalPdf::from_parts_unchecked(grid, values, time);
    pdf.normalize_rows();
    ConditionalPdf::new(pdf.shared_grid(), pdf.values().to_vec(), time)
}
