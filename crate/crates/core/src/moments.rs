//! Mean, variance and third central moment of the conditional distribution,
//! extracted from density slices or evolved directly as surfaces.

use std::io::Write;

use crate::error::{Error, Result};
use crate::grids::{ConditionalPdf, SpaceGrid, TimeGrid, NORMALIZATION_TOLERANCE};
use crate::hedging::HedgeStrategy;
use crate::market::{Boundary, LogStencil, MarketParams};
use crate::report::{fmt_num, header};
use crate::scalar::{norm_cdf, Scalar};

/// Mean, variance and third central moment of one row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowMoments<T> {
    pub mean: T,
    pub variance: T,
    pub third: T,
}

/// Trapezoid moments of every row, normalised by the row mass.
pub fn pdf_moments<T: Scalar>(pdf: &ConditionalPdf<T>) -> Result<Vec<RowMoments<T>>> {
    let grid = pdf.grid();
    let h = grid.df;
    let f = &grid.f_nodes;
    let n = f.len();
    pdf.rows()
        .enumerate()
        .map(|(i, row)| {
            let (mut m0, mut m1, mut m2, mut m3) = (T::zero(), T::zero(), T::zero(), T::zero());
            for (j, (p, x)) in row.iter().zip(f).enumerate() {
                let w = if j == 0 || j == n - 1 {
                    *p * T::lit(0.5)
                } else {
                    *p
                };
                m0 = m0 + w;
                m1 = m1 + w * *x;
                m2 = m2 + w * *x * *x;
                m3 = m3 + w * *x * *x * *x;
            }
            let mass = m0 * h;
            if (mass - T::one()).abs() > T::lit(NORMALIZATION_TOLERANCE) {
                return Err(Error::State(format!(
                    "row S={} has mass {mass}, expected 1",
                    grid.s_nodes[i]
                )));
            }
            let (e1, e2, e3) = (m1 / m0, m2 / m0, m3 / m0);
            Ok(RowMoments {
                mean: e1,
                variance: e2 - e1 * e1,
                third: e3 - T::lit(3.0) * e2 * e1 + T::lit(2.0) * e1 * e1 * e1,
            })
        })
        .collect()
}

/// Moment surfaces indexed `[time node][S node]`, time node 0 = t0.
#[derive(Debug, Clone)]
pub struct MomentSurfaces<T> {
    pub times: Vec<T>,
    pub s_nodes: Vec<T>,
    pub f_bar: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub q: Vec<Vec<T>>,
    /// Number of negative variances clipped to zero.
    pub clipped: usize,
}

impl<T: Scalar> MomentSurfaces<T> {
    /// Writes `t,s,f_bar,v,q`, latest time last.
    pub fn write_csv<W: Write>(&self, out: &mut W, head: Option<&str>) -> std::io::Result<()> {
        header(out, head)?;
        writeln!(out, "t,s,f_bar,v,q")?;
        for (k, t) in self.times.iter().enumerate() {
            for (i, s) in self.s_nodes.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    fmt_num(*t),
                    fmt_num(*s),
                    fmt_num(self.f_bar[k][i]),
                    fmt_num(self.v[k][i]),
                    fmt_num(self.q[k][i])
                )?;
            }
        }
        Ok(())
    }
}

/// `d f / d S` on the log-uniform S nodes: three-point formula (exact for
/// quadratics in S) inside, one-sided at the ends.
pub fn s_derivative<T: Scalar>(values: &[T], s_nodes: &[T]) -> Vec<T> {
    let n = values.len();
    let mut out = vec![T::zero(); n];
    if n < 2 {
        return out;
    }
    out[0] = (values[1] - values[0]) / (s_nodes[1] - s_nodes[0]);
    out[n - 1] = (values[n - 1] - values[n - 2]) / (s_nodes[n - 1] - s_nodes[n - 2]);
    for i in 1..n - 1 {
        let hm = s_nodes[i] - s_nodes[i - 1];
        let hp = s_nodes[i + 1] - s_nodes[i];
        out[i] = (hm * hm * values[i + 1] - hp * hp * values[i - 1]
            + (hp * hp - hm * hm) * values[i])
            / (hp * hm * (hp + hm));
    }
    out
}

fn check_terminal<T: Scalar>(name: &str, values: &[T], n_s: usize) -> Result<()> {
    if values.len() != n_s {
        return Err(Error::State(format!(
            "terminal {name} has {} entries, grid has {n_s} S nodes",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("terminal {name} is not finite")));
    }
    Ok(())
}

/// Solves the mean, variance and third-moment equations backward from the
/// terminal row moments, one kernel step at a time. The variance and third
/// moment sources are averaged over both ends of each step, except the step
/// touching maturity, which takes them at its start only.
pub fn evolve_moments<T: Scalar>(
    terminal: &[RowMoments<T>],
    hedge: &HedgeStrategy<T>,
    time: &TimeGrid<T>,
    grid: &SpaceGrid<T>,
    params: &MarketParams<T>,
) -> Result<MomentSurfaces<T>> {
    hedge.check_dimensions(time, grid)?;
    evolve_moments_with(terminal, time, grid, params, |k, _| {
        hedge.row(k, time, grid, params)
    })
}

/// [`evolve_moments`] with the hedge row for step `k` produced from the mean
/// already solved at node `k + 1`.
pub fn evolve_moments_with<T: Scalar, H>(
    terminal: &[RowMoments<T>],
    time: &TimeGrid<T>,
    grid: &SpaceGrid<T>,
    params: &MarketParams<T>,
    mut hedge_row: H,
) -> Result<MomentSurfaces<T>>
where
    H: FnMut(usize, &[T]) -> Result<Vec<T>>,
{
    params.validate()?;
    let n_s = grid.n_s();
    let mean: Vec<T> = terminal.iter().map(|m| m.mean).collect();
    let var: Vec<T> = terminal.iter().map(|m| m.variance).collect();
    let third: Vec<T> = terminal.iter().map(|m| m.third).collect();
    check_terminal("mean", &mean, n_s)?;
    check_terminal("variance", &var, n_s)?;
    check_terminal("third moment", &third, n_s)?;

    let n = time.n_steps;
    let dt = time.dt();
    let st = LogStencil::objective(grid.dx, dt, params);
    let s = &grid.s_nodes;
    let (d1, d2, d3) = (
        (-params.r * dt).exp(),
        (-T::lit(2.0) * params.r * dt).exp(),
        (-T::lit(3.0) * params.r * dt).exp(),
    );
    let var_dt = params.sigma * params.sigma * dt;
    let scale = mean
        .iter()
        .fold(T::zero(), |m, x| m.max(x.abs()))
        .max(T::one());
    let mut f_bar = vec![Vec::new(); n + 1];
    let mut v = vec![Vec::new(); n + 1];
    let mut q = vec![Vec::new(); n + 1];
    f_bar[n] = mean;
    v[n] = var;
    q[n] = third;
    let mut clipped = 0;
    let mut phi_next: Option<Vec<T>> = None;
    for k in (0..n).rev() {
        let phi = hedge_row(k, &f_bar[k + 1])?;
        if phi.len() != n_s {
            return Err(Error::State(format!(
                "hedge row has {} entries, grid has {n_s} S nodes",
                phi.len()
            )));
        }
        let fk: Vec<T> = (0..n_s)
            .map(|i| {
                let carried = d1 * st.expect(&f_bar[k + 1], s, i, Boundary::Linear);
                carried - phi[i] * (d1 * s[i] * st.growth - s[i])
            })
            .collect();
        // Sources use the trapezoid rule over the step: half at t_k, half at
        // t_{k+1} with the hedge held from there, carried back through the
        // kernel. The last step before maturity has no later hedge and takes
        // the whole source at t_k.
        let (now, later) = match &phi_next {
            Some(_) => (T::lit(0.5) * var_dt, T::lit(0.5) * var_dt),
            None => (var_dt, T::zero()),
        };
        let phi_later = phi_next.as_ref().unwrap_or(&phi);
        let dfk = s_derivative(&fk, s);
        let df_next = s_derivative(&f_bar[k + 1], s);
        let v_src: Vec<T> = (0..n_s)
            .map(|j| {
                let gap = df_next[j] - phi_later[j];
                v[k + 1][j] + later * s[j] * s[j] * gap * gap
            })
            .collect();
        let mut vk: Vec<T> = (0..n_s)
            .map(|i| {
                let gap = dfk[i] - phi[i];
                d2 * st.expect(&v_src, s, i, Boundary::Flat) + now * s[i] * s[i] * gap * gap
            })
            .collect();
        for (i, x) in vk.iter_mut().enumerate() {
            if *x < T::zero() {
                if *x < -T::lit(1e-6) * scale * scale {
                    return Err(Error::Numerical(format!(
                        "variance {} at S={}, t={} is below the tolerance",
                        x,
                        s[i],
                        time.time(k)
                    )));
                }
                *x = T::zero();
                clipped += 1;
            }
        }
        let dvk = s_derivative(&vk, s);
        let dv_next = s_derivative(&v[k + 1], s);
        let q_src: Vec<T> = (0..n_s)
            .map(|j| {
                q[k + 1][j]
                    + T::lit(3.0) * later * s[j] * s[j] * dv_next[j] * (df_next[j] - phi_later[j])
            })
            .collect();
        let qk: Vec<T> = (0..n_s)
            .map(|i| {
                d3 * st.expect(&q_src, s, i, Boundary::Flat)
                    + T::lit(3.0) * now * s[i] * s[i] * dvk[i] * (dfk[i] - phi[i])
            })
            .collect();
        f_bar[k] = fk;
        v[k] = vk;
        q[k] = qk;
        phi_next = Some(phi);
    }
    Ok(MomentSurfaces {
        times: (0..=n).map(|k| time.time(k)).collect(),
        s_nodes: s.clone(),
        f_bar,
        v,
        q,
        clipped,
    })
}

/// Variance surface as the discounted kernel expectation of the terminal
/// variance plus the hedging-error source accumulated over future steps.
/// `f_bar` is indexed `[time node][S node]`.
pub fn variance_via_green<T: Scalar>(
    f_bar: &[Vec<T>],
    v_terminal: &[T],
    hedge: &HedgeStrategy<T>,
    time: &TimeGrid<T>,
    grid: &SpaceGrid<T>,
    params: &MarketParams<T>,
) -> Result<Vec<Vec<T>>> {
    params.validate()?;
    let n = time.n_steps;
    let n_s = grid.n_s();
    if f_bar.len() != n + 1 || f_bar.iter().any(|r| r.len() != n_s) {
        return Err(Error::State(format!(
            "mean surface must be {} x {n_s}",
            n + 1
        )));
    }
    check_terminal("variance", v_terminal, n_s)?;
    hedge.check_dimensions(time, grid)?;
    let dt = time.dt();
    let st = LogStencil::objective(grid.dx, dt, params);
    let s = &grid.s_nodes;
    let d2 = (-T::lit(2.0) * params.r * dt).exp();
    let var_dt = params.sigma * params.sigma * dt;
    let mut out = vec![Vec::new(); n + 1];
    out[n] = v_terminal.to_vec();
    for k in (0..n).rev() {
        let phi = hedge.row(k, time, grid, params)?;
        let df_next = s_derivative(&f_bar[k + 1], s);
        let integrand: Vec<T> = (0..n_s)
            .map(|j| {
                let gap = phi[j] - df_next[j];
                out[k + 1][j] + var_dt * s[j] * s[j] * gap * gap
            })
            .collect();
        out[k] = (0..n_s)
            .map(|i| d2 * st.expect(&integrand, s, i, Boundary::Flat))
            .collect();
    }
    Ok(out)
}

fn bs_terms(s: f64, strike: f64, tau: f64, drift: f64, sigma: f64) -> (f64, f64) {
    let sd = sigma * tau.sqrt();
    let d1 = ((s / strike).ln() + (drift + 0.5 * sigma * sigma) * tau) / sd;
    (d1, d1 - sd)
}

fn check_bs_inputs<T: Scalar>(s: T, strike: T, tau: T, params: &MarketParams<T>) -> Result<()> {
    params.validate()?;
    if !(s > T::zero()) || !(strike > T::zero()) || !(tau > T::zero()) {
        return Err(Error::Domain(format!(
            "price, strike and time to maturity must be positive (got {s}, {strike}, {tau})"
        )));
    }
    Ok(())
}

/// Black–Scholes call value and delta at rate `r` and volatility `sigma`;
/// the drift `mu` does not enter.
pub fn bs_closed_form<T: Scalar>(
    s: T,
    strike: T,
    tau: T,
    params: &MarketParams<T>,
) -> Result<(T, T)> {
    check_bs_inputs(s, strike, tau, params)?;
    let (s, k, tau) = (s.as_f64(), strike.as_f64(), tau.as_f64());
    let (r, sigma) = (params.r.as_f64(), params.sigma.as_f64());
    let (d1, d2) = bs_terms(s, k, tau, r, sigma);
    let price = s * norm_cdf(d1) - k * (-r * tau).exp() * norm_cdf(d2);
    Ok((T::lit(price), T::lit(norm_cdf(d1))))
}

/// Black–Scholes put value.
pub fn bs_put<T: Scalar>(s: T, strike: T, tau: T, params: &MarketParams<T>) -> Result<T> {
    check_bs_inputs(s, strike, tau, params)?;
    let (s, k, tau) = (s.as_f64(), strike.as_f64(), tau.as_f64());
    let (r, sigma) = (params.r.as_f64(), params.sigma.as_f64());
    let (d1, d2) = bs_terms(s, k, tau, r, sigma);
    Ok(T::lit(
        k * (-r * tau).exp() * norm_cdf(-d2) - s * norm_cdf(-d1),
    ))
}

/// `e^{-r tau} E[(S_T - K)^+]` with `S` growing at the objective drift `mu`.
pub fn drifted_call_mean<T: Scalar>(
    s: T,
    strike: T,
    tau: T,
    params: &MarketParams<T>,
) -> Result<T> {
    check_bs_inputs(s, strike, tau, params)?;
    let (s, k, tau) = (s.as_f64(), strike.as_f64(), tau.as_f64());
    let (mu, r, sigma) = (params.mu.as_f64(), params.r.as_f64(), params.sigma.as_f64());
    let (d1, d2) = bs_terms(s, k, tau, mu, sigma);
    Ok(T::lit(
        (-r * tau).exp() * (s * (mu * tau).exp() * norm_cdf(d1) - k * norm_cdf(d2)),
    ))
}
