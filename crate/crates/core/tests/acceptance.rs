//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release -p measure-dyn --test acceptance`. A
//! criterion that errors out fails the process; a criterion that merely
//! misses its tolerance prints FAIL and fails the process only when
//! `ACCEPTANCE_STRICT=1` is set.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use measure_dyn::evolution::RowStepper;
use measure_dyn::grids::quantile_of_row;
use measure_dyn::hedging::{min_variance_surface, QuantileOptions};
use measure_dyn::moments::{drifted_call_mean, RowMoments};
use measure_dyn::payoff::{default_mollify_width, terminal_pdf};
use measure_dyn::stats::{ks_statistic, sorted};
use measure_dyn::*;

const S0: f64 = 100.0;
const STRIKE: f64 = 100.0;
const MATURITY: f64 = 1.0;
const N_STEPS: usize = 250;
const F_MAX: f64 = 400.0;

struct Fixture {
    params: MarketParams<f64>,
    time: TimeGrid<f64>,
    grid: Arc<SpaceGrid<f64>>,
    law: TerminalLaw<f64>,
    width: f64,
    terminal: ConditionalPdf<f64>,
    i0: usize,
}

impl Fixture {
    fn new(law: TerminalLaw<f64>, n_steps: usize) -> Result<Self> {
        Self::with_nodes(law, 201, n_steps)
    }

    /// S within one log unit of S0. The F axis runs to 400 so the rows near
    /// S_max keep their mass at early times; 721 nodes give cells of 0.603.
    fn with_nodes(law: TerminalLaw<f64>, n_s: usize, n_steps: usize) -> Result<Self> {
        let mut cfg = GridConfig::new(
            S0 * (-1f64).exp(),
            S0 * 1f64.exp(),
            n_s,
            721,
            MATURITY,
            n_steps,
        );
        cfg.f_max = Some(F_MAX);
        Self::with_config(law, &cfg)
    }

    fn with_config(law: TerminalLaw<f64>, cfg: &GridConfig<f64>) -> Result<Self> {
        let params = MarketParams::new(0.1, 0.2, 0.05)?;
        let (time, grid) = build_grids(cfg, &law)?;
        let grid = Arc::new(grid);
        let width = default_mollify_width(&grid);
        let terminal = terminal_pdf(&law, grid.clone(), width, MATURITY)?;
        let i0 = grid.nearest_s_index(S0);
        Ok(Self {
            params,
            time,
            grid,
            law,
            width,
            terminal,
            i0,
        })
    }

    fn call() -> Result<Self> {
        Self::new(
            TerminalLaw::deterministic(Payoff::Call { strike: STRIKE }),
            N_STEPS,
        )
    }

    fn s0(&self) -> f64 {
        self.grid.s_nodes[self.i0]
    }

    fn terminal_means(&self) -> Result<Vec<f64>> {
        Ok(pdf_moments(&self.terminal)?
            .iter()
            .map(|m| m.mean)
            .collect())
    }

    fn phi_star(&self) -> Result<HedgeStrategy<f64>> {
        Ok(variance_min_hedge(
            &self.terminal_means()?,
            &self.time,
            &self.grid,
            &self.params,
        )?
        .strategy)
    }

    fn sweep(&self, hedge: &HedgeStrategy<f64>) -> Result<EvolutionReport<f64>> {
        Ok(backward_sweep(
            &self.terminal,
            hedge,
            &self.time,
            &self.params,
            &EvolutionOptions::default(),
        )?)
    }

    fn mc(
        &self,
        hedge: &HedgeStrategy<f64>,
        mc: &McConfig,
        sampling: TerminalSampling<f64>,
    ) -> Result<McResult<f64>> {
        Ok(empirical_distribution(
            self.s0(),
            hedge,
            &self.law,
            mc,
            0.0,
            MATURITY,
            &self.params,
            sampling,
        )?)
    }

    /// S nodes within half a log unit (2.5 terminal standard deviations) of S0.
    fn interior(&self) -> Vec<usize> {
        (0..self.grid.n_s())
            .filter(|i| (self.grid.s_nodes[*i] / S0).ln().abs() <= 0.5 + 1e-12)
            .collect()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn black_scholes_reduction() -> Result<Outcome> {
    let fx = Fixture::call()?;
    let (price, _) = bs_closed_form(S0, STRIKE, MATURITY, &fx.params)?;
    let hedge = fx.phi_star()?;
    let rep = fx.sweep(&hedge)?;
    let grid_mean = pdf_moments(rep.initial())?[fx.i0].mean;
    let res = fx.mc(
        &hedge,
        &McConfig::new(1_000_000, N_STEPS, 11),
        TerminalSampling::Exact,
    )?;
    let grid_err = rel(grid_mean, price);
    let z = (res.mean - price).abs() / res.std_error;
    outcome(
        grid_err <= 0.005 && z <= 3.0,
        format!(
            "BS {price:.5}; grid {grid_mean:.5} (rel {grid_err:.2e} <= 5e-3); MC {:.5} +- {:.5} ({z:.2} se <= 3)",
            res.mean, res.std_error
        ),
    )
}

/// Largest interior |V| under the variance-minimising hedge with zero
/// terminal variance.
fn residual_variance(n_s: usize, n_steps: usize) -> Result<f64> {
    let fx = Fixture::with_nodes(
        TerminalLaw::deterministic(Payoff::Call { strike: STRIKE }),
        n_s,
        n_steps,
    )?;
    let payoff: Vec<f64> = fx
        .grid
        .s_nodes
        .iter()
        .map(|s| (s - STRIKE).max(0.0))
        .collect();
    let hedge = variance_min_hedge(&payoff, &fx.time, &fx.grid, &fx.params)?.strategy;
    let terminal: Vec<RowMoments<f64>> = payoff
        .iter()
        .map(|m| RowMoments {
            mean: *m,
            variance: 0.0,
            third: 0.0,
        })
        .collect();
    let surf = evolve_moments(&terminal, &hedge, &fx.time, &fx.grid, &fx.params)?;
    let interior = fx.interior();
    Ok(surf
        .v
        .iter()
        .flat_map(|row| interior.iter().map(move |i| row[*i].abs()))
        .fold(0.0, f64::max))
}

fn variance_collapse() -> Result<Outcome> {
    let (price, _) = bs_closed_form(S0, STRIKE, MATURITY, &MarketParams::new(0.1, 0.2, 0.05)?)?;
    let bound = 1e-4 * price * price;
    // On 201 S nodes the residual is dominated by the S discretisation at the
    // payoff kink, which does not move with dt; 401 nodes expose the dt term.
    let (fine, fine2) = (
        residual_variance(401, N_STEPS)?,
        residual_variance(401, 2 * N_STEPS)?,
    );
    let (coarse, coarse2) = (
        residual_variance(201, N_STEPS)?,
        residual_variance(201, 2 * N_STEPS)?,
    );
    let shrink = fine / fine2;
    outcome(
        fine <= bound && shrink >= 2.0,
        format!(
            "401 S nodes: max interior |V| {fine:.3e} (<= {bound:.3e}) at {N_STEPS} steps, {fine2:.3e} at {} steps, shrink {shrink:.2} >= 2; 201 S nodes: {coarse:.3e} -> {coarse2:.3e}",
            2 * N_STEPS
        ),
    )
}

fn normalization() -> Result<Outcome> {
    let fx = Fixture::call()?;
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, hedge) in [
        ("zero", HedgeStrategy::Zero),
        ("delta", HedgeStrategy::BlackScholesDelta { strike: STRIKE }),
        ("phi*", fx.phi_star()?),
    ] {
        let rep = fx.sweep(&hedge)?;
        let dev = rep
            .mass_deviation_per_step
            .iter()
            .copied()
            .fold(0.0, f64::max);
        let leak = rep.total_leakage();
        pass &= dev <= 1e-6 && leak <= 0.005;
        parts.push(format!(
            "{name}: step deviation {dev:.1e}, leakage {leak:.1e}"
        ));
    }
    outcome(pass, format!("{} (limits 1e-6, 5e-3)", parts.join("; ")))
}

fn grid_mc_agreement() -> Result<Outcome> {
    let fx = Fixture::call()?;
    let mut mc = McConfig::new(100_000, N_STEPS, 23);
    mc.antithetic = false;
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, hedge) in [
        ("zero", HedgeStrategy::Zero),
        ("const 0.5", HedgeStrategy::Constant(0.5)),
        ("delta", HedgeStrategy::BlackScholesDelta { strike: STRIKE }),
    ] {
        let rep = fx.sweep(&hedge)?;
        let pdf = rep.initial();
        let cdf = |x: f64| pdf.row_cdf_at(fx.i0, x);
        // the grid starts from mollified atoms, so the like-for-like sample
        // carries the same blur; the atom-exact distance is reported alongside
        let blurred = fx.mc(&hedge, &mc, TerminalSampling::Mollified(fx.width))?;
        let exact = fx.mc(&hedge, &mc, TerminalSampling::Exact)?;
        let ks = ks_statistic(&sorted(&blurred.samples), cdf);
        let ks_exact = ks_statistic(&sorted(&exact.samples), cdf);
        pass &= ks <= 0.02;
        parts.push(format!("{name} KS {ks:.4} (atom-exact {ks_exact:.4})"));
    }
    outcome(pass, format!("{} (limit 0.02)", parts.join("; ")))
}

fn unhedged_mean() -> Result<Outcome> {
    let fx = Fixture::call()?;
    let target = drifted_call_mean(S0, STRIKE, MATURITY, &fx.params)?;
    let rep = fx.sweep(&HedgeStrategy::Zero)?;
    let grid_mean = pdf_moments(rep.initial())?[fx.i0].mean;
    let res = fx.mc(
        &HedgeStrategy::Zero,
        &McConfig::new(1_000_000, N_STEPS, 5),
        TerminalSampling::Exact,
    )?;
    let grid_err = rel(grid_mean, target);
    let z = (res.mean - target).abs() / res.std_error;
    outcome(
        grid_err <= 0.005 && z <= 3.0,
        format!(
            "closed form {target:.5}; grid {grid_mean:.5} (rel {grid_err:.2e} <= 5e-3); MC {:.4} +- {:.4} ({z:.2} se <= 3)",
            res.mean, res.std_error
        ),
    )
}

/// Local maxima of a row, ignoring ripples below `rel` of the peak.
fn modes(row: &[f64], rel: f64) -> Vec<usize> {
    let peak = row.iter().copied().fold(0.0, f64::max);
    let mut out = Vec::new();
    for j in 1..row.len() - 1 {
        if row[j] > rel * peak && row[j] >= row[j - 1] && row[j] > row[j + 1] {
            out.push(j);
        }
    }
    out
}

fn random_strike_mixture() -> Result<Outcome> {
    let law = TerminalLaw::random_strike_call(&[90.0, 110.0], &[0.5, 0.5])?;
    let fx = Fixture::new(law, N_STEPS)?;
    let target = 0.5
        * (bs_closed_form(S0, 90.0, MATURITY, &fx.params)?.0
            + bs_closed_form(S0, 110.0, MATURITY, &fx.params)?.0);
    let vm = variance_min_hedge(&fx.terminal_means()?, &fx.time, &fx.grid, &fx.params)?;
    let rep = fx.sweep(&vm.strategy)?;
    let pdf = rep.initial();
    let row = pdf.row(fx.i0);
    let peaks = modes(row, 1e-3);
    // The exact law has a third mode at the mean (paths finishing below both
    // strikes carry no basis risk), so require at least two troughed maxima.
    let bimodal = peaks.len() >= 2
        && peaks.windows(2).all(|w| {
            let trough = row[w[0]..=w[1]]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            trough < row[w[0]].min(row[w[1]])
        });
    let grid_mean = pdf_moments(pdf)?[fx.i0].mean;
    let mean_err = rel(grid_mean, target);
    let v_terminal: Vec<f64> = fx
        .grid
        .s_nodes
        .iter()
        .map(|s| fx.law.atom_moments(*s).map(|m| m.1).context("atom law"))
        .collect::<Result<_>>()?;
    let v0 = min_variance_surface(&v_terminal, &fx.time, &fx.grid, &fx.params)?[0][fx.i0];
    let res = fx.mc(
        &vm.strategy,
        &McConfig::new(200_000, N_STEPS, 31),
        TerminalSampling::Exact,
    )?;
    let var_err = rel(res.variance, v0);
    let modes_at: Vec<String> = peaks
        .iter()
        .map(|j| format!("{:.2}", fx.grid.f_nodes[*j]))
        .collect();
    outcome(
        bimodal && mean_err <= 0.005 && v0 > 0.0 && var_err <= 0.05,
        format!(
            "modes at F = [{}]; mean {grid_mean:.4} vs {target:.4} (rel {mean_err:.2e} <= 5e-3); V(S0,t0) {v0:.3} > 0, MC variance {:.3} (rel {var_err:.2e} <= 5e-2)",
            modes_at.join(", "),
            res.variance
        ),
    )
}

/// Worst relative (mean, variance, third moment) error between retained sweep
/// slices and the moment surfaces over interior S nodes, unhedged call.
fn moment_errors(fx: &Fixture) -> Result<(f64, f64, f64)> {
    let terminal = pdf_moments(&fx.terminal)?;
    let surf = evolve_moments(
        &terminal,
        &HedgeStrategy::Zero,
        &fx.time,
        &fx.grid,
        &fx.params,
    )?;
    let nodes = vec![0, 50, 100, 150, 200];
    let opts = EvolutionOptions {
        retain: Retain::Nodes(nodes.clone()),
        ..Default::default()
    };
    let rep = backward_sweep(
        &fx.terminal,
        &HedgeStrategy::Zero,
        &fx.time,
        &fx.params,
        &opts,
    )?;
    let interior = fx.interior();
    // Rows whose value is a round-off sliver of the price carry no dynamics.
    let (price, _) = bs_closed_form(S0, STRIKE, MATURITY, &fx.params)?;
    let (mut e_mean, mut e_var, mut e_third) = (0.0f64, 0.0f64, 0.0f64);
    for k in nodes {
        let slice = rep.slice_at_node(k).context("retained slice")?;
        let m = pdf_moments(slice)?;
        for i in interior
            .iter()
            .filter(|i| surf.f_bar[k][**i] >= 1e-6 * price)
        {
            e_mean = e_mean.max(rel(m[*i].mean, surf.f_bar[k][*i]));
            e_var = e_var.max(rel(m[*i].variance, surf.v[k][*i]));
            e_third = e_third.max(rel(m[*i].third, surf.q[k][*i]));
        }
    }
    Ok((e_mean, e_var, e_third))
}

fn moment_cross_check() -> Result<Outcome> {
    let (e_mean, e_var, e_third) = moment_errors(&Fixture::call()?)?;
    // for reference: F axis cut at the payoff range over [s_min, s_max]
    let cfg = GridConfig::new(
        S0 * (-1f64).exp(),
        S0 * 1f64.exp(),
        201,
        400,
        MATURITY,
        N_STEPS,
    );
    let law = TerminalLaw::deterministic(Payoff::Call { strike: STRIKE });
    let (_, d_var, d_third) = moment_errors(&Fixture::with_config(law, &cfg)?)?;
    outcome(
        e_mean <= 0.01 && e_var <= 0.01 && e_third <= 0.05,
        format!(
            "max rel error mean {e_mean:.2e}, variance {e_var:.2e} (<= 1e-2), skewness {e_third:.2e} (<= 5e-2); with the default F range: variance {d_var:.2e}, skewness {d_third:.2e}"
        ),
    )
}

fn quantile_scan_agreement() -> Result<(bool, String)> {
    let params = MarketParams::new(0.1, 0.2, 0.05)?;
    let law = TerminalLaw::deterministic(Payoff::Binary {
        strike: 100.0,
        cash: 10.0,
    });
    let dt = 1.0 / 250.0;
    let cfg = GridConfig::new(90.0, 110.0, 41, 200, dt, 1);
    let (_, grid) = build_grids(&cfg, &law)?;
    let grid = Arc::new(grid);
    let terminal = terminal_pdf(&law, grid.clone(), default_mollify_width(&grid), dt)?;
    let q = 0.05;
    let step = quantile_hedge_step(&terminal, q, &params, 1e-6, None)?;
    let stepper = RowStepper::new(&terminal, dt, &params, FRemap::default())?;
    let fq = |i: usize, phi: f64| -> Result<f64> {
        let row = stepper.normalized_row(i, phi)?;
        Ok(quantile_of_row(&row, grid.f_min(), grid.df, q)?)
    };
    let resolution = 0.001;
    // nodes within three one-step standard deviations of the payoff jump
    let near_jump =
        |i: usize| (grid.s_nodes[i] / 100.0).ln().abs() <= 3.0 * params.sigma * dt.sqrt();
    let (mut worst, mut worst_away) = (0.0f64, 0.0f64);
    let (mut checked, mut agree) = (0, 0);
    for i in 0..grid.n_s() {
        if step.degenerate[i] {
            continue;
        }
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 0..=4000 {
            let phi = -2.0 + k as f64 * resolution;
            let v = fq(i, phi)?;
            if v > best.0 {
                best = (v, phi);
            }
        }
        let diff = (best.1 - step.phi[i]).abs();
        worst = worst.max(diff);
        if !near_jump(i) {
            worst_away = worst_away.max(diff);
        }
        checked += 1;
        agree += usize::from(diff <= 2.0 * resolution);
    }
    ensure!(
        checked > 0,
        "every node of the scan instance was degenerate"
    );
    Ok((
        worst <= 2.0 * resolution,
        format!(
            "one-step binary: {agree}/{checked} nodes agree, max |phi** - scan| {worst:.4} (<= {:.3}), {worst_away:.4} beyond 3 step sd of the strike",
            2.0 * resolution
        ),
    ))
}

fn quantile_dominance() -> Result<Outcome> {
    let (scan_pass, scan_detail) = quantile_scan_agreement()?;
    let fx = Fixture::call()?;
    let q = 0.05;
    let dp = quantile_dp(
        &fx.terminal,
        q,
        &fx.time,
        &fx.params,
        &QuantileOptions::default(),
    )?;
    let mut mc = McConfig::new(100_000, N_STEPS, 41);
    mc.antithetic = false;
    let fq = |hedge: &HedgeStrategy<f64>| -> Result<f64> {
        Ok(fx.mc(hedge, &mc, TerminalSampling::Exact)?.quantile(q))
    };
    let (f_qq, f_star, f_zero) = (
        fq(&dp.strategy)?,
        fq(&fx.phi_star()?)?,
        fq(&HedgeStrategy::Zero)?,
    );
    let cell = fx.grid.df;
    let dominance = f_qq >= f_star - cell && f_qq >= f_zero - cell;
    outcome(
        scan_pass && dominance,
        format!(
            "{scan_detail}; call q={q}: F_q under phi** {f_qq:.3}, phi* {f_star:.3}, zero {f_zero:.3} (cell {cell:.3})"
        ),
    )
}

fn green_discounting() -> Result<Outcome> {
    let fx = Fixture::call()?;
    let (m0, v0, q0) = (7.0, 3.0, 2.0);
    let terminal = vec![
        RowMoments {
            mean: m0,
            variance: v0,
            third: q0
        };
        fx.grid.n_s()
    ];
    let surf = evolve_moments(
        &terminal,
        &HedgeStrategy::Zero,
        &fx.time,
        &fx.grid,
        &fx.params,
    )?;
    let dt = fx.time.dt();
    let r = fx.params.r;
    let mut worst = 0.0f64;
    for k in 0..N_STEPS {
        for i in 0..fx.grid.n_s() {
            for (d, surface) in [(1.0, &surf.f_bar), (2.0, &surf.v), (3.0, &surf.q)] {
                let ratio = surface[k][i] / surface[k + 1][i];
                worst = worst.max((ratio - (-d * r * dt).exp()).abs());
            }
        }
    }
    outcome(
        worst <= 1e-9,
        format!("max per-step ratio error {worst:.1e} (<= 1e-9) over {N_STEPS} steps"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Outcome>); 9] = [
        ("1 Black-Scholes reduction", black_scholes_reduction),
        ("2 variance collapse", variance_collapse),
        ("3 normalization", normalization),
        ("4 grid/MC agreement", grid_mc_agreement),
        ("5 unhedged objective mean", unhedged_mean),
        ("6 random-strike mixture", random_strike_mixture),
        ("7 moment cross-check", moment_cross_check),
        ("8 quantile hedge", quantile_dominance),
        ("9 Green discounting", green_discounting),
    ];
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let (mut failed, mut errored, mut ran) = (0, 0, 0);
    for (name, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => {
                errored += 1;
                (false, format!("error: {e:#}"))
            }
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} [{name}] {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("{}/{ran} criteria passed", ran - failed);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if errored > 0 || (strict && failed > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
