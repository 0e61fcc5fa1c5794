use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use measure_dyn::hedging::{min_variance_surface, QuantileOptions};
use measure_dyn::monte_carlo::SUMMARY_QUANTILES;
use measure_dyn::payoff::default_mollify_width;
use measure_dyn::report::{fmt_num, write_surface};
use measure_dyn::stats::{ks_statistic, sorted};
use measure_dyn::{
    backward_sweep, build_grids, empirical_distribution, evolve_moments, pdf_moments, quantile_dp,
    terminal_pdf, variance_min_hedge, ConditionalPdf, EvolutionOptions, HedgeStrategy,
    MarketParams, McResult, Retain, SpaceGrid, TerminalLaw, TerminalSampling, TimeGrid,
};
use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything a command needs: the parsed config, the grids and the seeded
/// terminal density.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub quiet: bool,
    header: String,
    params: MarketParams<f64>,
    time: TimeGrid<f64>,
    grid: Arc<SpaceGrid<f64>>,
    law: TerminalLaw<f64>,
    width: f64,
    terminal: ConditionalPdf<f64>,
    options: EvolutionOptions,
}

impl Run {
    pub fn new(cfg: RunConfig, out: PathBuf, quiet: bool) -> Result<Self, CliError> {
        let params = cfg.params()?;
        let law = cfg.law()?;
        let (time, grid) = build_grids(&cfg.grid_config(), &law)?;
        let grid = Arc::new(grid);
        let width = cfg
            .grid
            .mollify_width
            .unwrap_or_else(|| default_mollify_width(&grid));
        let terminal = terminal_pdf(&law, grid.clone(), width, time.maturity)?;
        let options = EvolutionOptions {
            remap: cfg.remap()?,
            renormalize: cfg.grid.renormalize.unwrap_or(true),
            retain: Retain::Ends,
        };
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        let header = format!("measure-dyn {VERSION} config_sha256={}", cfg.digest());
        Ok(Self {
            cfg,
            out,
            quiet,
            header,
            params,
            time,
            grid,
            law,
            width,
            terminal,
            options,
        })
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    /// Creates `name` in the output directory and hands the writer and the
    /// header line to `body`.
    fn write(
        &self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>, &str) -> std::io::Result<()>,
    ) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w, &self.header)
            .and_then(|_| w.flush())
            .map_err(|e| CliError::io(&path, e))?;
        self.say(format!("wrote {}", path.display()));
        Ok(path)
    }

    fn terminal_means(&self) -> Result<Vec<f64>, CliError> {
        Ok(pdf_moments(&self.terminal)?
            .iter()
            .map(|m| m.mean)
            .collect())
    }

    fn hedge(&self) -> Result<HedgeStrategy<f64>, CliError> {
        match self.cfg.simple_hedge()? {
            Some(h) => Ok(h),
            None => Ok(variance_min_hedge(
                &self.terminal_means()?,
                &self.time,
                &self.grid,
                &self.params,
            )?
            .strategy),
        }
    }

    fn spot_index(&self) -> usize {
        let s0 = self.cfg.run.s0.unwrap_or_else(|| {
            (self.grid.s_nodes[0] * self.grid.s_nodes[self.grid.n_s() - 1]).sqrt()
        });
        self.grid.nearest_s_index(s0)
    }

    fn sampling(&self, default: TerminalSampling<f64>) -> TerminalSampling<f64> {
        match self.cfg.mc.sampling.as_deref() {
            Some("exact") => TerminalSampling::Exact,
            Some("mollified") => TerminalSampling::Mollified(self.width),
            _ => default,
        }
    }

    fn simulate(
        &self,
        s0: f64,
        hedge: &HedgeStrategy<f64>,
        sampling: TerminalSampling<f64>,
    ) -> Result<McResult<f64>, CliError> {
        Ok(empirical_distribution(
            s0,
            hedge,
            &self.law,
            &self.cfg.mc_config(),
            self.time.t0,
            self.time.maturity,
            &self.params,
            sampling,
        )?)
    }

    pub fn evolve(&self) -> Result<(), CliError> {
        let hedge = self.hedge()?;
        let checkpoints = self.cfg.run.checkpoints.clone();
        let options = EvolutionOptions {
            retain: Retain::Nodes(checkpoints.clone()),
            ..self.options.clone()
        };
        let rep = backward_sweep(&self.terminal, &hedge, &self.time, &self.params, &options)?;
        self.write("pdf_t0.csv", |w, h| rep.initial().write_csv(w, Some(h)))?;
        self.write("pdf_T.csv", |w, h| rep.terminal().write_csv(w, Some(h)))?;
        for k in checkpoints {
            if k == 0 || k == self.time.n_steps {
                continue;
            }
            let slice = rep.slice_at_node(k).ok_or_else(|| {
                CliError::Core(measure_dyn::Error::State(format!(
                    "slice {k} was not retained"
                )))
            })?;
            self.write(&format!("pdf_node{k}.csv"), |w, h| {
                slice.write_csv(w, Some(h))
            })?;
        }
        self.write("leakage.csv", |w, h| {
            rep.write_leakage_csv(w, Some(h), &self.time)
        })?;
        let i0 = self.spot_index();
        let m = &pdf_moments(rep.initial())?[i0];
        self.say(format!(
            "S={} t0={}: mean {} std {}; total leakage {}",
            fmt_num(self.grid.s_nodes[i0]),
            fmt_num(self.time.t0),
            fmt_num(m.mean),
            fmt_num(m.variance.max(0.0).sqrt()),
            fmt_num(rep.total_leakage())
        ));
        Ok(())
    }

    pub fn moments(&self) -> Result<(), CliError> {
        let hedge = self.hedge()?;
        let terminal = pdf_moments(&self.terminal)?;
        let surf = evolve_moments(&terminal, &hedge, &self.time, &self.grid, &self.params)?;
        self.write("moments.csv", |w, h| surf.write_csv(w, Some(h)))?;
        let i0 = self.spot_index();
        self.say(format!(
            "S={} t0: mean {} variance {} third {}; {} variances clipped",
            fmt_num(self.grid.s_nodes[i0]),
            fmt_num(surf.f_bar[0][i0]),
            fmt_num(surf.v[0][i0]),
            fmt_num(surf.q[0][i0]),
            surf.clipped
        ));
        Ok(())
    }

    pub fn hedge_var(&self) -> Result<(), CliError> {
        let vm = variance_min_hedge(
            &self.terminal_means()?,
            &self.time,
            &self.grid,
            &self.params,
        )?;
        let table = vm.strategy.to_table(&self.time, &self.grid, &self.params)?;
        self.write("phi_star.csv", |w, h| table.write_csv(w, Some(h)))?;
        let v_terminal: Vec<f64> = self
            .grid
            .s_nodes
            .iter()
            .map(|s| self.law.atom_moments(*s).map(|m| m.1).unwrap_or(0.0))
            .collect();
        let v = min_variance_surface(&v_terminal, &self.time, &self.grid, &self.params)?;
        let times: Vec<f64> = (0..=self.time.n_steps).map(|k| self.time.time(k)).collect();
        self.write("min_variance.csv", |w, h| {
            write_surface(w, Some(h), "v", &times, &self.grid.s_nodes, &v)
        })?;
        let i0 = self.spot_index();
        self.say(format!(
            "S={} t0: phi* {} minimal variance {}",
            fmt_num(self.grid.s_nodes[i0]),
            fmt_num(table.values[0][i0]),
            fmt_num(v[0][i0])
        ));
        Ok(())
    }

    pub fn hedge_quantile(&self) -> Result<(), CliError> {
        let q = self.cfg.run.q.unwrap_or(0.05);
        let mut opts = QuantileOptions {
            evolution: self.options.clone(),
            ..Default::default()
        };
        if let Some(e) = self.cfg.run.epsilon_denom {
            opts.epsilon_denom = e;
        }
        if self.cfg.hedge.kind != "zero" {
            opts.fallback = Some(self.hedge()?);
        }
        let dp = quantile_dp(&self.terminal, q, &self.time, &self.params, &opts)?;
        let table = dp.strategy.to_table(&self.time, &self.grid, &self.params)?;
        self.write("phi_quantile.csv", |w, h| table.write_csv(w, Some(h)))?;
        let times: Vec<f64> = (0..=self.time.n_steps).map(|k| self.time.time(k)).collect();
        self.write("quantile_surface.csv", |w, h| {
            write_surface(
                w,
                Some(h),
                "f_q",
                &times,
                &self.grid.s_nodes,
                &dp.quantile_surface,
            )
        })?;
        self.write("degeneracy.csv", |w, h| {
            dp.write_degeneracy_csv(w, Some(h), &self.time)
        })?;
        self.write("pdf_t0.csv", |w, h| {
            dp.report.initial().write_csv(w, Some(h))
        })?;
        let i0 = self.spot_index();
        self.say(format!(
            "S={} t0: F_q({}) {}; {} degenerate nodes over {} steps",
            fmt_num(self.grid.s_nodes[i0]),
            fmt_num(q),
            fmt_num(dp.quantile_surface[0][i0]),
            dp.degenerate_per_step.iter().sum::<usize>(),
            self.time.n_steps
        ));
        Ok(())
    }

    pub fn mc(&self) -> Result<(), CliError> {
        let hedge = self.hedge()?;
        let s0 = self.grid.s_nodes[self.spot_index()];
        let res = self.simulate(s0, &hedge, self.sampling(TerminalSampling::Exact))?;
        self.write("mc_samples.csv", |w, h| res.write_samples_csv(w, Some(h)))?;
        let mc = self.cfg.mc_config();
        let quantiles: serde_json::Map<String, serde_json::Value> = res
            .quantiles
            .iter()
            .map(|(p, v)| (fmt_num(*p), json!(round(*v))))
            .collect();
        let summary = json!({
            "tool": format!("measure-dyn {VERSION}"),
            "config_sha256": self.cfg.digest(),
            "s0": round(s0),
            "n_paths": mc.n_paths,
            "n_steps": mc.n_steps,
            "seed": mc.seed,
            "antithetic": mc.antithetic,
            "mean": round(res.mean),
            "std": round(res.std_dev()),
            "std_error": round(res.std_error),
            "skewness": round(res.skewness),
            "quantiles": quantiles,
        });
        self.write("mc_summary.json", |w, _| {
            serde_json::to_writer_pretty(&mut *w, &summary)?;
            writeln!(w)
        })?;
        self.say(format!(
            "S={s0:.4}: mean {} +- {} std {}",
            fmt_num(res.mean),
            fmt_num(res.std_error),
            fmt_num(res.std_dev())
        ));
        Ok(())
    }

    pub fn compare(&self) -> Result<(), CliError> {
        let hedge = self.hedge()?;
        let i0 = self.spot_index();
        let s0 = self.grid.s_nodes[i0];
        let rep = backward_sweep(
            &self.terminal,
            &hedge,
            &self.time,
            &self.params,
            &self.options,
        )?;
        let pdf = rep.initial();
        let m = &pdf_moments(pdf)?[i0];
        let res = self.simulate(
            s0,
            &hedge,
            self.sampling(TerminalSampling::Mollified(self.width)),
        )?;
        let ks = ks_statistic(&sorted(&res.samples), |f| pdf.row_cdf_at(i0, f));
        let mut rows = vec![
            ("mean".to_string(), m.mean, res.mean),
            ("std".to_string(), m.variance.max(0.0).sqrt(), res.std_dev()),
        ];
        for p in SUMMARY_QUANTILES {
            rows.push((
                format!("q{}", fmt_num(p)),
                pdf.row_quantile(i0, p)?,
                res.quantile(p),
            ));
        }
        self.write("compare.csv", |w, h| {
            writeln!(w, "# {h}")?;
            writeln!(
                w,
                "# s0={} mc_std_error={} ks={}",
                fmt_num(s0),
                fmt_num(res.std_error),
                fmt_num(ks)
            )?;
            writeln!(w, "statistic,grid,mc,difference")?;
            for (name, g, c) in &rows {
                writeln!(
                    w,
                    "{name},{},{},{}",
                    fmt_num(*g),
                    fmt_num(*c),
                    fmt_num(g - c)
                )?;
            }
            writeln!(w, "ks,,,{}", fmt_num(ks))
        })?;
        if !self.quiet {
            println!("S={}  {:>10} {:>14} {:>14}", fmt_num(s0), "", "grid", "mc");
            for (name, g, c) in &rows {
                println!("{name:>16} {:>14} {:>14}", fmt_num(*g), fmt_num(*c));
            }
            println!("{:>16} {:>14}", "mc std error", fmt_num(res.std_error));
            println!("{:>16} {:>14}", "KS distance", fmt_num(ks));
        }
        Ok(())
    }
}

/// Rounds to the significant digits used in the CSV files.
fn round(x: f64) -> f64 {
    fmt_num(x).parse().unwrap_or(x)
}

/// Output directory: flag, then `run.out`, then the working directory.
pub fn out_dir(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.run.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}
