use std::path::Path;

use measure_dyn::hedging::HedgeTable;
use measure_dyn::{FRemap, GridConfig, HedgeStrategy, MarketParams, McConfig, Payoff, TerminalLaw};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub market: MarketSection,
    pub grid: GridSection,
    pub time: TimeSection,
    pub payoff: PayoffSection,
    #[serde(default)]
    pub hedge: HedgeSection,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub mu: f64,
    pub sigma: f64,
    pub r: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub s_min: f64,
    pub s_max: f64,
    pub n_s: usize,
    pub n_f: usize,
    pub f_min: Option<f64>,
    pub f_max: Option<f64>,
    pub margin: Option<f64>,
    /// Standard deviation of the bump each terminal atom is spread into.
    pub mollify_width: Option<f64>,
    /// `log_parabolic` (default), `parabolic` or `linear`.
    pub remap: Option<String>,
    pub renormalize: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    #[serde(default)]
    pub t0: f64,
    pub maturity: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayoffSection {
    /// `call`, `put`, `binary`, `forward`, `cash` or `random_strike_call`.
    pub kind: String,
    pub strike: Option<f64>,
    pub cash: Option<f64>,
    pub amount: Option<f64>,
    pub strikes: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HedgeSection {
    /// `zero`, `constant`, `bs_delta`, `variance_min` or `table`.
    #[serde(default = "default_hedge_kind")]
    pub kind: String,
    pub phi: Option<f64>,
    pub strike: Option<f64>,
    /// CSV with `t,s,phi` rows, as written by `hedge-var`.
    pub table: Option<String>,
}

fn default_hedge_kind() -> String {
    "zero".into()
}

impl Default for HedgeSection {
    fn default() -> Self {
        Self {
            kind: default_hedge_kind(),
            phi: None,
            strike: None,
            table: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    /// Defaults to `time.n_steps`.
    pub n_steps: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub antithetic: bool,
    /// `exact` or `mollified`; `compare` defaults to `mollified`, `mc` to
    /// `exact`.
    pub sampling: Option<String>,
}

fn default_paths() -> usize {
    100_000
}

fn default_seed() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            n_paths: default_paths(),
            n_steps: None,
            seed: default_seed(),
            antithetic: true,
            sampling: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Spot for `mc` and `compare`; defaults to the log-centre of the S grid.
    pub s0: Option<f64>,
    pub q: Option<f64>,
    /// Time-node indices of extra slices written by `evolve`.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    pub out: Option<String>,
    pub epsilon_denom: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            key: "config".into(),
            message: e.to_string().trim_end().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.params()?;
        self.remap()?;
        self.law()?;
        if self.time.n_steps == 0 {
            return Err(CliError::config("time.n_steps", "must be at least 1"));
        }
        if let Some(k) = self
            .run
            .checkpoints
            .iter()
            .find(|k| **k > self.time.n_steps)
        {
            return Err(CliError::config(
                "run.checkpoints",
                format!("node {k} is past the last time node {}", self.time.n_steps),
            ));
        }
        if let Some(q) = self.run.q {
            if !(q > 0.0 && q < 1.0) {
                return Err(CliError::config(
                    "run.q",
                    format!("must lie in (0, 1), got {q}"),
                ));
            }
        }
        if let Some(s0) = self.run.s0 {
            if !(s0 >= self.grid.s_min && s0 <= self.grid.s_max) {
                return Err(CliError::config(
                    "run.s0",
                    "must lie inside [grid.s_min, grid.s_max]",
                ));
            }
        }
        if let Some(w) = self.grid.mollify_width {
            if !(w > 0.0) {
                return Err(CliError::config("grid.mollify_width", "must be positive"));
            }
        }
        match self.hedge.kind.as_str() {
            "zero" | "variance_min" => {}
            "constant" => {
                if !self.hedge.phi.is_some_and(f64::is_finite) {
                    return Err(CliError::config(
                        "hedge.phi",
                        "a finite value is required for kind = \"constant\"",
                    ));
                }
            }
            "bs_delta" => {
                if self.hedge.strike.or(self.payoff.strike).is_none() {
                    return Err(CliError::config(
                        "hedge.strike",
                        "required for kind = \"bs_delta\"",
                    ));
                }
            }
            "table" => {
                if self.hedge.table.is_none() {
                    return Err(CliError::config(
                        "hedge.table",
                        "a CSV path is required for kind = \"table\"",
                    ));
                }
            }
            other => {
                return Err(CliError::config(
                    "hedge.kind",
                    format!("unknown hedge `{other}`"),
                ))
            }
        }
        match self.mc.sampling.as_deref() {
            None | Some("exact") | Some("mollified") => {}
            Some(other) => {
                return Err(CliError::config(
                    "mc.sampling",
                    format!("unknown sampling `{other}`"),
                ))
            }
        }
        self.mc_config().validate()?;
        Ok(())
    }

    /// SHA-256 of the effective configuration (after command-line overrides).
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn params(&self) -> Result<MarketParams<f64>, CliError> {
        Ok(MarketParams::new(
            self.market.mu,
            self.market.sigma,
            self.market.r,
        )?)
    }

    pub fn grid_config(&self) -> GridConfig<f64> {
        let g = &self.grid;
        let mut cfg = GridConfig::new(
            g.s_min,
            g.s_max,
            g.n_s,
            g.n_f,
            self.time.maturity,
            self.time.n_steps,
        );
        cfg.t0 = self.time.t0;
        cfg.f_min = g.f_min;
        cfg.f_max = g.f_max;
        if let Some(m) = g.margin {
            cfg.margin = m;
        }
        cfg
    }

    pub fn remap(&self) -> Result<FRemap, CliError> {
        match self.grid.remap.as_deref() {
            None | Some("log_parabolic") => Ok(FRemap::LogParabolic),
            Some("parabolic") => Ok(FRemap::Parabolic),
            Some("linear") => Ok(FRemap::Linear),
            Some(other) => Err(CliError::config(
                "grid.remap",
                format!("unknown remap `{other}`"),
            )),
        }
    }

    pub fn law(&self) -> Result<TerminalLaw<f64>, CliError> {
        let p = &self.payoff;
        let need = |v: Option<f64>, key: &str| {
            v.ok_or_else(|| CliError::config(key, format!("required for kind = \"{}\"", p.kind)))
        };
        let payoff = match p.kind.as_str() {
            "call" => Payoff::Call {
                strike: need(p.strike, "payoff.strike")?,
            },
            "put" => Payoff::Put {
                strike: need(p.strike, "payoff.strike")?,
            },
            "binary" => Payoff::Binary {
                strike: need(p.strike, "payoff.strike")?,
                cash: need(p.cash, "payoff.cash")?,
            },
            "forward" => Payoff::Forward {
                strike: need(p.strike, "payoff.strike")?,
            },
            "cash" => Payoff::Cash {
                amount: need(p.amount, "payoff.amount")?,
            },
            "random_strike_call" => {
                let strikes = p.strikes.as_ref().ok_or_else(|| {
                    CliError::config(
                        "payoff.strikes",
                        "required for kind = \"random_strike_call\"",
                    )
                })?;
                let weights = p.weights.as_ref().ok_or_else(|| {
                    CliError::config(
                        "payoff.weights",
                        "required for kind = \"random_strike_call\"",
                    )
                })?;
                return Ok(TerminalLaw::random_strike_call(strikes, weights)?);
            }
            other => {
                return Err(CliError::config(
                    "payoff.kind",
                    format!("unknown payoff `{other}`"),
                ))
            }
        };
        Ok(TerminalLaw::deterministic(payoff))
    }

    pub fn mc_config(&self) -> McConfig {
        let mut mc = McConfig::new(
            self.mc.n_paths,
            self.mc.n_steps.unwrap_or(self.time.n_steps),
            self.mc.seed,
        );
        mc.antithetic = self.mc.antithetic;
        mc
    }

    /// Hedges that need no grid computation; `variance_min` is resolved by
    /// the caller.
    pub fn simple_hedge(&self) -> Result<Option<HedgeStrategy<f64>>, CliError> {
        let h = &self.hedge;
        Ok(match h.kind.as_str() {
            "zero" => Some(HedgeStrategy::Zero),
            "constant" => Some(HedgeStrategy::Constant(h.phi.unwrap_or(0.0))),
            "bs_delta" => Some(HedgeStrategy::BlackScholesDelta {
                strike: h.strike.or(self.payoff.strike).unwrap_or(0.0),
            }),
            "table" => {
                let path = h.table.as_deref().unwrap_or_default();
                Some(HedgeStrategy::tabulated(read_table(Path::new(path))?))
            }
            _ => None,
        })
    }
}

/// Reads a `t,s,phi` CSV (comment lines start with `#`), rows grouped by
/// time with the same S nodes in each group.
pub fn read_table(path: &Path) -> Result<HedgeTable<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |line: usize, why: &str| {
        CliError::config("hedge.table", format!("{}:{line}: {why}", path.display()))
    };
    let mut times: Vec<f64> = Vec::new();
    let mut s_nodes: Vec<f64> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut seen_header = false;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_header {
            if line.replace(' ', "") != "t,s,phi" {
                return Err(bad(n + 1, "expected header `t,s,phi`"));
            }
            seen_header = true;
            continue;
        }
        let cols: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad(n + 1, "non-numeric field"))?;
        let [t, s, phi] = cols[..] else {
            return Err(bad(n + 1, "expected three columns"));
        };
        if times.last() != Some(&t) {
            times.push(t);
            values.push(Vec::new());
        }
        let row = values.last_mut().expect("a row was pushed");
        if times.len() == 1 {
            s_nodes.push(s);
        } else if s_nodes.get(row.len()) != Some(&s) {
            return Err(bad(n + 1, "S nodes differ between time rows"));
        }
        row.push(phi);
    }
    Ok(HedgeTable::new(times, s_nodes, values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[market]
mu = 0.1
sigma = 0.2
r = 0.05

[grid]
s_min = 50.0
s_max = 200.0
n_s = 41
n_f = 100

[time]
maturity = 1.0
n_steps = 10

[payoff]
kind = "call"
strike = 100.0
"#;

    fn key_of(err: CliError) -> String {
        match err {
            CliError::Config { key, .. } => key,
            CliError::Core(measure_dyn::Error::Config { key, .. }) => key,
            other => panic!("not a config error: {other}"),
        }
    }

    #[test]
    fn defaults_fill_optional_sections() {
        let cfg = RunConfig::parse(BASE).unwrap();
        assert_eq!(cfg.hedge.kind, "zero");
        assert_eq!(cfg.mc.n_paths, 100_000);
        assert_eq!(cfg.mc_config().n_steps, 10);
        assert!(cfg.mc.antithetic);
        assert_eq!(cfg.remap().unwrap(), FRemap::LogParabolic);
    }

    #[test]
    fn errors_name_the_key() {
        let swapped = BASE.replace("s_min = 50.0", "s_min = 500.0");
        let cfg = RunConfig::parse(&swapped).unwrap();
        let err = measure_dyn::build_grids(&cfg.grid_config(), &cfg.law().unwrap()).unwrap_err();
        assert!(matches!(err, measure_dyn::Error::Config { ref key, .. } if key == "grid.s_min"));

        let cases = [
            (BASE.replace("sigma = 0.2", "sigma = -0.2"), "market.sigma"),
            (
                BASE.replace("kind = \"call\"", "kind = \"swap\""),
                "payoff.kind",
            ),
            (BASE.replace("strike = 100.0", ""), "payoff.strike"),
            (
                format!("{BASE}\n[hedge]\nkind = \"constant\"\n"),
                "hedge.phi",
            ),
            (format!("{BASE}\n[run]\nq = 1.5\n"), "run.q"),
            (
                format!("{BASE}\n[run]\ncheckpoints = [11]\n"),
                "run.checkpoints",
            ),
            (format!("{BASE}\n[mc]\nn_paths = 0\n"), "mc.n_paths"),
            (
                format!("{BASE}\n[mc]\nsampling = \"sobol\"\n"),
                "mc.sampling",
            ),
        ];
        for (text, key) in cases {
            assert_eq!(key_of(RunConfig::parse(&text).unwrap_err()), key, "{key}");
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = RunConfig::parse(&BASE.replace("mu = 0.1", "mu = 0.1\nnu = 3")).unwrap_err();
        assert!(err.to_string().contains("nu"));
    }

    #[test]
    fn digest_tracks_overrides() {
        let a = RunConfig::parse(BASE).unwrap();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.mc.seed = 99;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn table_round_trip() {
        let dir = std::env::temp_dir().join(format!("md-table-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("phi.csv");
        std::fs::write(
            &path,
            "# header\nt,s,phi\n0,90,0.25\n0,110,0.75\n0.5,90,0.5\n0.5,110,1\n",
        )
        .unwrap();
        let table = read_table(&path).unwrap();
        assert_eq!(table.times, vec![0.0, 0.5]);
        assert_eq!(table.s_nodes, vec![90.0, 110.0]);
        assert_eq!(table.values[1], vec![0.5, 1.0]);

        std::fs::write(&path, "t,s,phi\n0,90,0.25\n0,110,0.75\n0.5,95,0.5\n").unwrap();
        assert_eq!(key_of(read_table(&path).unwrap_err()), "hedge.table");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
