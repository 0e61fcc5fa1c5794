//! Terminal laws `P(F | S, T)` and their representation on the grid.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grids::{cumulative, ConditionalPdf, SpaceGrid};
use crate::scalar::Scalar;

/// Atoms are mollified with Gaussian bumps truncated at this many widths.
pub const BUMP_TRUNCATION: f64 = 8.0;
/// A payoff further than this many widths outside the F axis is an error.
pub const RANGE_SLACK_WIDTHS: f64 = 5.0;

/// Cash flow at maturity as a function of the terminal price.
#[derive(Clone)]
pub enum Payoff<T> {
    Call {
        strike: T,
    },
    Put {
        strike: T,
    },
    /// Pays `cash` when `S > strike`.
    Binary {
        strike: T,
        cash: T,
    },
    Forward {
        strike: T,
    },
    /// Constant amount; `Cash { amount: 0 }` is the zero-endowment case.
    Cash {
        amount: T,
    },
    Custom(Arc<dyn Fn(T) -> T + Send + Sync>),
}

impl<T: Scalar> Payoff<T> {
    pub fn value(&self, s: T) -> T {
        match self {
            Payoff::Call { strike } => (s - *strike).max(T::zero()),
            Payoff::Put { strike } => (*strike - s).max(T::zero()),
            Payoff::Binary { strike, cash } => {
                if s > *strike {
                    *cash
                } else {
                    T::zero()
                }
            }
            Payoff::Forward { strike } => s - *strike,
            Payoff::Cash { amount } => *amount,
            Payoff::Custom(f) => f(s),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Payoff<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payoff::Call { strike } => write!(f, "Call({strike:?})"),
            Payoff::Put { strike } => write!(f, "Put({strike:?})"),
            Payoff::Binary { strike, cash } => write!(f, "Binary({strike:?}, {cash:?})"),
            Payoff::Forward { strike } => write!(f, "Forward({strike:?})"),
            Payoff::Cash { amount } => write!(f, "Cash({amount:?})"),
            Payoff::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Atom<T> {
    pub weight: T,
    pub payoff: Payoff<T>,
}

/// Maturity condition of the contract value.
#[derive(Debug, Clone)]
pub enum TerminalLaw<T> {
    Deterministic(Payoff<T>),
    /// Random payoff: component `k` is realised with probability `weight`.
    AtomMixture(Vec<Atom<T>>),
    /// Density already resolved on a grid.
    SmoothDensity(ConditionalPdf<T>),
}

impl<T: Scalar> TerminalLaw<T> {
    pub fn deterministic(payoff: Payoff<T>) -> Self {
        TerminalLaw::Deterministic(payoff)
    }

    /// `delta(F)`: nothing is owed at maturity.
    pub fn zero_endowment() -> Self {
        TerminalLaw::Deterministic(Payoff::Cash { amount: T::zero() })
    }

    pub fn mixture(components: Vec<(T, Payoff<T>)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::config(
                "payoff.weights",
                "mixture needs at least one component",
            ));
        }
        let mut total = T::zero();
        for (w, _) in &components {
            if !(*w > T::zero()) {
                return Err(Error::config(
                    "payoff.weights",
                    format!("weight {w} must be positive"),
                ));
            }
            total = total + *w;
        }
        if (total - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::config(
                "payoff.weights",
                format!("weights sum to {total}, not 1"),
            ));
        }
        Ok(TerminalLaw::AtomMixture(
            components
                .into_iter()
                .map(|(weight, payoff)| Atom { weight, payoff })
                .collect(),
        ))
    }

    /// Mixture of calls with random strike.
    pub fn random_strike_call(strikes: &[T], weights: &[T]) -> Result<Self> {
        if strikes.len() != weights.len() {
            return Err(Error::config(
                "payoff.weights",
                "one weight per strike required",
            ));
        }
        Self::mixture(
            weights
                .iter()
                .zip(strikes)
                .map(|(w, k)| (*w, Payoff::Call { strike: *k }))
                .collect(),
        )
    }

    /// The atoms as `(weight, payoff)`; empty for a grid density.
    pub fn atoms(&self) -> Vec<(T, &Payoff<T>)> {
        match self {
            TerminalLaw::Deterministic(p) => vec![(T::one(), p)],
            TerminalLaw::AtomMixture(a) => a.iter().map(|a| (a.weight, &a.payoff)).collect(),
            TerminalLaw::SmoothDensity(_) => Vec::new(),
        }
    }

    /// Smallest and largest atom location over the given prices.
    pub fn payoff_range(&self, s_nodes: &[T]) -> Option<(T, T)> {
        let atoms = self.atoms();
        if atoms.is_empty() {
            return None;
        }
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for s in s_nodes {
            for (_, p) in &atoms {
                let v = p.value(*s);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        Some((lo, hi))
    }

    /// Exact mean, variance and third central moment of `F_T` given `S_T = s`.
    pub fn atom_moments(&self, s: T) -> Option<(T, T, T)> {
        let atoms = self.atoms();
        if atoms.is_empty() {
            return None;
        }
        let mean: T = atoms.iter().map(|(w, p)| *w * p.value(s)).sum();
        let (mut v, mut q) = (T::zero(), T::zero());
        for (w, p) in &atoms {
            let d = p.value(s) - mean;
            v = v + *w * d * d;
            q = q + *w * d * d * d;
        }
        Some((mean, v, q))
    }
}

/// Default mollification width: two F cells.
pub fn default_mollify_width<T: Scalar>(grid: &SpaceGrid<T>) -> T {
    grid.df * T::lit(2.0)
}

/// Grid seed of a terminal law together with the mass clipped per row.
#[derive(Debug, Clone)]
pub struct TerminalPdf<T> {
    pub pdf: ConditionalPdf<T>,
    /// Mass lost to the F-grid ends before renormalisation, per S row.
    pub leaked: Vec<T>,
}

/// Grid representation of a terminal law: each atom becomes a Gaussian bump of
/// its weight with standard deviation `mollify_width`, rows renormalised.
pub fn terminal_pdf<T: Scalar>(
    law: &TerminalLaw<T>,
    grid: Arc<SpaceGrid<T>>,
    mollify_width: T,
    maturity: T,
) -> Result<ConditionalPdf<T>> {
    terminal_pdf_report(law, grid, mollify_width, maturity).map(|t| t.pdf)
}

pub fn terminal_pdf_report<T: Scalar>(
    law: &TerminalLaw<T>,
    grid: Arc<SpaceGrid<T>>,
    mollify_width: T,
    maturity: T,
) -> Result<TerminalPdf<T>> {
    if !(mollify_width > T::zero()) {
        return Err(Error::config("grid.mollify_width", "must be positive"));
    }
    if let TerminalLaw::SmoothDensity(p) = law {
        if p.grid() != &*grid {
            return Err(Error::State(
                "smooth terminal density lives on a different grid".into(),
            ));
        }
        let mut pdf = ConditionalPdf::new(grid, p.values().to_vec(), maturity)?;
        let masses = pdf.normalize_rows();
        let leaked = masses
            .iter()
            .map(|m| (T::one() - *m).max(T::zero()))
            .collect();
        return Ok(TerminalPdf { pdf, leaked });
    }
    let (n_s, n_f) = (grid.n_s(), grid.n_f());
    let (f_lo, f_hi, h) = (grid.f_min(), grid.f_max(), grid.df);
    let slack = T::lit(RANGE_SLACK_WIDTHS) * mollify_width;
    let reach = T::lit(BUMP_TRUNCATION) * mollify_width;
    let norm = T::one() / (mollify_width * (T::lit(2.0) * T::PI()).sqrt());
    let atoms = law.atoms();
    let mut values = vec![T::zero(); n_s * n_f];
    let mut leaked = Vec::with_capacity(n_s);
    for (i, s) in grid.s_nodes.iter().enumerate() {
        let row = &mut values[i * n_f..(i + 1) * n_f];
        for (w, payoff) in &atoms {
            let c = payoff.value(*s);
            if !c.is_finite() || c < f_lo - slack || c > f_hi + slack {
                return Err(Error::Range(format!(
                    "payoff {c} at S={s} lies outside the F grid [{f_lo}, {f_hi}]; rebuild the grid"
                )));
            }
            let j0 = grid.f_position(c - reach).ceil().max(T::zero());
            let j1 = grid
                .f_position(c + reach)
                .floor()
                .min(T::from_usize_lossy(n_f - 1));
            if j1 < j0 {
                continue;
            }
            let (j0, j1) = (j0.to_usize().unwrap_or(0), j1.to_usize().unwrap_or(0));
            for j in j0..=j1 {
                let z = (grid.f_nodes[j] - c) / mollify_width;
                row[j] = row[j] + *w * norm * (-(z * z) / T::lit(2.0)).exp();
            }
        }
        let mass = crate::grids::trapezoid(row, h);
        leaked.push((T::one() - mass).max(T::zero()));
        if mass > T::zero() {
            row.iter_mut().for_each(|v| *v = *v / mass);
        }
    }
    let pdf = ConditionalPdf::new(grid, values, maturity)?;
    Ok(TerminalPdf { pdf, leaked })
}

/// Draws `F_T` given `S_T = s_t`; atoms are sampled exactly.
pub fn sample_terminal<T: Scalar, R: Rng + ?Sized>(
    law: &TerminalLaw<T>,
    s_t: T,
    rng: &mut R,
) -> Result<T> {
    if !(s_t > T::zero()) {
        return Err(Error::Domain(format!(
            "terminal price must be positive, got {s_t}"
        )));
    }
    match law {
        TerminalLaw::Deterministic(p) => Ok(p.value(s_t)),
        TerminalLaw::AtomMixture(atoms) => {
            let u = T::lit(rng.gen::<f64>());
            let mut acc = T::zero();
            for a in atoms {
                acc = acc + a.weight;
                if u < acc {
                    return Ok(a.payoff.value(s_t));
                }
            }
            Ok(atoms[atoms.len() - 1].payoff.value(s_t))
        }
        TerminalLaw::SmoothDensity(pdf) => {
            let g = pdf.grid();
            let i = g.nearest_s_index(s_t);
            let cdf = cumulative(pdf.row(i), g.df);
            let mass = cdf[cdf.len() - 1];
            let target = T::lit(rng.gen::<f64>()) * mass;
            let j = cdf
                .partition_point(|c| *c < target)
                .max(1)
                .min(cdf.len() - 1);
            let frac = (target - cdf[j - 1]) / (cdf[j] - cdf[j - 1]);
            Ok(g.f_min() + g.df * (T::from_usize_lossy(j - 1) + frac))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::stream_rng;
    use crate::stats::{ks_statistic, sorted};

    fn grid() -> Arc<SpaceGrid<f64>> {
        Arc::new(SpaceGrid::new(60.0, 140.0, 41, -20.0, 60.0, 801).unwrap())
    }

    fn mean_var(pdf: &ConditionalPdf<f64>, i: usize) -> (f64, f64) {
        let g = pdf.grid();
        let row = pdf.row(i);
        let m: Vec<f64> = row.iter().zip(&g.f_nodes).map(|(p, f)| p * f).collect();
        let mean = crate::grids::trapezoid(&m, g.df);
        let v: Vec<f64> = row
            .iter()
            .zip(&g.f_nodes)
            .map(|(p, f)| p * (f - mean).powi(2))
            .collect();
        (mean, crate::grids::trapezoid(&v, g.df))
    }

    #[test]
    fn out_of_the_money_call_is_bump_at_zero() {
        let g = grid();
        let law = TerminalLaw::deterministic(Payoff::Call { strike: 100.0 });
        let w = default_mollify_width(&g);
        let pdf = terminal_pdf(&law, g.clone(), w, 1.0).unwrap();
        let i = g.nearest_s_index(80.0);
        let (m, v) = mean_var(&pdf, i);
        assert!(m.abs() < 1e-9);
        assert!((v - w * w).abs() < 0.01 * w * w);
        assert!((pdf.row_integral(i) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_strike_row_has_two_half_bumps() {
        let g = grid();
        let law = TerminalLaw::random_strike_call(&[90.0, 110.0], &[0.5, 0.5]).unwrap();
        let pdf = terminal_pdf(&law, g.clone(), 0.5, 1.0).unwrap();
        let i = g.nearest_s_index(120.0);
        let s = g.s_nodes[i];
        let row = pdf.row(i);
        // mass near each atom
        for centre in [s - 90.0, s - 110.0] {
            let lo = g.f_position(centre - 3.0).round() as usize;
            let hi = g.f_position(centre + 3.0).round() as usize;
            let m = crate::grids::trapezoid(&row[lo..=hi], g.df);
            assert!((m - 0.5).abs() < 1e-4, "mass {m} near {centre}");
        }
        let (mean, var) = mean_var(&pdf, i);
        let (em, ev, _) = law.atom_moments(s).unwrap();
        assert!((mean - em).abs() < 1e-9);
        assert!((var - ev - 0.25).abs() < 1e-6);
    }

    #[test]
    fn zero_endowment_is_unit_bump_everywhere() {
        let g = grid();
        let pdf = terminal_pdf(&TerminalLaw::zero_endowment(), g.clone(), 0.3, 1.0).unwrap();
        for i in 0..g.n_s() {
            let (m, v) = mean_var(&pdf, i);
            assert!(m.abs() < 1e-12);
            assert!((v - 0.09).abs() < 1e-6);
        }
    }

    #[test]
    fn rows_integrate_to_one_and_moments_track_atoms() {
        let g = grid();
        let w = 2.0 * g.df;
        for law in [
            TerminalLaw::deterministic(Payoff::Put { strike: 95.0 }),
            TerminalLaw::deterministic(Payoff::Binary {
                strike: 100.0,
                cash: 10.0,
            }),
            TerminalLaw::random_strike_call(&[90.0, 110.0], &[0.3, 0.7]).unwrap(),
        ] {
            let pdf = terminal_pdf(&law, g.clone(), w, 1.0).unwrap();
            for i in 0..g.n_s() {
                assert!((pdf.row_integral(i) - 1.0).abs() < 1e-6);
                let (m, v) = mean_var(&pdf, i);
                let (em, ev, _) = law.atom_moments(g.s_nodes[i]).unwrap();
                assert!((m - em).abs() < w * w);
                assert!((v - ev - w * w).abs() < 1e-6 * (1.0 + ev));
            }
        }
    }

    #[test]
    fn payoff_far_outside_grid_is_range_error() {
        let g = Arc::new(SpaceGrid::new(60.0, 140.0, 11, -1.0, 10.0, 101).unwrap());
        let law = TerminalLaw::deterministic(Payoff::Call { strike: 100.0 });
        assert!(matches!(
            terminal_pdf(&law, g, 0.2, 1.0),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn mixture_weights_validated() {
        assert!(TerminalLaw::random_strike_call(&[90.0, 110.0], &[0.5, 0.6]).is_err());
        assert!(TerminalLaw::random_strike_call(&[90.0, 110.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn exact_sampling() {
        let call = TerminalLaw::deterministic(Payoff::Call { strike: 100.0 });
        let mut rng = stream_rng(1, 1);
        assert_eq!(sample_terminal(&call, 137.0, &mut rng).unwrap(), 37.0);
        let single = TerminalLaw::mixture(vec![(1.0, Payoff::Forward { strike: 90.0 })]).unwrap();
        for _ in 0..100 {
            assert_eq!(sample_terminal(&single, 100.0, &mut rng).unwrap(), 10.0);
        }
    }

    #[test]
    fn mixture_sample_mean() {
        let law = TerminalLaw::random_strike_call(&[90.0, 110.0], &[0.5, 0.5]).unwrap();
        let mut rng = stream_rng(3, 0);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_terminal(&law, 100.0, &mut rng).unwrap())
            .collect();
        let (mean, var, _) = crate::stats::central_moments(&xs);
        let se = (var / n as f64).sqrt();
        assert!((mean - 5.0).abs() < 4.0 * se);
    }

    #[test]
    fn samples_agree_with_grid_cdf_up_to_blur() {
        let g = grid();
        let law = TerminalLaw::random_strike_call(&[90.0, 110.0], &[0.4, 0.6]).unwrap();
        let w = 2.0 * g.df;
        let pdf = terminal_pdf(&law, g.clone(), w, 1.0).unwrap();
        let i = g.nearest_s_index(120.0);
        let s = g.s_nodes[i];
        let mut rng = stream_rng(8, 2);
        // blur the exact atoms with the mollifier before comparing shapes
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                sample_terminal(&law, s, &mut rng).unwrap() + w * z
            })
            .collect();
        let d = ks_statistic(&sorted(&xs), |f| pdf.row_cdf_at(i, f));
        assert!(d <= 0.01, "KS {d}");
    }

    #[test]
    fn smooth_density_is_resampled_on_its_row() {
        let g = grid();
        let row: Vec<f64> = g
            .f_nodes
            .iter()
            .map(|f| crate::scalar::norm_pdf((f - 5.0) / 2.0) / 2.0)
            .collect();
        let pdf = ConditionalPdf::new(g.clone(), row.repeat(g.n_s()), 1.0).unwrap();
        let law = TerminalLaw::SmoothDensity(pdf);
        let seeded = terminal_pdf(&law, g.clone(), 1.0, 1.0).unwrap();
        assert!((seeded.row_integral(3) - 1.0).abs() < 1e-12);
        let mut rng = stream_rng(2, 2);
        let xs: Vec<f64> = (0..50_000)
            .map(|_| sample_terminal(&law, 100.0, &mut rng).unwrap())
            .collect();
        let (m, v, _) = crate::stats::central_moments(&xs);
        assert!((m - 5.0).abs() < 0.05 && (v - 4.0).abs() < 0.15);
    }
}
