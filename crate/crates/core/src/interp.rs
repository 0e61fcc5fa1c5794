//! Transfer of a density row in F under the affine map `F -> c F + a`.
//!
//! Rows are handled in index coordinates: node `j` sits at `p = j`. A step
//! evaluates the row at `p_j = p0 + c j` for every output node.

use crate::scalar::Scalar;

/// How a density row is carried to shifted, rescaled F arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FRemap {
    /// Point evaluation of the piecewise-linear interpolant, times the
    /// Jacobian `c`.
    Linear,
    /// Node values are treated as cell averages; each output cell receives
    /// the exact integral of a positivity-limited piecewise-parabolic
    /// reconstruction over its preimage. Conserves mass to round-off and
    /// adds far less numerical diffusion than [`FRemap::Linear`].
    Parabolic,
    /// Conservative like [`FRemap::Parabolic`], but each cell carries
    /// `exp` of a parabola fitted to the log of its neighbours and scaled to
    /// the cell average. Positive by construction and exact in shape for
    /// Gaussian bumps, so mollified atoms keep their form over many steps.
    #[default]
    LogParabolic,
}

/// Gauss-Legendre nodes and weights on [-1, 1].
const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// A row prepared for repeated remapping.
#[derive(Debug, Clone)]
pub struct PreparedRow<'a, T> {
    values: &'a [T],
    kind: FRemap,
    /// Parabolic: limited left/right edge values per cell. LogParabolic:
    /// slope and curvature of the log-shape in cell coordinates.
    left: Vec<T>,
    right: Vec<T>,
    /// LogParabolic: integral of the unscaled shape over its cell.
    norm: Vec<T>,
    /// Running mass in index units: for `Linear` the trapezoid integral up to
    /// node `m`, otherwise the sum of cells below `m`.
    cum: Vec<T>,
    /// First and last non-zero node.
    pub support: Option<(usize, usize)>,
}

impl<'a, T: Scalar> PreparedRow<'a, T> {
    pub fn new(values: &'a [T], kind: FRemap) -> Self {
        let n = values.len();
        let first = values.iter().position(|v| *v != T::zero());
        let support = first.map(|a| (a, values.iter().rposition(|v| *v != T::zero()).unwrap_or(a)));
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = T::zero();
        cum.push(acc);
        let (mut left, mut right, mut norm) = (Vec::new(), Vec::new(), Vec::new());
        match kind {
            FRemap::Linear => {
                let half = T::lit(0.5);
                for w in values.windows(2) {
                    acc = acc + (w[0] + w[1]) * half;
                    cum.push(acc);
                }
            }
            FRemap::Parabolic => {
                for v in values {
                    acc = acc + *v;
                    cum.push(acc);
                }
                (left, right) = parabolic_edges(values, support);
            }
            FRemap::LogParabolic => {
                for v in values {
                    acc = acc + *v;
                    cum.push(acc);
                }
                (left, right, norm) = log_parabolas(values, support);
            }
        }
        Self {
            values,
            kind,
            left,
            right,
            norm,
            cum,
            support,
        }
    }

    /// Total mass in index units.
    pub fn total(&self) -> T {
        self.cum[self.cum.len() - 1]
    }

    /// Index interval outside which the reconstruction vanishes.
    pub fn reach(&self) -> Option<(T, T)> {
        let pad = match self.kind {
            FRemap::Linear => T::one(),
            FRemap::Parabolic | FRemap::LogParabolic => T::lit(0.5),
        };
        self.support
            .map(|(a, b)| (T::from_usize_lossy(a) - pad, T::from_usize_lossy(b) + pad))
    }

    /// Mass of the reconstruction on `(-inf, p]` in index units.
    pub fn mass_below(&self, p: T) -> T {
        let n = self.values.len();
        match self.kind {
            FRemap::Linear => {
                if p <= T::zero() {
                    return T::zero();
                }
                if p >= T::from_usize_lossy(n - 1) {
                    return self.total();
                }
                let m = p.floor();
                let a = p - m;
                let m = m.to_usize().unwrap_or(0);
                let (p0, p1) = (self.values[m], self.values[m + 1]);
                self.cum[m] + p0 * a + (p1 - p0) * a * a * T::lit(0.5)
            }
            FRemap::LogParabolic => {
                let shifted = p + T::lit(0.5);
                if shifted <= T::zero() {
                    return T::zero();
                }
                if shifted >= T::from_usize_lossy(n) {
                    return self.total();
                }
                let m = shifted.floor();
                let xi = shifted - m;
                let m = m.to_usize().unwrap_or(0);
                if self.norm[m] == T::zero() {
                    return self.cum[m];
                }
                let half = T::lit(0.5);
                let part = shape_integral(self.left[m], self.right[m], -half, xi - half);
                self.cum[m] + self.values[m] * part / self.norm[m]
            }
            FRemap::Parabolic => {
                let shifted = p + T::lit(0.5);
                if shifted <= T::zero() {
                    return T::zero();
                }
                if shifted >= T::from_usize_lossy(n) {
                    return self.total();
                }
                let m = shifted.floor();
                let xi = shifted - m;
                let m = m.to_usize().unwrap_or(0);
                let (l, r, avg) = (self.left[m], self.right[m], self.values[m]);
                let da = r - l;
                let a6 = T::lit(6.0) * (avg - (l + r) * T::lit(0.5));
                let xi2 = xi * xi;
                self.cum[m]
                    + l * xi
                    + da * xi2 * T::lit(0.5)
                    + a6 * (xi2 * T::lit(0.5) - xi2 * xi / T::lit(3.0))
            }
        }
    }

    /// Adds `weight` times the remapped row to `out`, where output node `j`
    /// reads the row at index position `p0 + c j`. Only output nodes whose
    /// preimage meets the support are touched.
    pub fn accumulate(&self, p0: T, c: T, weight: T, out: &mut [T]) {
        let Some((lo, hi)) = self.reach() else {
            return;
        };
        let n_out = out.len();
        let half = match self.kind {
            FRemap::Linear => T::zero(),
            FRemap::Parabolic | FRemap::LogParabolic => c * T::lit(0.5),
        };
        let j_lo = ((lo - half - p0) / c).floor().max(T::zero());
        let j_hi = ((hi + half - p0) / c).ceil();
        let last = T::from_usize_lossy(n_out - 1);
        if j_hi < T::zero() || j_lo > last {
            return;
        }
        let j_lo = j_lo.to_usize().unwrap_or(0);
        let j_hi = j_hi.min(last).to_usize().unwrap_or(0);
        match self.kind {
            FRemap::Linear => {
                let wc = weight * c;
                for (j, o) in out.iter_mut().enumerate().take(j_hi + 1).skip(j_lo) {
                    *o = *o + wc * self.eval_linear(p0 + c * T::from_usize_lossy(j));
                }
            }
            FRemap::Parabolic | FRemap::LogParabolic => {
                let mut below = self.mass_below(p0 + c * T::from_usize_lossy(j_lo) - half);
                for (j, o) in out.iter_mut().enumerate().take(j_hi + 1).skip(j_lo) {
                    let upper = self.mass_below(p0 + c * T::from_usize_lossy(j) + half);
                    let cell = (upper - below).max(T::zero());
                    *o = *o + weight * cell;
                    below = upper;
                }
            }
        }
    }

    /// Mass (index units) that a remap with `p0`, `c` onto `n_out` nodes
    /// carries inside the output grid.
    pub fn covered(&self, p0: T, c: T, n_out: usize) -> T {
        let last = p0 + c * T::from_usize_lossy(n_out - 1);
        match self.kind {
            FRemap::Linear => self.mass_below(last) - self.mass_below(p0),
            FRemap::Parabolic | FRemap::LogParabolic => {
                // each output node takes a whole cell, but the trapezoid rule
                // counts the two end nodes at half weight
                let half = c * T::lit(0.5);
                let (a, b) = (self.mass_below(p0 - half), self.mass_below(p0 + half));
                let (y, z) = (self.mass_below(last - half), self.mass_below(last + half));
                (z - a) - T::lit(0.5) * ((b - a) + (z - y))
            }
        }
    }

    fn eval_linear(&self, p: T) -> T {
        let n = self.values.len();
        if p < T::zero() || p > T::from_usize_lossy(n - 1) {
            return T::zero();
        }
        let m = p.floor();
        let a = p - m;
        let m = m.to_usize().unwrap_or(0);
        if m >= n - 1 {
            return self.values[n - 1];
        }
        self.values[m] + (self.values[m + 1] - self.values[m]) * a
    }
}

/// Fourth-order edge estimates, bounded by the adjacent cells, then limited
/// so that no cell parabola dips below zero.
fn parabolic_edges<T: Scalar>(values: &[T], support: Option<(usize, usize)>) -> (Vec<T>, Vec<T>) {
    let n = values.len();
    let mut left = vec![T::zero(); n];
    let mut right = vec![T::zero(); n];
    let Some((lo, hi)) = support else {
        return (left, right);
    };
    let at = |k: isize| -> T {
        if k < 0 || k >= n as isize {
            T::zero()
        } else {
            values[k as usize]
        }
    };
    let c7 = T::lit(7.0 / 12.0);
    let c1 = T::lit(1.0 / 12.0);
    // edge between cells k-1 and k
    let edge = |k: isize| -> T {
        let (a, b) = (at(k - 1), at(k));
        let e = c7 * (a + b) - c1 * (at(k - 2) + at(k + 1));
        e
    };
    let from = lo.saturating_sub(1);
    let to = (hi + 1).min(n - 1);
    let mut next_left = edge(from as isize);
    for j in from..=to {
        let l0 = next_left;
        let r0 = edge(j as isize + 1);
        next_left = r0;
        let (l, r) = limit_cell(values[j], l0, r0);
        left[j] = l;
        right[j] = r;
    }
    (left, right)
}

/// Log-shape of every cell in the support: `exp(b x + k x^2)` on
/// `x in [-1/2, 1/2]`, returned as `(b, k, integral over the cell)`.
///
/// The parabola goes through the logs of the two neighbours. Cell averages
/// of a Gaussian of variance `v` (cells squared) look like point values of
/// one with variance `v + 1/12`; slope and curvature are corrected for that.
fn log_parabolas<T: Scalar>(
    values: &[T],
    support: Option<(usize, usize)>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = values.len();
    let mut slope = vec![T::zero(); n];
    let mut curv = vec![T::zero(); n];
    let mut norm = vec![T::zero(); n];
    let Some((lo, hi)) = support else {
        return (slope, curv, norm);
    };
    let log_at = |k: usize| -> Option<T> {
        let v = values[k];
        (v > T::zero()).then(|| v.ln())
    };
    let half = T::lit(0.5);
    for j in lo..=hi {
        let Some(mid) = log_at(j) else {
            continue;
        };
        let below = if j > 0 { log_at(j - 1) } else { None };
        let above = if j + 1 < n { log_at(j + 1) } else { None };
        let (b, k) = match (below, above) {
            (Some(l), Some(r)) => ((r - l) * half, (r - mid - mid + l) * half),
            (None, Some(r)) => (r - mid, T::zero()),
            (Some(l), None) => (mid - l, T::zero()),
            (None, None) => (T::zero(), T::zero()),
        };
        let scale = T::one() / (T::one() + k.max(T::lit(-3.0)) / T::lit(6.0));
        let (b, k) = (b * scale, k * scale);
        slope[j] = b;
        curv[j] = k;
        norm[j] = shape_integral(b, k, -half, half);
    }
    (slope, curv, norm)
}

/// Integral of `exp(b x + k x^2)` over `[lo, hi]` inside one cell.
fn shape_integral<T: Scalar>(b: T, k: T, lo: T, hi: T) -> T {
    let mid = (lo + hi) * T::lit(0.5);
    let half = (hi - lo) * T::lit(0.5);
    let mut acc = T::zero();
    for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
        let x = mid + half * T::lit(*x);
        acc = acc + T::lit(w) * (b * x + k * x * x).exp();
    }
    acc * half
}

/// Scales the cell parabola towards its average until it is non-negative.
/// Mass is unchanged and smooth positive profiles are left alone.
fn limit_cell<T: Scalar>(avg: T, l: T, r: T) -> (T, T) {
    let da = r - l;
    let a6 = T::lit(6.0) * (avg - (l + r) * T::lit(0.5));
    let mut min = l.min(r);
    // interior extremum of l + xi (da + a6 (1 - xi)); a minimum when a6 < 0
    if a6 < T::zero() {
        let xi = (da + a6) / (T::lit(2.0) * a6);
        if xi > T::zero() && xi < T::one() {
            min = min.min(l + xi * (da + a6 * (T::one() - xi)));
        }
    }
    if min >= T::zero() {
        return (l, r);
    }
    if avg <= T::zero() {
        return (T::zero(), T::zero());
    }
    let theta = avg / (avg - min);
    (avg + theta * (l - avg), avg + theta * (r - avg))
}
