//! Plain-text output: number formatting and the CSV schemas shared by the
//! engines and the command-line driver.

use std::io::Write;

use crate::grids::TimeGrid;
use crate::scalar::Scalar;

/// Significant digits used for every number written to disk.
pub const SIGNIFICANT_DIGITS: usize = 12;

/// Decimal rendering with 12 significant digits and no trailing zeros.
pub fn fmt_num<T: Scalar>(x: T) -> String {
    let x = x.as_f64();
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let decimals = (SIGNIFICANT_DIGITS as i32 - 1 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        if s == "-0" {
            "0".to_string()
        } else {
            s
        }
    } else {
        format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
    }
}

/// Writes `# <header>` when a header is given.
pub fn header<W: Write>(out: &mut W, header: Option<&str>) -> std::io::Result<()> {
    if let Some(h) = header {
        writeln!(out, "# {h}")?;
    }
    Ok(())
}

/// `t,s,<name>` rows for a surface indexed `[time node][s node]`.
pub fn write_surface<W: Write, T: Scalar>(
    out: &mut W,
    head: Option<&str>,
    name: &str,
    times: &[T],
    s_nodes: &[T],
    surface: &[Vec<T>],
) -> std::io::Result<()> {
    header(out, head)?;
    writeln!(out, "t,s,{name}")?;
    for (t, row) in times.iter().zip(surface) {
        let t = fmt_num(*t);
        for (s, v) in s_nodes.iter().zip(row) {
            writeln!(out, "{t},{},{}", fmt_num(*s), fmt_num(*v))?;
        }
    }
    Ok(())
}

/// `step,time,<name>` rows, one per backward step. Step `k` moves from node
/// `k + 1` to node `k` and is stamped with the earlier time.
pub fn write_step_series<W: Write, T: Scalar>(
    out: &mut W,
    head: Option<&str>,
    name: &str,
    time: &TimeGrid<T>,
    per_step: &[T],
) -> std::io::Result<()> {
    header(out, head)?;
    writeln!(out, "step,time,{name}")?;
    for (k, v) in per_step.iter().enumerate() {
        writeln!(out, "{k},{},{}", fmt_num(time.time(k)), fmt_num(*v))?;
    }
    Ok(())
}
