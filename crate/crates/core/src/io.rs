//! Text file formats for snapshots, tail curves, matrices and vectors.
//!
//! All formats are whitespace-delimited with `#`-prefixed metadata lines, so
//! fixtures diff cleanly. Probabilities are serialized at 17 significant
//! digits, which round-trips `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::MaturityGrid;
use crate::portfolio::PortfolioSnapshot;
use crate::tail::TailCurve;
use crate::tdmatrix::TdMatrixSet;

/// 17 significant digits: enough to reconstruct the exact `f64`.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// SHA-256 of a file's raw bytes, hex-encoded. Used for provenance lines in
/// reports.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let out = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in out {
        write!(hex, "{b:02x}").expect("write to string");
    }
    Ok(hex)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn parse_f64(path: &Path, line: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("expected a number, got '{tok}'")))
}

fn parse_grid(path: &Path, line: usize, rest: &str) -> Result<MaturityGrid> {
    let vals = rest
        .split_whitespace()
        .map(|t| parse_f64(path, line, t))
        .collect::<Result<Vec<_>>>()?;
    MaturityGrid::new(vals).map_err(|e| parse_err(path, line, e.to_string()))
}

/// Writes a snapshot: grid and recovery metadata, a header line, then one row
/// per name with cumulative default probabilities and the spread.
pub fn write_snapshot(path: &Path, snapshot: &PortfolioSnapshot) -> Result<()> {
    let m = snapshot.grid().interval_count();
    let mut out = String::new();
    out.push_str("# randthin snapshot\n");
    out.push_str("# grid:");
    for b in snapshot.grid().boundaries() {
        let _ = write!(out, " {}", fmt_float(*b));
    }
    out.push('\n');
    let _ = writeln!(out, "# recovery: {}", fmt_float(snapshot.recovery()));
    out.push_str("name");
    for k in 1..=m {
        let _ = write!(out, " Q_T{k}");
    }
    out.push_str(" spread\n");
    for i in 0..snapshot.n_names() {
        out.push_str(&snapshot.names()[i]);
        for k in 1..=m {
            let _ = write!(out, " {}", fmt_float(snapshot.cum_default_prob(i, k)));
        }
        let _ = writeln!(out, " {}", fmt_float(snapshot.spreads()[i]));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<PortfolioSnapshot> {
    let text = fs::read_to_string(path)?;
    let mut grid: Option<MaturityGrid> = None;
    let mut recovery: Option<f64> = None;
    let mut names = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut spreads = Vec::new();
    let mut header_seen = false;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(g) = rest.strip_prefix("grid:") {
                grid = Some(parse_grid(path, lineno, g)?);
            } else if let Some(r) = rest.strip_prefix("recovery:") {
                recovery = Some(parse_f64(path, lineno, r.trim())?);
            }
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let m = grid
            .as_ref()
            .ok_or_else(|| parse_err(path, lineno, "grid metadata must precede data rows"))?
            .interval_count();
        if toks.len() != m + 2 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected name + {m} probabilities + spread, got {} fields", toks.len()),
            ));
        }
        names.push(toks[0].to_string());
        let mut q = Vec::with_capacity(m);
        for t in &toks[1..=m] {
            q.push(parse_f64(path, lineno, t)?);
        }
        rows.push(q);
        spreads.push(parse_f64(path, lineno, toks[m + 1])?);
    }
    let grid = grid.ok_or_else(|| parse_err(path, 0, "missing '# grid:' metadata"))?;
    let recovery = recovery.ok_or_else(|| parse_err(path, 0, "missing '# recovery:' metadata"))?;
    if names.is_empty() {
        return Err(parse_err(path, 0, "no data rows"));
    }
    let n = names.len();
    let m = grid.interval_count();
    let cum = DMatrix::from_fn(n, m, |i, j| rows[i][j]);
    PortfolioSnapshot::new(names, cum, spreads, recovery, grid)
        .map_err(|e| parse_err(path, 0, e.to_string()))
}

/// Writes a tail curve: grid and size metadata plus one row of `N+1` tail
/// probabilities per maturity.
pub fn write_tail_curve(path: &Path, tails: &TailCurve) -> Result<()> {
    let mut out = String::new();
    out.push_str("# randthin tailcurve\n");
    out.push_str("# grid:");
    for b in tails.grid().boundaries() {
        let _ = write!(out, " {}", fmt_float(*b));
    }
    out.push('\n');
    let _ = writeln!(out, "# names: {}", tails.n_names());
    for m in 1..=tails.n_intervals() {
        for j in 0..=tails.n_names() {
            if j > 0 {
                out.push(' ');
            }
            out.push_str(&fmt_float(tails.value(m, j)));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_tail_curve(path: &Path) -> Result<TailCurve> {
    let text = fs::read_to_string(path)?;
    let mut grid: Option<MaturityGrid> = None;
    let mut n_names: Option<usize> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(g) = rest.strip_prefix("grid:") {
                grid = Some(parse_grid(path, lineno, g)?);
            } else if let Some(v) = rest.strip_prefix("names:") {
                n_names = Some(v.trim().parse().map_err(|_| {
                    parse_err(path, lineno, format!("bad name count '{}'", v.trim()))
                })?);
            }
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| parse_f64(path, lineno, t))
            .collect::<Result<Vec<_>>>()?;
        if let Some(n) = n_names {
            if vals.len() != n + 1 {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("expected {} tail values, got {}", n + 1, vals.len()),
                ));
            }
        }
        rows.push(vals);
    }
    let grid = grid.ok_or_else(|| parse_err(path, 0, "missing '# grid:' metadata"))?;
    if rows.len() != grid.interval_count() {
        return Err(parse_err(
            path,
            0,
            format!(
                "expected {} tail rows for the grid, got {}",
                grid.interval_count(),
                rows.len()
            ),
        ));
    }
    let ncols = rows[0].len();
    let body = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
    TailCurve::new(body, grid).map_err(|e| parse_err(path, 0, e.to_string()))
}

/// Writes a TD-matrix set: grid, names, the tail rows it was calibrated
/// against, then each interval's conditional matrix. The joint matrices are
/// reconstructed on read.
pub fn write_tdmatrix_set(path: &Path, set: &TdMatrixSet) -> Result<()> {
    let n = set.n_names();
    let mut out = String::new();
    out.push_str("# randthin tdmatrixset\n");
    out.push_str("# grid:");
    for b in set.grid().boundaries() {
        let _ = write!(out, " {}", fmt_float(*b));
    }
    out.push('\n');
    out.push_str("# names:");
    for name in set.names() {
        if name.contains(char::is_whitespace) {
            return Err(Error::invalid(format!("name '{name}' contains whitespace")));
        }
        let _ = write!(out, " {name}");
    }
    out.push('\n');
    for m in 1..=set.n_intervals() {
        let _ = writeln!(out, "# tail m={m}");
        for j in 0..=n {
            if j > 0 {
                out.push(' ');
            }
            out.push_str(&fmt_float(set.tails().value(m, j)));
        }
        out.push('\n');
    }
    for m in 1..=set.n_intervals() {
        let _ = writeln!(out, "# conditional m={m}");
        let p = set.conditional(m);
        for i in 0..n {
            for j in 0..n {
                if j > 0 {
                    out.push(' ');
                }
                out.push_str(&fmt_float(p[(i, j)]));
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_tdmatrix_set(path: &Path) -> Result<TdMatrixSet> {
    let text = fs::read_to_string(path)?;
    let mut grid: Option<MaturityGrid> = None;
    let mut names: Option<Vec<String>> = None;
    enum Section {
        None,
        Tail(usize),
        Conditional(usize),
    }
    let mut section = Section::None;
    let mut tail_rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut cond_rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(g) = rest.strip_prefix("grid:") {
                grid = Some(parse_grid(path, lineno, g)?);
            } else if let Some(v) = rest.strip_prefix("names:") {
                names = Some(v.split_whitespace().map(str::to_string).collect());
            } else if let Some(v) = rest.strip_prefix("tail m=") {
                let m: usize = v.trim().parse().map_err(|_| {
                    parse_err(path, lineno, format!("bad interval index '{}'", v.trim()))
                })?;
                section = Section::Tail(m);
            } else if let Some(v) = rest.strip_prefix("conditional m=") {
                let m: usize = v.trim().parse().map_err(|_| {
                    parse_err(path, lineno, format!("bad interval index '{}'", v.trim()))
                })?;
                section = Section::Conditional(m);
            }
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| parse_f64(path, lineno, t))
            .collect::<Result<Vec<_>>>()?;
        match section {
            Section::Tail(m) => tail_rows.push((m, vals)),
            Section::Conditional(m) => cond_rows.push((m, vals)),
            Section::None => {
                return Err(parse_err(path, lineno, "data before any section header"));
            }
        }
    }
    let grid = grid.ok_or_else(|| parse_err(path, 0, "missing '# grid:' metadata"))?;
    let names = names.ok_or_else(|| parse_err(path, 0, "missing '# names:' metadata"))?;
    let n = names.len();
    let m_count = grid.interval_count();
    if tail_rows.len() != m_count {
        return Err(parse_err(
            path,
            0,
            format!("expected {m_count} tail rows, got {}", tail_rows.len()),
        ));
    }
    let mut tail_body = DMatrix::zeros(m_count, n + 1);
    for (m, vals) in &tail_rows {
        if *m == 0 || *m > m_count || vals.len() != n + 1 {
            return Err(parse_err(path, 0, format!("malformed tail section m={m}")));
        }
        for (j, v) in vals.iter().enumerate() {
            tail_body[(m - 1, j)] = *v;
        }
    }
    let tails = TailCurve::new(tail_body, grid).map_err(|e| parse_err(path, 0, e.to_string()))?;
    if cond_rows.len() != m_count * n {
        return Err(parse_err(
            path,
            0,
            format!(
                "expected {} conditional rows, got {}",
                m_count * n,
                cond_rows.len()
            ),
        ));
    }
    let mut conditional = vec![DMatrix::zeros(n, n); m_count];
    let mut fill = vec![0usize; m_count];
    for (m, vals) in &cond_rows {
        if *m == 0 || *m > m_count || vals.len() != n {
            return Err(parse_err(path, 0, format!("malformed conditional section m={m}")));
        }
        let row = fill[m - 1];
        if row >= n {
            return Err(parse_err(path, 0, format!("too many rows in section m={m}")));
        }
        for (j, v) in vals.iter().enumerate() {
            conditional[m - 1][(row, j)] = *v;
        }
        fill[m - 1] += 1;
    }
    TdMatrixSet::from_conditional(names, conditional, tails)
        .map_err(|e| parse_err(path, 0, e.to_string()))
}

/// Writes a dense matrix, one row per line.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(' ');
            }
            out.push_str(&fmt_float(m[(i, j)]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a dense matrix (`#` lines ignored); all rows must agree in length.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| parse_f64(path, lineno, t))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if vals.len() != first.len() {
                return Err(parse_err(path, lineno, "ragged matrix rows"));
            }
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 0, "empty matrix"));
    }
    Ok(DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]))
}

/// Reads a vector: all numbers in the file, whitespace- or line-separated.
pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let text = fs::read_to_string(path)?;
    let mut vals = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        for tok in line.split_whitespace() {
            vals.push(parse_f64(path, idx + 1, tok)?);
        }
    }
    if vals.is_empty() {
        return Err(parse_err(path, 0, "empty vector"));
    }
    Ok(DVector::from_vec(vals))
}

pub fn write_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    let mut out = String::new();
    for x in v.iter() {
        out.push_str(&fmt_float(*x));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn float_format_round_trips() {
        for x in [
            0.1,
            1.0 / 3.0,
            std::f64::consts::PI,
            1e-300,
            0.9999999999999999,
        ] {
            let s = fmt_float(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back, x, "{s}");
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("snap.txt");
        let grid = MaturityGrid::new(vec![0.0, 1.0, 3.0]).unwrap();
        let cum = DMatrix::from_row_slice(2, 2, &[0.01, 0.05, 0.02, 0.03]);
        let snap = PortfolioSnapshot::new(
            vec!["AAA".into(), "BBB".into()],
            cum,
            vec![0.004, 0.012],
            0.4,
            grid,
        )
        .unwrap();
        write_snapshot(&path, &snap).unwrap();
        let back = read_snapshot(&path).unwrap();
        assert_eq!(back.names(), snap.names());
        assert_eq!(back.recovery(), snap.recovery());
        for i in 0..2 {
            for m in 0..=2 {
                assert_eq!(back.cum_default_prob(i, m), snap.cum_default_prob(i, m));
            }
        }
    }

    #[test]
    fn tail_curve_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tails.txt");
        let grid = MaturityGrid::new(vec![0.0, 1.0, 2.0]).unwrap();
        let rows = DMatrix::from_row_slice(2, 4, &[1.0, 0.3, 0.1, 0.02, 1.0, 0.5, 0.2, 0.05]);
        let tails = TailCurve::new(rows, grid).unwrap();
        write_tail_curve(&path, &tails).unwrap();
        let back = read_tail_curve(&path).unwrap();
        for m in 0..=2 {
            for j in 0..=3 {
                assert_eq!(back.value(m, j), tails.value(m, j));
            }
        }
    }

    #[test]
    fn tdmatrix_set_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("td.txt");
        let grid = MaturityGrid::new(vec![0.0, 1.0]).unwrap();
        let rows = DMatrix::from_row_slice(1, 3, &[1.0, 0.3, 0.1]);
        let tails = TailCurve::new(rows, grid).unwrap();
        let p = DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.4, 0.6]);
        let set =
            TdMatrixSet::from_conditional(vec!["A".into(), "B".into()], vec![p], tails).unwrap();
        write_tdmatrix_set(&path, &set).unwrap();
        let back = read_tdmatrix_set(&path).unwrap();
        assert_eq!(back.names(), set.names());
        assert!((back.conditional(1) - set.conditional(1)).abs().max() == 0.0);
        assert!((back.joint(1) - set.joint(1)).abs().max() < 1e-15);
    }

    #[test]
    fn parse_errors_carry_context() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "# randthin snapshot\n# grid: 0 1\n# recovery: 0.4\nname Q_T1 spread\nAAA froth 0.01\n").unwrap();
        let err = read_snapshot(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 5),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn matrix_and_vector_round_trip() {
        let dir = tempdir().unwrap();
        let mpath = dir.path().join("m.txt");
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.5, -0.25, 0.0, 1e-12, 9.0]);
        write_matrix(&mpath, &m).unwrap();
        assert_eq!(read_matrix(&mpath).unwrap(), m);

        let vpath = dir.path().join("v.txt");
        let v = DVector::from_vec(vec![0.25, 0.75]);
        write_vector(&vpath, &v).unwrap();
        assert_eq!(read_vector(&vpath).unwrap(), v);
    }
}
