//! Portfolio tail probabilities and the loss-count distribution.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::MaturityGrid;
use crate::portfolio::VALIDATION_TOL;

/// The "top" data: `w(m, j)` is the probability of at least `j` defaults by
/// `T(m)`, stored as an (M+1) x (N+1) matrix. Row 0 is the delta at zero
/// defaults (`w(0, 0) = 1`, `w(0, j>0) = 0`) and column 0 is identically 1.
#[derive(Debug, Clone)]
pub struct TailCurve {
    w: DMatrix<f64>,
    grid: MaturityGrid,
}

impl TailCurve {
    /// `rows` holds one row per maturity `T1..TM` with `N+1` entries
    /// `w(m, 0..=N)`; the time-zero row is prepended here.
    pub fn new(rows: DMatrix<f64>, grid: MaturityGrid) -> Result<Self> {
        let m = grid.interval_count();
        if rows.nrows() != m {
            return Err(Error::invalid(format!(
                "tail curve has {} maturity rows, grid has {} intervals",
                rows.nrows(),
                m
            )));
        }
        let ncol = rows.ncols();
        if ncol < 2 {
            return Err(Error::invalid("tail curve needs columns j = 0..=N"));
        }
        let mut w = DMatrix::zeros(m + 1, ncol);
        w[(0, 0)] = 1.0;
        w.view_mut((1, 0), (m, ncol)).copy_from(&rows);
        let curve = TailCurve { w, grid };
        curve.validate()?;
        Ok(curve)
    }

    fn validate(&self) -> Result<()> {
        let (rows, cols) = self.w.shape();
        for m in 1..rows {
            if (self.w[(m, 0)] - 1.0).abs() > VALIDATION_TOL {
                return Err(Error::invalid(format!(
                    "w({m}, 0) must be 1, got {}",
                    self.w[(m, 0)]
                )));
            }
            for j in 0..cols {
                let v = self.w[(m, j)];
                if !(-VALIDATION_TOL..=1.0 + VALIDATION_TOL).contains(&v) {
                    return Err(Error::invalid(format!(
                        "tail probability w({m}, {j}) = {v} outside [0, 1]"
                    )));
                }
                if j > 0 && v > self.w[(m, j - 1)] + VALIDATION_TOL {
                    return Err(Error::invalid(format!(
                        "tail probabilities must be non-increasing in j at (m={m}, j={j})"
                    )));
                }
                if v + VALIDATION_TOL < self.w[(m - 1, j)] {
                    return Err(Error::invalid(format!(
                        "tail probabilities must be non-decreasing in m at (m={m}, j={j})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of names N.
    pub fn n_names(&self) -> usize {
        self.w.ncols() - 1
    }

    pub fn n_intervals(&self) -> usize {
        self.w.nrows() - 1
    }

    pub fn grid(&self) -> &MaturityGrid {
        &self.grid
    }

    /// `w(m, j)`; `m = 0..=M`, `j = 0..=N`.
    pub fn value(&self, m: usize, j: usize) -> f64 {
        self.w[(m, j)]
    }

    /// Forward increment `w(m, j) - w(m-1, j)` for interval `m` (1-based).
    pub fn increment(&self, m: usize, j: usize) -> f64 {
        self.w[(m, j)] - self.w[(m - 1, j)]
    }

    /// Increments for default orders `j = 1..=N` of interval `m`, clamped at
    /// zero (negative noise below tolerance is rejected by `new`).
    pub fn increments(&self, m: usize) -> DVector<f64> {
        let n = self.n_names();
        DVector::from_fn(n, |j, _| self.increment(m, j + 1).max(0.0))
    }

    /// Expected number of defaults by `T(m)` according to the top model,
    /// `sum_j w(m, j)` over `j >= 1`.
    pub fn expected_defaults(&self, m: usize) -> f64 {
        (1..=self.n_names()).map(|j| self.w[(m, j)]).sum()
    }

    /// Loss-count distribution `rho_n` at maturity row `m`: `rho_n = w_n - w_(n+1)`
    /// for `n < N` and `rho_N = w_N`.
    pub fn loss_pmf(&self, m: usize) -> Result<DVector<f64>> {
        let n = self.n_names();
        let mut rho = DVector::zeros(n + 1);
        for j in 0..n {
            let d = self.w[(m, j)] - self.w[(m, j + 1)];
            if d < -VALIDATION_TOL {
                return Err(Error::invalid(format!(
                    "tail row {m} increases at j = {}",
                    j + 1
                )));
            }
            rho[j] = d.max(0.0);
        }
        rho[n] = self.w[(m, n)].max(0.0);
        Ok(rho)
    }
}

/// Standalone differencing of a single monotone tail row `w(0..=N)` into the
/// loss-count distribution.
pub fn tail_to_pmf(row: &[f64]) -> Result<DVector<f64>> {
    if row.len() < 2 {
        return Err(Error::invalid("tail row needs entries j = 0..=N"));
    }
    let n = row.len() - 1;
    let mut rho = DVector::zeros(n + 1);
    for j in 0..n {
        let d = row[j] - row[j + 1];
        if d < -VALIDATION_TOL {
            return Err(Error::invalid(format!("tail row increases at j = {}", j + 1)));
        }
        rho[j] = d.max(0.0);
    }
    rho[n] = row[n];
    Ok(rho)
}

/// Re-cumulates a loss-count distribution into a tail row (inverse of
/// `tail_to_pmf`).
pub fn pmf_to_tail(rho: &DVector<f64>) -> Vec<f64> {
    let n = rho.len() - 1;
    let mut w = vec![0.0; n + 1];
    let mut acc = 0.0;
    for j in (0..=n).rev() {
        acc += rho[j];
        w[j] = acc;
    }
    w
}
