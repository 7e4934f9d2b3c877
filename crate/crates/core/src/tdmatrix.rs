//! Default-time matrices: joint and conditional forms plus the intensity view.
//!
//! For each maturity interval `m`, `joint[(i, j)]` is the probability that
//! name `i` is the `(j+1)`-th defaulter and that this default falls inside the
//! interval; `conditional[(i, j)]` conditions on the default order landing in
//! the interval. The two are related entrywise through the forward tail
//! increments: `P_ij = p_ij * (w(m, j) - w(m-1, j))`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::MaturityGrid;
use crate::portfolio::VALIDATION_TOL;
use crate::tail::TailCurve;

/// Joint matrix from a conditional matrix and the interval's tail increments
/// (orders `j = 1..=N` mapped to columns `0..N`).
pub fn conditional_to_joint(cond: &DMatrix<f64>, increments: &DVector<f64>) -> Result<DMatrix<f64>> {
    if cond.ncols() != increments.len() {
        return Err(Error::invalid("column count must match tail increments"));
    }
    for j in 0..increments.len() {
        if increments[j] < -VALIDATION_TOL {
            return Err(Error::invalid(format!(
                "negative forward tail increment {} at order {}",
                increments[j],
                j + 1
            )));
        }
    }
    let mut joint = cond.clone();
    for j in 0..joint.ncols() {
        let dw = increments[j].max(0.0);
        joint.column_mut(j).scale_mut(dw);
    }
    Ok(joint)
}

/// Conditional matrix from a joint matrix; columns with zero increment are
/// left at zero (0/0 convention).
pub fn joint_to_conditional(joint: &DMatrix<f64>, increments: &DVector<f64>) -> Result<DMatrix<f64>> {
    if joint.ncols() != increments.len() {
        return Err(Error::invalid("column count must match tail increments"));
    }
    let mut cond = joint.clone();
    for j in 0..cond.ncols() {
        let dw = increments[j];
        if dw < -VALIDATION_TOL {
            return Err(Error::invalid(format!(
                "negative forward tail increment {} at order {}",
                dw,
                j + 1
            )));
        }
        if dw > 0.0 {
            cond.column_mut(j).scale_mut(1.0 / dw);
        } else {
            cond.column_mut(j).fill(0.0);
        }
    }
    Ok(cond)
}

/// The calibrated object: conditional and joint matrices per maturity
/// interval, together with the tail curve that links them.
#[derive(Debug, Clone)]
pub struct TdMatrixSet {
    names: Vec<String>,
    conditional: Vec<DMatrix<f64>>,
    joint: Vec<DMatrix<f64>>,
    tails: TailCurve,
}

impl TdMatrixSet {
    /// Validates column sums and nonnegativity, then derives joint matrices.
    pub fn from_conditional(
        names: Vec<String>,
        conditional: Vec<DMatrix<f64>>,
        tails: TailCurve,
    ) -> Result<Self> {
        let n = names.len();
        let m = tails.n_intervals();
        if n != tails.n_names() {
            return Err(Error::invalid(format!(
                "{} names vs tail curve for {}",
                n,
                tails.n_names()
            )));
        }
        if conditional.len() != m {
            return Err(Error::invalid(format!(
                "expected {} conditional matrices, got {}",
                m,
                conditional.len()
            )));
        }
        for (idx, p) in conditional.iter().enumerate() {
            if p.nrows() != n || p.ncols() != n {
                return Err(Error::invalid(format!(
                    "conditional matrix {} is {}x{}, expected {}x{}",
                    idx + 1,
                    p.nrows(),
                    p.ncols(),
                    n,
                    n
                )));
            }
            for j in 0..n {
                let mut col_sum = 0.0;
                for i in 0..n {
                    let v = p[(i, j)];
                    if v < -VALIDATION_TOL {
                        return Err(Error::invalid(format!(
                            "negative entry p[{i},{j}] = {v} in interval {}",
                            idx + 1
                        )));
                    }
                    col_sum += v;
                }
                if (col_sum - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!(
                        "column {} of interval {} sums to {col_sum}, expected 1",
                        j + 1,
                        idx + 1
                    )));
                }
            }
        }
        let joint = conditional
            .iter()
            .enumerate()
            .map(|(idx, p)| conditional_to_joint(p, &tails.increments(idx + 1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TdMatrixSet {
            names,
            conditional,
            joint,
            tails,
        })
    }

    pub fn n_names(&self) -> usize {
        self.names.len()
    }

    pub fn n_intervals(&self) -> usize {
        self.conditional.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn grid(&self) -> &MaturityGrid {
        self.tails.grid()
    }

    pub fn tails(&self) -> &TailCurve {
        &self.tails
    }

    /// Conditional matrix of interval `m` (1-based).
    pub fn conditional(&self, m: usize) -> &DMatrix<f64> {
        &self.conditional[m - 1]
    }

    /// Joint matrix of interval `m` (1-based).
    pub fn joint(&self, m: usize) -> &DMatrix<f64> {
        &self.joint[m - 1]
    }

    pub fn conditional_matrices(&self) -> &[DMatrix<f64>] {
        &self.conditional
    }

    /// Thinning factors at time `t` given `defaults_so_far` observed defaults:
    /// the next-to-default column of the interval containing `t`. Entries of
    /// defaulted names are zero by construction of the updated matrices.
    pub fn z_factors(&self, t: f64, defaults_so_far: usize) -> Result<DVector<f64>> {
        let n = self.n_names();
        if defaults_so_far >= n {
            return Err(Error::invalid(format!(
                "{defaults_so_far} defaults leave no next defaulter among {n} names"
            )));
        }
        let m = self.grid().interval_of(t)?;
        Ok(self.conditional[m - 1].column(defaults_so_far).into_owned())
    }

    /// Cumulative single-name default probability implied by the joint
    /// matrices: `sum over m' <= m, j of P_ij`.
    pub fn implied_cum_q(&self, i: usize, m: usize) -> f64 {
        (1..=m).map(|mm| self.joint[mm - 1].row(i).sum()).sum()
    }

    /// Max absolute residual of the column marginals
    /// `sum_i P_ij - (w(m,j) - w(m-1,j))` over all intervals and orders.
    pub fn max_tail_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for m in 1..=self.n_intervals() {
            let inc = self.tails.increments(m);
            for j in 0..self.n_names() {
                let s = self.joint[m - 1].column(j).sum();
                worst = worst.max((s - inc[j]).abs());
            }
        }
        worst
    }
}
