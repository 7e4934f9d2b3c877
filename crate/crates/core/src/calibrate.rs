//! Prior construction and iterative proportional scaling of TD-matrices.
//!
//! Per maturity interval the problem is: find a nonnegative matrix `p` with
//! unit column sums whose tail-increment-weighted row sums match the
//! single-name forward default probabilities. The solver alternates row
//! rescaling and column normalization, which converges to the KL-closest
//! matrix to the prior satisfying both constraint families.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::portfolio::{DiscountSpec, PortfolioSnapshot, TrancheSpec};
use crate::tail::TailCurve;
use crate::tdmatrix::TdMatrixSet;

/// Initial guess for the default ordering encoded in the TD-matrix.
#[derive(Debug, Clone)]
pub enum PriorSpec {
    /// Rows taper linearly from spread-implied first-column weights to the
    /// uniform value `1/N` at the uniformization bound `nbar`.
    Linear {
        /// Default count at which rows become uniform; defaults to `ceil(N/2)`.
        nbar: Option<usize>,
        /// Overrides the first-interval default-probability weights.
        first_column: Option<Vec<f64>>,
    },
    /// Blockwise prior inverted from target tranche deltas.
    BaseCorrelation {
        tranches: TrancheSpec,
        /// N x Ntr target deltas per name and tranche.
        target_deltas: DMatrix<f64>,
        discount: DiscountSpec,
    },
    /// Separable prior `q_ij = a_i * b_j`; the column step removes the order
    /// weights, so iterative scaling lands on the same fixed point for any
    /// choice of weights.
    Factorized {
        name_weights: Vec<f64>,
        order_weights: Vec<f64>,
    },
    /// User-supplied matrix with unit column sums.
    Custom(DMatrix<f64>),
}

impl PriorSpec {
    pub fn linear() -> Self {
        PriorSpec::Linear {
            nbar: None,
            first_column: None,
        }
    }
}

/// Iteration controls for the scaling solver.
#[derive(Debug, Clone)]
pub struct CalibrationSettings {
    pub max_sweeps: usize,
    /// Max relative error on the weighted row constraints.
    pub row_tolerance: f64,
    /// Attach the relative entropy of the result w.r.t. the prior to reports.
    pub report_kl: bool,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            max_sweeps: 200,
            row_tolerance: 1e-8,
            report_kl: false,
        }
    }
}

/// Result of one per-interval scaling run.
#[derive(Debug, Clone)]
pub struct ScalingOutcome {
    pub matrix: DMatrix<f64>,
    /// Row+column sweep pairs executed (0 when the prior already satisfied
    /// both constraint families).
    pub sweeps: usize,
    /// Final max relative row residual.
    pub row_residual: f64,
}

/// Per-interval calibration diagnostics.
#[derive(Debug, Clone)]
pub struct IntervalReport {
    pub interval: usize,
    pub sweeps: usize,
    pub row_residual: f64,
    pub kl_from_prior: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct CalibrationReport {
    pub intervals: Vec<IntervalReport>,
    pub warnings: Vec<String>,
}

/// Linear-taper prior: `q_ij = q_i1 + alpha_i * j` up to `nbar`, uniform
/// beyond, with `alpha_i = (1/nbar)(1/N - q_i1)`. Column sums are 1 whenever
/// the first-column weights sum to 1.
pub fn build_linear_prior(
    snapshot: &PortfolioSnapshot,
    nbar: Option<usize>,
    first_column: Option<&[f64]>,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let n = snapshot.n_names();
    let nbar = nbar.unwrap_or_else(|| default_nbar(n));
    if nbar == 0 || nbar > n {
        return Err(Error::invalid(format!(
            "uniformization bound must lie in 1..={n}, got {nbar}"
        )));
    }
    let q1: Vec<f64> = match first_column {
        Some(col) => {
            if col.len() != n {
                return Err(Error::invalid("first column needs one weight per name"));
            }
            let total: f64 = col.iter().sum();
            if !(total > 0.0) || col.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid(
                    "first-column weights must be nonnegative with positive sum",
                ));
            }
            col.iter().map(|v| v / total).collect()
        }
        None => {
            let total: f64 = (0..n).map(|i| snapshot.cum_default_prob(i, 1)).sum();
            if total > 0.0 {
                (0..n)
                    .map(|i| snapshot.cum_default_prob(i, 1) / total)
                    .collect()
            } else {
                vec![1.0 / n as f64; n]
            }
        }
    };
    let uniform = 1.0 / n as f64;
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        let alpha = (uniform - q1[i]) / nbar as f64;
        for c in 0..n {
            let j = (c + 1) as f64;
            q[(i, c)] = if c < nbar {
                q1[i] + alpha * j
            } else {
                uniform
            };
        }
    }
    let warnings = clamp_negative_entries(&mut q);
    Ok((q, warnings))
}

/// Default uniformization bound, mid-portfolio.
pub fn default_nbar(n: usize) -> usize {
    n.div_ceil(2)
}

/// Clamps negative entries at zero and renormalizes affected columns.
/// Returns one warning per affected column.
fn clamp_negative_entries(q: &mut DMatrix<f64>) -> Vec<String> {
    let mut warnings = Vec::new();
    for c in 0..q.ncols() {
        let mut clamped = false;
        for i in 0..q.nrows() {
            if q[(i, c)] < 0.0 {
                q[(i, c)] = 0.0;
                clamped = true;
            }
        }
        if clamped {
            let s = q.column(c).sum();
            if s > 0.0 {
                q.column_mut(c).scale_mut(1.0 / s);
            }
            warnings.push(format!(
                "prior column {} had negative entries; clamped and renormalized",
                c + 1
            ));
        }
    }
    warnings
}

/// Blockwise prior inverted from target tranche deltas. Rows are constant
/// over the default-count bucket of each tranche; columns are normalized to
/// sum 1 afterwards.
pub fn build_bc_prior(
    snapshot: &PortfolioSnapshot,
    tranches: &TrancheSpec,
    target_deltas: &DMatrix<f64>,
    tails: &TailCurve,
    discount: &DiscountSpec,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let n = snapshot.n_names();
    let ntr = tranches.n_tranches();
    if target_deltas.nrows() != n || target_deltas.ncols() != ntr {
        return Err(Error::invalid(format!(
            "target deltas are {}x{}, expected {}x{}",
            target_deltas.nrows(),
            target_deltas.ncols(),
            n,
            ntr
        )));
    }
    if target_deltas.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::invalid("target deltas must be positive"));
    }
    let t1 = snapshot.grid().boundary(1);
    let b0 = discount.discount(t1);
    let idx = tranches.strike_indices(n, snapshot.recovery());
    let mut warnings = Vec::new();
    let mut q = DMatrix::zeros(n, n);
    for k in 1..=ntr {
        let lo = idx[k - 1]; // bucket covers orders lo+1 ..= hi
        let hi = idx[k];
        if hi <= lo {
            warnings.push(format!(
                "tranche {k} spans no default counts (strikes too tight for N = {n}); targets unused"
            ));
            continue;
        }
        let wbar: f64 = (lo + 1..=hi).map(|j| tails.value(1, j)).sum();
        if !(wbar > 0.0) {
            return Err(Error::invalid(format!(
                "tranche {k} bucket carries no tail mass at the first maturity"
            )));
        }
        let width = tranches.width(k);
        let s_tr = tranches.tranche_spreads()[k - 1];
        for i in 0..n {
            let qi = snapshot.cum_default_prob(i, 1);
            let spread_adj =
                (b0 + 0.5 * snapshot.spreads()[i] * t1) / (b0 + 0.5 * s_tr * t1);
            let pbar = target_deltas[(i, k - 1)] * qi * n as f64 * width / wbar * spread_adj;
            for c in lo..hi {
                q[(i, c)] = pbar;
            }
        }
    }
    for c in 0..n {
        let s = q.column(c).sum();
        if s > 0.0 {
            q.column_mut(c).scale_mut(1.0 / s);
        } else {
            q.column_mut(c).fill(1.0 / n as f64);
            warnings.push(format!(
                "prior column {} empty after inversion; filled uniformly",
                c + 1
            ));
        }
    }
    Ok((q, warnings))
}

/// Reconstructs the delta of tranche `k` for name `i` implied by an
/// unnormalized blockwise prior value `pbar`; inverse of the construction in
/// [`build_bc_prior`], used as an oracle in tests and reports.
#[allow(clippy::too_many_arguments)]
pub fn bc_prior_implied_delta(
    pbar: f64,
    q_i: f64,
    spread_i: f64,
    tranche_width: f64,
    tranche_spread: f64,
    wbar: f64,
    n: usize,
    t1: f64,
    discount: &DiscountSpec,
) -> f64 {
    let b0 = discount.discount(t1);
    let spread_adj = (b0 + 0.5 * tranche_spread * t1) / (b0 + 0.5 * spread_i * t1);
    pbar * wbar / (q_i * n as f64 * tranche_width) * spread_adj
}

/// Raw separable prior `q_ij = a_i b_j`.
pub fn build_factorized_prior(name_weights: &[f64], order_weights: &[f64]) -> Result<DMatrix<f64>> {
    let n = name_weights.len();
    if order_weights.len() != n {
        return Err(Error::invalid("factorized prior weight lengths differ"));
    }
    if name_weights.iter().chain(order_weights).any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("factorized prior weights must be positive"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        name_weights[i] * order_weights[j]
    }))
}

/// Builds the prior matrix for a snapshot from its specification.
pub fn build_prior(
    snapshot: &PortfolioSnapshot,
    tails: &TailCurve,
    spec: &PriorSpec,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    match spec {
        PriorSpec::Linear { nbar, first_column } => {
            build_linear_prior(snapshot, *nbar, first_column.as_deref())
        }
        PriorSpec::BaseCorrelation {
            tranches,
            target_deltas,
            discount,
        } => build_bc_prior(snapshot, tranches, target_deltas, tails, discount),
        PriorSpec::Factorized {
            name_weights,
            order_weights,
        } => Ok((build_factorized_prior(name_weights, order_weights)?, vec![])),
        PriorSpec::Custom(q) => {
            let n = snapshot.n_names();
            if q.nrows() != n || q.ncols() != n {
                return Err(Error::invalid(format!(
                    "custom prior is {}x{}, expected {n}x{n}",
                    q.nrows(),
                    q.ncols()
                )));
            }
            if q.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid("custom prior has negative entries"));
            }
            for c in 0..n {
                let s = q.column(c).sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!(
                        "custom prior column {} sums to {s}, expected 1",
                        c + 1
                    )));
                }
            }
            Ok((q.clone(), vec![]))
        }
    }
}

/// Max relative row residual `|sum_j p_ij dw_j - dq_i| / max(dq_i, 1e-12)`.
pub fn row_residual(p: &DMatrix<f64>, dq: &DVector<f64>, dw: &DVector<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..p.nrows() {
        let achieved = p.row(i).transpose().dot(dw);
        let rel = (achieved - dq[i]).abs() / dq[i].max(1e-12);
        worst = worst.max(rel);
    }
    worst
}

/// Alternating row/column rescaling until the weighted row constraints hold
/// within `settings.row_tolerance`. Column constraints hold exactly after
/// every column step; columns with zero tail increment are normalized once
/// up front and frozen.
pub fn iterative_scaling(
    prior: &DMatrix<f64>,
    dq: &DVector<f64>,
    dw: &DVector<f64>,
    settings: &CalibrationSettings,
) -> Result<ScalingOutcome> {
    let n = prior.nrows();
    if prior.ncols() != n || dq.len() != n || dw.len() != n {
        return Err(Error::invalid("prior and marginals must share dimension N"));
    }
    if prior.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("prior has negative entries"));
    }
    if dq.iter().any(|&v| v < 0.0) || dw.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("marginal increments must be nonnegative"));
    }
    let sum_dq: f64 = dq.sum();
    let sum_dw: f64 = dw.sum();
    if (sum_dq - sum_dw).abs() > 1e-10 * sum_dw.abs().max(1.0) {
        return Err(Error::infeasible(format!(
            "expected default counts disagree: single names give {sum_dq:.12}, tails give {sum_dw:.12}"
        )));
    }

    let active: Vec<usize> = (0..n).filter(|&j| dw[j] > 0.0).collect();
    let mut p = prior.clone();
    // Normalize every column once; inactive columns keep this state.
    for j in 0..n {
        let s = p.column(j).sum();
        if s > 0.0 {
            p.column_mut(j).scale_mut(1.0 / s);
        } else if dw[j] > 0.0 {
            return Err(Error::infeasible(format!(
                "prior column {} is zero but carries tail mass",
                j + 1
            )));
        }
    }

    let mut residual = row_residual(&p, dq, dw);
    if residual <= settings.row_tolerance {
        return Ok(ScalingOutcome {
            matrix: p,
            sweeps: 0,
            row_residual: residual,
        });
    }

    let mut history = Vec::new();
    for sweep in 1..=settings.max_sweeps {
        // Row step on active columns.
        for i in 0..n {
            let denom: f64 = active.iter().map(|&j| p[(i, j)] * dw[j]).sum();
            if denom > 0.0 {
                let factor = dq[i] / denom;
                for &j in &active {
                    p[(i, j)] *= factor;
                }
            } else if dq[i] > 0.0 {
                return Err(Error::infeasible(format!(
                    "prior row {} has no support on active columns but positive target",
                    i + 1
                )));
            }
        }
        // Column step on active columns.
        for &j in &active {
            let s = p.column(j).sum();
            if s > 0.0 {
                p.column_mut(j).scale_mut(1.0 / s);
            } else {
                return Err(Error::infeasible(format!(
                    "column {} lost all mass during scaling",
                    j + 1
                )));
            }
        }
        residual = row_residual(&p, dq, dw);
        history.push(residual);
        if residual <= settings.row_tolerance {
            return Ok(ScalingOutcome {
                matrix: p,
                sweeps: sweep,
                row_residual: residual,
            });
        }
    }
    Err(Error::NonConvergence {
        sweeps: settings.max_sweeps,
        last: residual,
        history,
    })
}

/// Relative entropy `D[p || q]` of the matrices rescaled to total mass one
/// (division by N), with the `0 log 0 = 0` convention.
pub fn kl_divergence(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::invalid("KL divergence needs equal shapes"));
    }
    let n = p.nrows() as f64;
    let mut d = 0.0;
    for (pv, qv) in p.iter().zip(q.iter()) {
        if *pv > 0.0 {
            if !(*qv > 0.0) {
                return Err(Error::invalid(
                    "support violation: p > 0 where prior q = 0",
                ));
            }
            d += pv / n * (pv / qv).ln();
        }
    }
    Ok(d)
}

/// Runs iterative scaling for every maturity interval and assembles the
/// calibrated TD-matrix set. Intervals are independent and run in parallel.
pub fn calibrate_all(
    snapshot: &PortfolioSnapshot,
    tails: &TailCurve,
    prior_spec: &PriorSpec,
    settings: &CalibrationSettings,
) -> Result<(TdMatrixSet, CalibrationReport)> {
    let m = snapshot.grid().interval_count();
    if tails.n_intervals() != m || tails.n_names() != snapshot.n_names() {
        return Err(Error::invalid(
            "snapshot and tail curve dimensions disagree",
        ));
    }
    let (prior, warnings) = build_prior(snapshot, tails, prior_spec)?;

    let results: Vec<Result<(ScalingOutcome, Option<f64>)>> = (1..=m)
        .into_par_iter()
        .map(|interval| {
            let dq = snapshot.forward_increments(interval);
            let dw = tails.increments(interval);
            let outcome = iterative_scaling(&prior, &dq, &dw, settings).map_err(|e| match e {
                Error::Invalid(msg) => Error::Invalid(format!("interval {interval}: {msg}")),
                Error::Infeasible(msg) => Error::Infeasible(format!("interval {interval}: {msg}")),
                other => other,
            })?;
            let kl = if settings.report_kl {
                Some(kl_divergence(&outcome.matrix, &prior)?)
            } else {
                None
            };
            Ok((outcome, kl))
        })
        .collect();

    let mut conditional = Vec::with_capacity(m);
    let mut report = CalibrationReport {
        intervals: Vec::with_capacity(m),
        warnings,
    };
    for (idx, r) in results.into_iter().enumerate() {
        let (outcome, kl) = r?;
        report.intervals.push(IntervalReport {
            interval: idx + 1,
            sweeps: outcome.sweeps,
            row_residual: outcome.row_residual,
            kl_from_prior: kl,
        });
        conditional.push(outcome.matrix);
    }
    let set = TdMatrixSet::from_conditional(snapshot.names().to_vec(), conditional, tails.clone())?;
    Ok((set, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::MaturityGrid;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn snapshot(dq_rows: &[Vec<f64>], spreads: &[f64]) -> PortfolioSnapshot {
        let n = dq_rows.len();
        let m = dq_rows[0].len();
        let names = (0..n).map(|i| format!("N{i}")).collect();
        let mut cum = DMatrix::zeros(n, m);
        for i in 0..n {
            let mut acc = 0.0;
            for c in 0..m {
                acc += dq_rows[i][c];
                cum[(i, c)] = acc;
            }
        }
        let bounds: Vec<f64> = (0..=m).map(|k| k as f64).collect();
        let grid = MaturityGrid::new(bounds).unwrap();
        PortfolioSnapshot::new(names, cum, spreads.to_vec(), 0.4, grid).unwrap()
    }

    fn tails_from_increments(incs: &[Vec<f64>]) -> TailCurve {
        let m = incs.len();
        let n = incs[0].len();
        let mut rows = DMatrix::zeros(m, n + 1);
        let mut prev = vec![0.0; n + 1];
        for (r, inc) in incs.iter().enumerate() {
            rows[(r, 0)] = 1.0;
            for j in 1..=n {
                rows[(r, j)] = prev[j] + inc[j - 1];
            }
            for j in 0..=n {
                prev[j] = rows[(r, j)];
            }
        }
        let bounds: Vec<f64> = (0..=m).map(|k| k as f64).collect();
        let grid = MaturityGrid::new(bounds).unwrap();
        TailCurve::new(rows, grid).unwrap()
    }

    #[test]
    fn linear_prior_hand_values() {
        // N = 4, nbar = 2, q1 = (0.4, 0.3, 0.2, 0.1).
        let snap = snapshot(
            &[vec![0.4], vec![0.3], vec![0.2], vec![0.1]],
            &[0.04, 0.03, 0.02, 0.01],
        );
        let (q, warnings) = build_linear_prior(&snap, Some(2), None).unwrap();
        assert!(warnings.is_empty());
        // j = 1: q1 + alpha = (0.325, 0.275, 0.225, 0.175); j >= 2: uniform.
        let expect_col1 = [0.325, 0.275, 0.225, 0.175];
        for i in 0..4 {
            assert!((q[(i, 0)] - expect_col1[i]).abs() < 1e-15);
            for c in 1..4 {
                assert!((q[(i, c)] - 0.25).abs() < 1e-15);
            }
        }
        for c in 0..4 {
            assert!((q.column(c).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_prior_uniform_when_names_identical() {
        let snap = snapshot(&[vec![0.2], vec![0.2], vec![0.2]], &[0.02, 0.02, 0.02]);
        let (q, _) = build_linear_prior(&snap, Some(2), None).unwrap();
        assert!(q.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-14));
    }

    #[test]
    fn linear_prior_risky_row_decreases_up_to_nbar() {
        let snap = snapshot(
            &[vec![0.4], vec![0.1], vec![0.1], vec![0.1]],
            &[0.08, 0.01, 0.01, 0.01],
        );
        let (q, _) = build_linear_prior(&snap, Some(3), None).unwrap();
        assert!(q[(0, 0)] > q[(0, 1)]);
        assert!(q[(0, 1)] > q[(0, 2)]);
        assert!((q[(0, 2)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn clamp_renormalizes_columns() {
        let mut q = DMatrix::from_row_slice(2, 2, &[1.2, 0.5, -0.2, 0.5]);
        let warnings = clamp_negative_entries(&mut q);
        assert_eq!(warnings.len(), 1);
        assert_eq!(q[(1, 0)], 0.0);
        assert!((q.column(0).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn factorized_prior_reaches_fixed_point_fast() {
        let dq = DVector::from_vec(vec![0.25, 0.15]);
        let dw = DVector::from_vec(vec![0.3, 0.1]);
        let prior = build_factorized_prior(&[0.7, 0.3], &[2.0, 1.0]).unwrap();
        let out = iterative_scaling(&prior, &dq, &dw, &CalibrationSettings::default()).unwrap();
        assert!(out.sweeps <= 3);
        // Fixed point Q_i / <N_T> with <N_T> = 0.4.
        for j in 0..2 {
            assert!((out.matrix[(0, j)] - 0.625).abs() < 1e-14);
            assert!((out.matrix[(1, j)] - 0.375).abs() < 1e-14);
        }
    }

    #[test]
    fn prior_satisfying_constraints_returned_unchanged() {
        let dq = DVector::from_vec(vec![0.25, 0.15]);
        let dw = DVector::from_vec(vec![0.3, 0.1]);
        let prior = DMatrix::from_row_slice(2, 2, &[0.625, 0.625, 0.375, 0.375]);
        let out = iterative_scaling(&prior, &dq, &dw, &CalibrationSettings::default()).unwrap();
        assert_eq!(out.sweeps, 0);
        assert!((&out.matrix - &prior).abs().max() < 1e-15);
    }

    #[test]
    fn scaling_rejects_inconsistent_totals() {
        let dq = DVector::from_vec(vec![0.3, 0.3]);
        let dw = DVector::from_vec(vec![0.3, 0.1]);
        let prior = DMatrix::from_element(2, 2, 0.5);
        assert!(iterative_scaling(&prior, &dq, &dw, &CalibrationSettings::default()).is_err());
    }

    #[test]
    fn scaling_rejects_infeasible_prior_support() {
        // Name 0 carries positive target but the prior gives it no mass on
        // active columns.
        let dq = DVector::from_vec(vec![0.2, 0.2]);
        let dw = DVector::from_vec(vec![0.25, 0.15]);
        let prior = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let err = iterative_scaling(&prior, &dq, &dw, &CalibrationSettings::default());
        assert!(matches!(err, Err(Error::Infeasible(_))));
    }

    #[test]
    fn random_feasible_instance_converges_with_tight_residuals() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..5 {
            let n = 25;
            let dw = DVector::from_fn(n, |_, _| rng.gen_range(0.001..0.02));
            let raw = DVector::from_fn(n, |_, _| rng.gen_range(0.1..1.0));
            let dq = &raw * (dw.sum() / raw.sum());
            let prior = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.05..1.0));
            let out =
                iterative_scaling(&prior, &dq, &dw, &CalibrationSettings::default()).unwrap();
            assert!(out.row_residual < 1e-8);
            for j in 0..n {
                assert!((out.matrix.column(j).sum() - 1.0).abs() < 1e-12);
            }
            assert!(out.matrix.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_prior_entries_stay_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 10;
        let dw = DVector::from_fn(n, |_, _| rng.gen_range(0.005..0.02));
        let raw = DVector::from_fn(n, |_, _| rng.gen_range(0.1..1.0));
        let dq = &raw * (dw.sum() / raw.sum());
        let mut prior = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.05..1.0));
        prior[(3, 4)] = 0.0;
        prior[(7, 0)] = 0.0;
        let out = iterative_scaling(&prior, &dq, &dw, &CalibrationSettings::default()).unwrap();
        assert_eq!(out.matrix[(3, 4)], 0.0);
        assert_eq!(out.matrix[(7, 0)], 0.0);
    }

    #[test]
    fn kl_matches_direct_summation() {
        let p: DMatrix<f64> = DMatrix::from_row_slice(2, 2, &[0.3, 0.2, 0.1, 0.4]);
        let q: DMatrix<f64> = DMatrix::from_element(2, 2, 0.25);
        // Independent direct summation of (p/N) log(p/q).
        let mut expect = 0.0f64;
        for (&pv, &qv) in p.iter().zip(q.iter()) {
            expect += pv / 2.0 * (pv / qv).ln();
        }
        let d = kl_divergence(&p, &q).unwrap();
        assert!((d - expect).abs() < 1e-15);
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = 4;
            let mut p = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.01..1.0));
            let mut q = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.01..1.0));
            // Normalize both to the same total mass N.
            let ps = p.sum();
            let qs = q.sum();
            p.scale_mut(n as f64 / ps);
            q.scale_mut(n as f64 / qs);
            assert!(kl_divergence(&p, &q).unwrap() >= -1e-14);
        }
    }

    #[test]
    fn kl_support_violation_is_error() {
        let p = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let q = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(kl_divergence(&p, &q).is_err());
    }

    #[test]
    fn bc_prior_flat_rows_for_proportional_deltas() {
        // Deltas proportional to Q_i and tranche width collapse to flat rows
        // after column normalization (value Q_i^2 / sum Q^2); spreads zeroed
        // out via equal CDS/tranche spreads so the adjustment cancels.
        let snap = snapshot(
            &[vec![0.10], vec![0.06], vec![0.03], vec![0.01]],
            &[0.02, 0.02, 0.02, 0.02],
        );
        let tranches = TrancheSpec::new(vec![0.0, 0.3, 1.0], vec![0.02, 0.02]).unwrap();
        let tails = tails_from_increments(&[vec![0.12, 0.05, 0.02, 0.01]]);
        let discount = DiscountSpec::new(0.03).unwrap();
        let n = 4;
        let mut deltas = DMatrix::zeros(n, 2);
        for i in 0..n {
            for k in 0..2 {
                deltas[(i, k)] = snap.cum_default_prob(i, 1) * tranches.width(k + 1);
            }
        }
        let (q, warnings) = build_bc_prior(&snap, &tranches, &deltas, &tails, &discount).unwrap();
        assert!(warnings.is_empty());
        let qsq: f64 = (0..n).map(|i| snap.cum_default_prob(i, 1).powi(2)).sum();
        for i in 0..n {
            let expect = snap.cum_default_prob(i, 1).powi(2) / qsq;
            for c in 0..n {
                assert!(
                    (q[(i, c)] - expect).abs() < 1e-12,
                    "entry ({i},{c}) = {} vs {expect}",
                    q[(i, c)]
                );
            }
        }
    }

    #[test]
    fn bc_prior_inverts_back_to_targets() {
        let snap = snapshot(
            &[vec![0.08], vec![0.05], vec![0.02]],
            &[0.05, 0.02, 0.008],
        );
        let tranches = TrancheSpec::new(vec![0.0, 0.2, 1.0], vec![0.03, 0.01]).unwrap();
        let tails = tails_from_increments(&[vec![0.09, 0.04, 0.02]]);
        let discount = DiscountSpec::new(0.04).unwrap();
        let deltas = DMatrix::from_row_slice(3, 2, &[0.9, 0.2, 0.5, 0.15, 0.2, 0.08]);
        // Rebuild the unnormalized blockwise values and invert them.
        let n = 3;
        let idx = tranches.strike_indices(n, snap.recovery());
        let t1 = snap.grid().boundary(1);
        let b0 = discount.discount(t1);
        for k in 1..=2 {
            let (lo, hi) = (idx[k - 1], idx[k]);
            let wbar: f64 = (lo + 1..=hi).map(|j| tails.value(1, j)).sum();
            for i in 0..n {
                let spread_adj =
                    (b0 + 0.5 * snap.spreads()[i] * t1) / (b0 + 0.5 * tranches.tranche_spreads()[k - 1] * t1);
                let pbar = deltas[(i, k - 1)] * snap.cum_default_prob(i, 1) * n as f64
                    * tranches.width(k)
                    / wbar
                    * spread_adj;
                let recovered = bc_prior_implied_delta(
                    pbar,
                    snap.cum_default_prob(i, 1),
                    snap.spreads()[i],
                    tranches.width(k),
                    tranches.tranche_spreads()[k - 1],
                    wbar,
                    n,
                    t1,
                    &discount,
                );
                assert!(
                    (recovered - deltas[(i, k - 1)]).abs() < 1e-10,
                    "name {i} tranche {k}: {recovered} vs {}",
                    deltas[(i, k - 1)]
                );
            }
        }
    }

    #[test]
    fn calibrate_all_homogeneous_gives_uniform_rows() {
        let snap = snapshot(
            &[vec![0.05, 0.06], vec![0.05, 0.06], vec![0.05, 0.06]],
            &[0.02, 0.02, 0.02],
        );
        // Consistent tails: per-interval sums 0.15 and 0.18.
        let tails = tails_from_increments(&[vec![0.09, 0.04, 0.02], vec![0.10, 0.05, 0.03]]);
        let (set, report) = calibrate_all(
            &snap,
            &tails,
            &PriorSpec::linear(),
            &CalibrationSettings::default(),
        )
        .unwrap();
        assert_eq!(report.intervals.len(), 2);
        for m in 1..=2 {
            for v in set.conditional(m).iter() {
                assert!((v - 1.0 / 3.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn calibrated_thinning_reproduces_cumulative_probabilities() {
        // First maturity: sum_j p_ij^(1) w^(1)(j) = Q_i(T1); second maturity
        // accumulates the forward interval, Q(T2) = Q(T1) + sum_j p_ij^(2) dw_j.
        let snap = snapshot(
            &[vec![0.08, 0.05], vec![0.04, 0.03], vec![0.02, 0.02]],
            &[0.03, 0.015, 0.008],
        );
        let tails = tails_from_increments(&[vec![0.09, 0.04, 0.01], vec![0.06, 0.03, 0.01]]);
        let (set, _) = calibrate_all(
            &snap,
            &tails,
            &PriorSpec::linear(),
            &CalibrationSettings::default(),
        )
        .unwrap();
        for i in 0..3 {
            let q1: f64 = (0..3)
                .map(|j| set.conditional(1)[(i, j)] * tails.value(1, j + 1))
                .sum();
            assert!((q1 - snap.cum_default_prob(i, 1)).abs() < 1e-8);
            let dq2: f64 = (0..3)
                .map(|j| set.conditional(2)[(i, j)] * tails.increments(2)[j])
                .sum();
            assert!((q1 + dq2 - snap.cum_default_prob(i, 2)).abs() < 1e-8);
            assert!((set.implied_cum_q(i, 2) - snap.cum_default_prob(i, 2)).abs() < 1e-8);
        }
        assert!(set.max_tail_residual() < 1e-12);
    }

    #[test]
    fn calibrate_all_single_interval_matches_direct_call() {
        let snap = snapshot(&[vec![0.10], vec![0.05]], &[0.03, 0.01]);
        let tails = tails_from_increments(&[vec![0.11, 0.04]]);
        let settings = CalibrationSettings::default();
        let (set, _) = calibrate_all(&snap, &tails, &PriorSpec::linear(), &settings).unwrap();
        let (prior, _) = build_linear_prior(&snap, None, None).unwrap();
        let direct = iterative_scaling(
            &prior,
            &snap.forward_increments(1),
            &tails.increments(1),
            &settings,
        )
        .unwrap();
        assert!((set.conditional(1) - &direct.matrix).abs().max() < 1e-15);
    }
}
