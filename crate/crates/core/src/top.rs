//! Synthetic "top" model: a pure birth counting process with contagion.
//!
//! The portfolio default-count process jumps `n -> n+1` with intensity
//! `lambda_n = a + b n` and is absorbed at N. It supplies tail probabilities
//! (through the Kolmogorov forward equations) and ordered default times for
//! the simulation loop. Externally supplied tail-curve files can be used
//! instead; nothing downstream depends on this particular model.

use nalgebra::{DMatrix, DVector};
use ode_solvers::dopri5::Dopri5;
use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::grid::MaturityGrid;
use crate::portfolio::PortfolioSnapshot;
use crate::tail::TailCurve;

/// Mass-conservation tolerance for the forward ODE solve.
const MASS_TOL: f64 = 1e-10;

/// Pure birth default-counting process with affine intensity.
#[derive(Debug, Clone)]
pub struct BirthProcessTop {
    base: f64,
    contagion: f64,
    n_names: usize,
}

impl BirthProcessTop {
    pub fn new(base: f64, contagion: f64, n_names: usize) -> Result<Self> {
        if !(base >= 0.0) || !(contagion >= 0.0) {
            return Err(Error::invalid(format!(
                "birth intensities need a >= 0 and b >= 0, got a = {base}, b = {contagion}"
            )));
        }
        if n_names == 0 {
            return Err(Error::invalid("portfolio size must be positive"));
        }
        Ok(BirthProcessTop {
            base,
            contagion,
            n_names,
        })
    }

    pub fn n_names(&self) -> usize {
        self.n_names
    }

    /// Portfolio intensity after `n` defaults; zero at and beyond absorption.
    pub fn intensity(&self, n: usize) -> f64 {
        if n >= self.n_names {
            0.0
        } else {
            self.base + self.contagion * n as f64
        }
    }

    /// Solves the forward equations `d rho_n/dt = lambda_(n-1) rho_(n-1) - lambda_n rho_n`
    /// on the state space `{0..N}` with an adaptive Dormand-Prince integrator
    /// and cumulates the result into tail probabilities at the grid points.
    pub fn tail_curve(&self, grid: &MaturityGrid) -> Result<TailCurve> {
        let n = self.n_names;
        let m = grid.interval_count();
        let rates: Vec<f64> = (0..n).map(|k| self.intensity(k)).collect();

        let mut rho = DVector::zeros(n + 1);
        rho[0] = 1.0;
        let mut rows = DMatrix::zeros(m, n + 1);
        for interval in 1..=m {
            let t0 = grid.boundary(interval - 1);
            let t1 = grid.boundary(interval);
            let ode = BirthOde {
                rates: rates.clone(),
            };
            let mut solver = Dopri5::new(ode, t0, t1, t1 - t0, rho.clone(), 1e-12, 1e-14);
            solver.integrate().map_err(|e| {
                Error::numerical(format!(
                    "forward equation solve failed on interval {interval} ([{t0}, {t1}]): {e}"
                ))
            })?;
            rho = solver
                .y_out()
                .last()
                .ok_or_else(|| Error::numerical("integrator produced no output"))?
                .clone();
            let mass = rho.sum();
            if (mass - 1.0).abs() > MASS_TOL {
                return Err(Error::numerical(format!(
                    "probability mass drifted to {mass} at T = {t1} (tolerance {MASS_TOL:.0e})"
                )));
            }
            for v in rho.iter_mut() {
                *v = v.max(0.0);
            }
            rows[(interval - 1, 0)] = 1.0;
            let mut acc = 0.0;
            for j in (1..=n).rev() {
                acc += rho[j];
                rows[(interval - 1, j)] = acc;
            }
        }
        TailCurve::new(rows, grid.clone())
    }

    /// Ordered default times up to `horizon`: successive exponential
    /// inter-arrivals with the current state's intensity.
    pub fn simulate_default_times<R: Rng>(&self, horizon: f64, rng: &mut R) -> Vec<f64> {
        let mut times = Vec::new();
        let mut t = 0.0;
        for n in 0..self.n_names {
            let lambda = self.intensity(n);
            if lambda <= 0.0 {
                break;
            }
            t += Exp::new(lambda).expect("positive rate").sample(rng);
            if t > horizon {
                break;
            }
            times.push(t);
        }
        times
    }
}

struct BirthOde {
    rates: Vec<f64>,
}

impl ode_solvers::System<f64, DVector<f64>> for BirthOde {
    fn system(&self, _t: f64, y: &DVector<f64>, dy: &mut DVector<f64>) {
        let n = y.len();
        for i in 0..n {
            let inflow = if i > 0 { self.rates[i - 1] * y[i - 1] } else { 0.0 };
            let outflow = if i < n - 1 { self.rates[i] * y[i] } else { 0.0 };
            dy[i] = inflow - outflow;
        }
    }
}

/// Rescales per-interval forward default-probability increments by a common
/// factor so that the expected default count implied by single-name data
/// matches the top model's, interval by interval. Returns the adjusted
/// snapshot and the factor applied per interval.
pub fn enforce_consistency(
    snapshot: &PortfolioSnapshot,
    tails: &TailCurve,
) -> Result<(PortfolioSnapshot, Vec<f64>)> {
    let n = snapshot.n_names();
    let m = snapshot.grid().interval_count();
    if tails.n_names() != n || tails.n_intervals() != m {
        return Err(Error::invalid(
            "snapshot and tail curve dimensions disagree",
        ));
    }
    let mut factors = Vec::with_capacity(m);
    let mut cum = DMatrix::zeros(n, m);
    let mut prev: Vec<f64> = vec![0.0; n];
    for interval in 1..=m {
        let dq = snapshot.forward_increments(interval);
        let sum_dq: f64 = dq.sum();
        let sum_dw: f64 = tails.increments(interval).sum();
        let factor = if sum_dq > 0.0 {
            sum_dw / sum_dq
        } else if sum_dw > 1e-12 {
            return Err(Error::infeasible(format!(
                "interval {interval}: top model expects {sum_dw:.6} defaults but all names are riskless"
            )));
        } else {
            1.0
        };
        factors.push(factor);
        for i in 0..n {
            let q = if factor == 1.0 {
                prev[i] + dq[i]
            } else {
                prev[i] + dq[i] * factor
            };
            if q > 1.0 + 1e-12 {
                return Err(Error::infeasible(format!(
                    "consistency adjustment pushes Q of {} above 1 at interval {interval} ({q})",
                    snapshot.names()[i]
                )));
            }
            cum[(i, interval - 1)] = q.min(1.0);
            prev[i] = cum[(i, interval - 1)];
        }
    }
    let adjusted = snapshot.with_cum_q(cum)?;
    Ok((adjusted, factors))
}

/// Per-interval gap `|sum_j dw_j - sum_i dQ_i|` between the expected default
/// counts of the top model and the single-name data.
pub fn consistency_gaps(snapshot: &PortfolioSnapshot, tails: &TailCurve) -> Vec<f64> {
    (1..=snapshot.grid().interval_count())
        .map(|m| {
            let dq: f64 = snapshot.forward_increments(m).sum();
            let dw: f64 = tails.increments(m).sum();
            (dw - dq).abs()
        })
        .collect()
}
