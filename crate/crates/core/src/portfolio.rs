//! Single-name portfolio data, tranche capital structure and discounting.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::MaturityGrid;

/// Absolute tolerance used by input validation checks.
pub const VALIDATION_TOL: f64 = 1e-8;

/// The "down" data: names with cumulative default probabilities per maturity,
/// par CDS spreads and a single portfolio-wide recovery.
#[derive(Debug, Clone)]
pub struct PortfolioSnapshot {
    names: Vec<String>,
    /// N x (M+1); column `m` holds `Q_i(T(m))`, column 0 is all zeros.
    cum_default_prob: DMatrix<f64>,
    /// Par CDS spreads, decimal per year.
    spreads: Vec<f64>,
    recovery: f64,
    grid: MaturityGrid,
}

impl PortfolioSnapshot {
    /// `cum_q` carries one column per maturity `T1..TM` (the implicit zero
    /// column at `T0` is prepended here).
    pub fn new(
        names: Vec<String>,
        cum_q: DMatrix<f64>,
        spreads: Vec<f64>,
        recovery: f64,
        grid: MaturityGrid,
    ) -> Result<Self> {
        let n = names.len();
        let m = grid.interval_count();
        if n == 0 {
            return Err(Error::invalid("portfolio must contain at least one name"));
        }
        if cum_q.nrows() != n || cum_q.ncols() != m {
            return Err(Error::invalid(format!(
                "default probability matrix is {}x{}, expected {}x{}",
                cum_q.nrows(),
                cum_q.ncols(),
                n,
                m
            )));
        }
        if spreads.len() != n {
            return Err(Error::invalid("one spread per name required"));
        }
        if !(0.0..1.0).contains(&recovery) {
            return Err(Error::invalid(format!(
                "recovery must lie in [0, 1), got {recovery}"
            )));
        }
        for (i, s) in spreads.iter().enumerate() {
            if !(*s > 0.0) {
                return Err(Error::invalid(format!(
                    "spread of name {} must be positive, got {s}",
                    names[i]
                )));
            }
        }
        let mut full = DMatrix::zeros(n, m + 1);
        full.view_mut((0, 1), (n, m)).copy_from(&cum_q);
        for i in 0..n {
            for c in 1..=m {
                let q = full[(i, c)];
                if !(0.0..=1.0).contains(&q) {
                    return Err(Error::invalid(format!(
                        "Q[{}] of name {} must lie in [0, 1], got {q}",
                        c, names[i]
                    )));
                }
                if q + VALIDATION_TOL < full[(i, c - 1)] {
                    return Err(Error::invalid(format!(
                        "cumulative default probabilities of name {} decrease at interval {c}",
                        names[i]
                    )));
                }
            }
        }
        Ok(PortfolioSnapshot {
            names,
            cum_default_prob: full,
            spreads,
            recovery,
            grid,
        })
    }

    pub fn n_names(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn grid(&self) -> &MaturityGrid {
        &self.grid
    }

    pub fn recovery(&self) -> f64 {
        self.recovery
    }

    pub fn spreads(&self) -> &[f64] {
        &self.spreads
    }

    /// Per-name notional of a unit portfolio, `1/N`.
    pub fn notional_per_name(&self) -> f64 {
        1.0 / self.n_names() as f64
    }

    /// `Q_i(T(m))`, `m = 0..=M`.
    pub fn cum_default_prob(&self, i: usize, m: usize) -> f64 {
        self.cum_default_prob[(i, m)]
    }

    /// Forward increments `Q_i(T(m)) - Q_i(T(m-1))` for interval `m` (1-based).
    pub fn forward_increments(&self, m: usize) -> DVector<f64> {
        let n = self.n_names();
        DVector::from_fn(n, |i, _| {
            (self.cum_default_prob[(i, m)] - self.cum_default_prob[(i, m - 1)]).max(0.0)
        })
    }

    /// Replaces the cumulative default probabilities (columns `T1..TM`).
    pub(crate) fn with_cum_q(&self, cum_q: DMatrix<f64>) -> Result<Self> {
        PortfolioSnapshot::new(
            self.names.clone(),
            cum_q,
            self.spreads.clone(),
            self.recovery,
            self.grid.clone(),
        )
    }
}

/// Capital structure: strikes `K0 = 0 < K1 < ... < K(Ntr) = 1` as fractions of
/// portfolio notional, plus running spreads per tranche.
#[derive(Debug, Clone)]
pub struct TrancheSpec {
    strikes: Vec<f64>,
    tranche_spreads: Vec<f64>,
}

impl TrancheSpec {
    pub fn new(strikes: Vec<f64>, tranche_spreads: Vec<f64>) -> Result<Self> {
        if strikes.len() < 2 {
            return Err(Error::invalid("need at least two strikes"));
        }
        if strikes[0] != 0.0 || *strikes.last().unwrap() != 1.0 {
            return Err(Error::invalid("strikes must span [0, 1]"));
        }
        for w in strikes.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::invalid("strikes must be strictly increasing"));
            }
        }
        if tranche_spreads.len() != strikes.len() - 1 {
            return Err(Error::invalid(format!(
                "expected {} tranche spreads, got {}",
                strikes.len() - 1,
                tranche_spreads.len()
            )));
        }
        Ok(TrancheSpec {
            strikes,
            tranche_spreads,
        })
    }

    pub fn n_tranches(&self) -> usize {
        self.strikes.len() - 1
    }

    pub fn strikes(&self) -> &[f64] {
        &self.strikes
    }

    pub fn tranche_spreads(&self) -> &[f64] {
        &self.tranche_spreads
    }

    /// Width `K(k) - K(k-1)` of tranche `k` (1-based).
    pub fn width(&self, k: usize) -> f64 {
        self.strikes[k] - self.strikes[k - 1]
    }

    /// Default-count indices `j_k` mapped from strikes: `j_k = ceil(K_k N / (1-R))`,
    /// capped at N; strikes at or beyond the maximum loss map to N.
    ///
    /// Consecutive entries bound the half-open default-count buckets
    /// `(j_(k-1), j_k]` that partition `1..=N` across the capital structure.
    pub fn strike_indices(&self, n_names: usize, recovery: f64) -> Vec<usize> {
        self.strikes
            .iter()
            .map(|&k| strike_to_count(k, n_names, recovery))
            .collect()
    }
}

/// Smallest integer default count covering loss fraction `strike`, i.e.
/// `ceil(K N / (1-R))` with a guard against floating-point noise at integers.
pub fn strike_to_count(strike: f64, n_names: usize, recovery: f64) -> usize {
    let scaled = strike / (1.0 - recovery);
    if scaled >= 1.0 {
        return n_names;
    }
    let x = scaled * n_names as f64;
    let rounded = x.round();
    let j = if (x - rounded).abs() <= 1e-9 * x.abs().max(1.0) {
        rounded as usize
    } else {
        x.ceil() as usize
    };
    j.min(n_names)
}

/// Flat continuously-compounded discounting, `B(0,T) = exp(-r T)`.
#[derive(Debug, Clone, Copy)]
pub struct DiscountSpec {
    rate: f64,
}

impl DiscountSpec {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate >= 0.0) {
            return Err(Error::invalid(format!(
                "riskless rate must be nonnegative, got {rate}"
            )));
        }
        Ok(DiscountSpec { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn discount(&self, t: f64) -> f64 {
        (-self.rate * t).exp()
    }
}
