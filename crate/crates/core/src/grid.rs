//! Maturity grid shared by all calibrated objects.

use crate::error::{Error, Result};

/// Ordered reference maturities `T0 = 0 < T1 < ... < TM` in year fractions.
///
/// Interval `m` (1-based, as in all reports) covers `(T(m-1), T(m)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaturityGrid {
    boundaries: Vec<f64>,
}

impl MaturityGrid {
    /// Builds a grid from boundaries including the leading zero.
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::invalid("maturity grid needs at least [0, T1]"));
        }
        if boundaries[0] != 0.0 {
            return Err(Error::invalid(format!(
                "maturity grid must start at 0, got {}",
                boundaries[0]
            )));
        }
        for w in boundaries.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::invalid(format!(
                    "maturity grid must be strictly increasing, got {} after {}",
                    w[1], w[0]
                )));
            }
        }
        Ok(MaturityGrid { boundaries })
    }

    /// Builds a grid from the maturities `T1 < ... < TM` (prepends the zero).
    pub fn from_maturities(maturities: &[f64]) -> Result<Self> {
        let mut b = Vec::with_capacity(maturities.len() + 1);
        b.push(0.0);
        b.extend_from_slice(maturities);
        Self::new(b)
    }

    /// Number of intervals M.
    pub fn interval_count(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Boundary `T(m)` for `m = 0..=M`.
    pub fn boundary(&self, m: usize) -> f64 {
        self.boundaries[m]
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Final maturity `T(M)`.
    pub fn horizon(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    /// Length of interval `m` (1-based).
    pub fn interval_length(&self, m: usize) -> f64 {
        self.boundaries[m] - self.boundaries[m - 1]
    }

    /// 1-based interval index `m` with `T(m-1) < t <= T(m)`; `t = 0` maps to the
    /// first interval.
    pub fn interval_of(&self, t: f64) -> Result<usize> {
        if t < 0.0 {
            return Err(Error::invalid(format!("time {t} is negative")));
        }
        if t > self.horizon() {
            return Err(Error::invalid(format!(
                "time {t} is beyond the final maturity {}",
                self.horizon()
            )));
        }
        if t == 0.0 {
            return Ok(1);
        }
        for m in 1..=self.interval_count() {
            if t <= self.boundaries[m] {
                return Ok(m);
            }
        }
        unreachable!("t within [0, horizon] must fall in some interval");
    }
}
