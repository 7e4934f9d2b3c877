//! Single-name tweak calculus, tranche expected loss and delta reports.
//!
//! A proportional tweak of one row of the joint TD-matrix moves the name's
//! default probability and the portfolio tail probabilities in lockstep;
//! tranche deltas follow from re-pricing the tranche expected loss under the
//! tail shift. All closed forms here work on one maturity interval at a time
//! (the first by default).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::portfolio::{DiscountSpec, PortfolioSnapshot, TrancheSpec};
use crate::tail::{tail_to_pmf, TailCurve};
use crate::tdmatrix::TdMatrixSet;

/// Proportional tweak of one name's row of the joint matrix and its induced
/// shifts of the single-name and tail probabilities.
#[derive(Debug, Clone)]
pub struct TweakResult {
    pub name: usize,
    pub interval: usize,
    pub epsilon: f64,
    /// Shift of the name's forward default probability, `eps * sum_j P_ij`.
    pub delta_q: f64,
    /// Tail-increment shifts `delta w_j = eps * P_ij`, orders `1..=N`.
    pub delta_w: DVector<f64>,
    /// Conditional-matrix shift; only the tweaked row is nonzero, with
    /// entries `eps * p_ij (1 - p_ij)`.
    pub delta_p: DMatrix<f64>,
}

/// Applies the proportional row tweak `delta P_ij = eps * P_ij` on one
/// interval (1-based) and reports the induced shifts.
pub fn tweak_name(
    set: &TdMatrixSet,
    name: usize,
    epsilon: f64,
    interval: usize,
) -> Result<TweakResult> {
    let n = set.n_names();
    if name >= n {
        return Err(Error::invalid(format!("name index {name} out of range")));
    }
    if interval == 0 || interval > set.n_intervals() {
        return Err(Error::invalid(format!("interval {interval} out of range")));
    }
    let joint = set.joint(interval);
    let cond = set.conditional(interval);
    let delta_w = DVector::from_fn(n, |j, _| epsilon * joint[(name, j)]);
    let delta_q = delta_w.sum();
    let mut delta_p = DMatrix::zeros(n, n);
    for j in 0..n {
        let p = cond[(name, j)];
        delta_p[(name, j)] = epsilon * p * (1.0 - p);
    }
    Ok(TweakResult {
        name,
        interval,
        epsilon,
        delta_q,
        delta_w,
        delta_p,
    })
}

/// Tranche expected losses (as fractions of tranche notional) from a
/// cumulative tail row `w(0..=N)` by bucketed summation:
/// `EL_k = (1-R)/(K_k - K_(k-1)) * (1/N) * sum w_n` over the strike-implied
/// default counts. The fractional boundary terms are dropped; see
/// [`tranche_expected_loss_exact`] for the full payoff summation.
pub fn tranche_expected_loss(
    w_row: &[f64],
    tranches: &TrancheSpec,
    recovery: f64,
) -> Result<Vec<f64>> {
    let n = w_row.len() - 1;
    let idx = tranches.strike_indices(n, recovery);
    let max_loss = 1.0 - recovery;
    let mut els = Vec::with_capacity(tranches.n_tranches());
    for k in 1..=tranches.n_tranches() {
        let lower_strike = tranches.strikes()[k - 1];
        if lower_strike >= max_loss {
            els.push(0.0);
            continue;
        }
        let lo = idx[k - 1].max(1);
        let hi = idx[k];
        let sum: f64 = (lo..=hi).map(|j| w_row[j]).sum();
        els.push(max_loss / tranches.width(k) * sum / n as f64);
    }
    Ok(els)
}

/// Exact tranche expected losses by full payoff summation over the
/// loss-count distribution (the oracle for the bucketed approximation).
pub fn tranche_expected_loss_exact(
    w_row: &[f64],
    tranches: &TrancheSpec,
    recovery: f64,
) -> Result<Vec<f64>> {
    let n = (w_row.len() - 1) as f64;
    let rho = tail_to_pmf(w_row)?;
    let max_loss = 1.0 - recovery;
    let stop_loss = |strike: f64| -> f64 {
        if strike >= max_loss {
            return 0.0;
        }
        (0..rho.len())
            .map(|cnt| (max_loss * cnt as f64 / n - strike).max(0.0) * rho[cnt])
            .sum()
    };
    Ok((1..=tranches.n_tranches())
        .map(|k| {
            let upper = stop_loss(tranches.strikes()[k - 1]);
            let lower = stop_loss(tranches.strikes()[k]);
            (upper - lower) / tranches.width(k)
        })
        .collect())
}

/// Delta computation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaMethod {
    /// Default-leg ratio only.
    Plain,
    /// Premium-leg correction `(B + s_tr T / 2) / (B + s_i T / 2)`.
    Refined,
}

/// Single-name and index tranche deltas.
#[derive(Debug, Clone)]
pub struct DeltaReport {
    pub method: DeltaMethod,
    pub interval: usize,
    /// N x Ntr; `None` marks a riskless name whose delta is undefined.
    pub single_name: Vec<Vec<Option<f64>>>,
    /// Index deltas from the tail-shift ratio (top-down form). Rescaled by
    /// tranche widths these sum to one across the capital structure.
    pub index: Vec<f64>,
    /// Index deltas as the MTM-weighted aggregate of single-name deltas
    /// (bottom-up form).
    pub index_bottom_up: Vec<f64>,
}

/// Closed-form tranche deltas for every name, plus index deltas, on one
/// maturity interval. Tranche buckets are the half-open default-count ranges
/// implied by the strikes, so the width-weighted deltas of each name sum to
/// exactly `1/N`.
pub fn single_name_deltas(
    set: &TdMatrixSet,
    snapshot: &PortfolioSnapshot,
    tranches: &TrancheSpec,
    discount: &DiscountSpec,
    method: DeltaMethod,
    interval: usize,
) -> Result<DeltaReport> {
    let n = set.n_names();
    if snapshot.n_names() != n {
        return Err(Error::invalid("snapshot and matrix set sizes disagree"));
    }
    if interval == 0 || interval > set.n_intervals() {
        return Err(Error::invalid(format!("interval {interval} out of range")));
    }
    let ntr = tranches.n_tranches();
    let idx = tranches.strike_indices(n, snapshot.recovery());
    let dw = set.tails().increments(interval);
    let cond = set.conditional(interval);
    let horizon = set.grid().boundary(interval);
    let b0 = discount.discount(horizon);

    // Weighted row pieces: per name, the full sum and each bucket's share.
    let mut denom = vec![0.0; n];
    let mut bucket_num = vec![vec![0.0; ntr]; n];
    for i in 0..n {
        for k in 1..=ntr {
            let s: f64 = (idx[k - 1]..idx[k]).map(|c| dw[c] * cond[(i, c)]).sum();
            bucket_num[i][k - 1] = s;
            denom[i] += s;
        }
    }

    let premium_factor = |tranche: usize, spread_i: f64| -> f64 {
        match method {
            DeltaMethod::Plain => 1.0,
            DeltaMethod::Refined => {
                let s_tr = tranches.tranche_spreads()[tranche - 1];
                (b0 + 0.5 * s_tr * horizon) / (b0 + 0.5 * spread_i * horizon)
            }
        }
    };

    let mut single = vec![vec![None; ntr]; n];
    for i in 0..n {
        if denom[i] <= 0.0 {
            continue; // riskless name: delta undefined, reported as missing
        }
        for k in 1..=ntr {
            let base = bucket_num[i][k - 1] / denom[i] / (tranches.width(k) * n as f64);
            single[i][k - 1] = Some(base * premium_factor(k, snapshot.spreads()[i]));
        }
    }

    let total: f64 = denom.iter().sum();
    let mut index = vec![0.0; ntr];
    for k in 1..=ntr {
        let num: f64 = (0..n).map(|i| bucket_num[i][k - 1]).sum();
        let base = num / total / tranches.width(k);
        let corr = match method {
            DeltaMethod::Plain => 1.0,
            DeltaMethod::Refined => {
                let mean_spread =
                    snapshot.spreads().iter().sum::<f64>() / n as f64;
                let s_tr = tranches.tranche_spreads()[k - 1];
                (b0 + 0.5 * s_tr * horizon) / (b0 + 0.5 * mean_spread * horizon)
            }
        };
        index[k - 1] = base * corr;
    }

    // Bottom-up aggregation weighted by each name's MTM shift under a common
    // proportional tweak.
    let mut index_bu = vec![0.0; ntr];
    let mut weight_sum = 0.0;
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let leg = match method {
            DeltaMethod::Plain => 1.0,
            DeltaMethod::Refined => b0 + 0.5 * snapshot.spreads()[i] * horizon,
        };
        weights[i] = denom[i] * leg;
        weight_sum += weights[i];
    }
    if weight_sum > 0.0 {
        for k in 0..ntr {
            let mut acc = 0.0;
            for i in 0..n {
                if let Some(d) = single[i][k] {
                    acc += d * weights[i];
                }
            }
            index_bu[k] = n as f64 * acc / weight_sum;
        }
    }

    Ok(DeltaReport {
        method,
        interval,
        single_name: single,
        index,
        index_bottom_up: index_bu,
    })
}

/// Result of a bespoke name substitution.
#[derive(Debug, Clone)]
pub struct BespokeOutcome {
    pub set: TdMatrixSet,
    /// Shift of the forward tail increments, M x N (intervals x orders).
    pub delta_increments: DMatrix<f64>,
}

/// Replaces name `replaced` by one with cumulative default probabilities
/// `new_cum_q` (one entry per maturity `T1..TM`): the name's joint row is
/// rescaled proportionally per interval, every other row is left untouched,
/// and the implied tail increments absorb the difference. Equivalently, the
/// conditional columns are rescaled around the fixed substituted row.
pub fn bespoke_substitute(
    set: &TdMatrixSet,
    snapshot: &PortfolioSnapshot,
    replaced: usize,
    new_cum_q: &[f64],
) -> Result<BespokeOutcome> {
    let n = set.n_names();
    let m = set.n_intervals();
    if replaced >= n {
        return Err(Error::invalid(format!("name index {replaced} out of range")));
    }
    if new_cum_q.len() != m {
        return Err(Error::invalid(format!(
            "need {m} cumulative probabilities, got {}",
            new_cum_q.len()
        )));
    }
    let mut prev = 0.0;
    for (k, &q) in new_cum_q.iter().enumerate() {
        if !(0.0..=1.0).contains(&q) || q + 1e-12 < prev {
            return Err(Error::invalid(format!(
                "substitute probabilities must be monotone in [0, 1], violated at maturity {}",
                k + 1
            )));
        }
        prev = q;
    }

    let tails = set.tails();
    let mut delta_inc = DMatrix::zeros(m, n);
    let mut new_rows = DMatrix::zeros(m, n + 1);
    let mut new_conditional = Vec::with_capacity(m);
    let mut cum = vec![0.0; n + 1];
    let mut prev_q = 0.0;
    for interval in 1..=m {
        let dq_old = snapshot.cum_default_prob(replaced, interval)
            - snapshot.cum_default_prob(replaced, interval - 1);
        let dq_new = new_cum_q[interval - 1] - prev_q;
        prev_q = new_cum_q[interval - 1];
        let ratio = if dq_old > 0.0 {
            dq_new / dq_old
        } else if dq_new > 1e-14 {
            return Err(Error::infeasible(format!(
                "replaced name has zero forward probability on interval {interval}; cannot scale to {dq_new}"
            )));
        } else {
            1.0
        };

        let joint = set.joint(interval);
        let cond = set.conditional(interval);
        let dw = tails.increments(interval);
        let mut new_cond = cond.clone();
        for j in 0..n {
            let shift = (ratio - 1.0) * joint[(replaced, j)];
            delta_inc[(interval - 1, j)] = shift;
            let dw_new = dw[j] + shift;
            if dw_new > 0.0 {
                // Fixed substituted row, every other row rescaled per column.
                let scaled_row = ratio * joint[(replaced, j)] / dw_new;
                if scaled_row > 1.0 + 1e-12 {
                    return Err(Error::infeasible(format!(
                        "column rescale infeasible at interval {interval}, order {}",
                        j + 1
                    )));
                }
                for i in 0..n {
                    new_cond[(i, j)] = if i == replaced {
                        scaled_row.min(1.0)
                    } else {
                        joint[(i, j)] / dw_new
                    };
                }
            }
            // dw_new == 0: keep the frozen conditional column.
            cum[j + 1] += dw_new.max(0.0);
        }
        new_rows.row_mut(interval - 1).copy_from_slice(
            &std::iter::once(1.0)
                .chain((1..=n).map(|j| cum[j]))
                .collect::<Vec<_>>(),
        );
        new_conditional.push(new_cond);
    }

    let new_tails = TailCurve::new(new_rows, set.grid().clone()).map_err(|e| {
        Error::invalid(format!("substitution produced an invalid tail curve: {e}"))
    })?;
    let new_set = TdMatrixSet::from_conditional(set.names().to_vec(), new_conditional, new_tails)?;
    Ok(BespokeOutcome {
        set: new_set,
        delta_increments: delta_inc,
    })
}
