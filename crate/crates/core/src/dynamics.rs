//! Defaulter-identity simulation and information-process filtering.
//!
//! A path alternates portfolio-level default draws from the top model with
//! identity draws from the current next-to-default column, optional Bayesian
//! updating of that column from a noisy observation process between defaults,
//! and default updating (zero row and column, rescale later columns) at each
//! event.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{truncate_covariance, TruncatedCovariance};
use crate::tdmatrix::TdMatrixSet;
use crate::top::BirthProcessTop;

/// Posterior entries below this are treated as exactly zero.
const MASS_FLOOR: f64 = 1e-300;

/// Observation-process parameters: covariance of the driving Brownian
/// increments (optionally rank-truncated, with the likelihood inverse
/// truncated alongside) and the updating time step.
#[derive(Debug, Clone)]
pub struct InfoProcessParams {
    sigma: DMatrix<f64>,
    working: TruncatedCovariance,
    dt: f64,
    requested_rank: usize,
}

impl InfoProcessParams {
    /// `trunc_rank = None` keeps the full rank. The drift states are the unit
    /// basis vectors (one per name) and are implicit.
    pub fn new(sigma: DMatrix<f64>, dt: f64, trunc_rank: Option<usize>) -> Result<Self> {
        let n = sigma.nrows();
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("updating step must be positive, got {dt}")));
        }
        let rank = trunc_rank.unwrap_or(n);
        let working = truncate_covariance(&sigma, rank)?;
        Ok(InfoProcessParams {
            sigma,
            working,
            dt,
            requested_rank: rank,
        })
    }

    /// Homogeneous-correlation covariance `Sigma_ij = rho s_i s_j` (unit
    /// diagonal correlation).
    pub fn from_vols_and_correlation(
        vols: &[f64],
        rho: f64,
        dt: f64,
        trunc_rank: Option<usize>,
    ) -> Result<Self> {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::invalid(format!("correlation must lie in [-1, 1], got {rho}")));
        }
        let n = vols.len();
        let sigma = DMatrix::from_fn(n, n, |i, j| {
            let c = if i == j { 1.0 } else { rho };
            c * vols[i] * vols[j]
        });
        InfoProcessParams::new(sigma, dt, trunc_rank)
    }

    pub fn dimension(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn requested_rank(&self) -> usize {
        self.requested_rank
    }

    pub fn effective_rank(&self) -> usize {
        self.working.kept
    }

    /// Covariance as provided (no truncation).
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Pseudo-inverse entering the likelihood.
    pub fn pseudo_inverse(&self) -> &DMatrix<f64> {
        &self.working.pseudo_inverse
    }

    /// Factor `G` with `G G'` equal to the (truncated) covariance.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.working.factor
    }
}

/// Posterior over next-defaulter identities together with its prior.
#[derive(Debug, Clone)]
pub struct FilterState {
    pi: DVector<f64>,
    prior: DVector<f64>,
}

impl FilterState {
    pub fn new(pi0: DVector<f64>) -> Result<Self> {
        if pi0.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("probabilities must be nonnegative"));
        }
        let total = pi0.sum();
        if !(total > 0.0) {
            return Err(Error::invalid("prior carries no mass"));
        }
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("prior sums to {total}, expected 1")));
        }
        let pi = &pi0 / total;
        Ok(FilterState { pi, prior: pi0 })
    }

    pub fn pi(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn prior(&self) -> &DVector<f64> {
        &self.prior
    }

    /// One Bayes step from an observation increment.
    pub fn update(&mut self, dx: &DVector<f64>, params: &InfoProcessParams) -> Result<()> {
        bayes_update_weights(&mut self.pi, dx, params.dt(), params)
    }
}

/// In-place Bayes update of a probability vector from the observation
/// increment `dx` over a step `dt`. Likelihoods are accumulated in log space
/// with a max shift, so zero entries stay zero and underflow cannot wipe out
/// the posterior unless it is genuinely all-zero.
pub fn bayes_update_weights(
    pi: &mut DVector<f64>,
    dx: &DVector<f64>,
    dt: f64,
    params: &InfoProcessParams,
) -> Result<()> {
    let n = pi.len();
    if dx.len() != n || params.dimension() != n {
        return Err(Error::invalid("observation dimension mismatch"));
    }
    let pinv = params.pseudo_inverse();
    let drift_term = pinv * dx;
    let mut best = f64::NEG_INFINITY;
    let mut loglik = vec![0.0; n];
    for i in 0..n {
        if pi[i] > 0.0 {
            let ll = pi[i].ln() + drift_term[i] - 0.5 * dt * pinv[(i, i)];
            loglik[i] = ll;
            if ll > best {
                best = ll;
            }
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::numerical("posterior mass vanished in Bayes update"));
    }
    let mut total = 0.0;
    for i in 0..n {
        if pi[i] > 0.0 {
            let v = (loglik[i] - best).exp();
            pi[i] = v;
            total += v;
        }
    }
    if !(total > 0.0) {
        return Err(Error::numerical("posterior mass vanished in Bayes update"));
    }
    for i in 0..n {
        pi[i] /= total;
        if pi[i] < MASS_FLOOR {
            pi[i] = 0.0;
        }
    }
    let s = pi.sum();
    pi.scale_mut(1.0 / s);
    Ok(())
}

/// Observation increment for a true next defaulter `name`:
/// `dx = e_name dt + sqrt(dt) G z` with `z` standard normal.
pub fn simulate_observation<R: Rng>(
    name: usize,
    dt: f64,
    params: &InfoProcessParams,
    rng: &mut R,
) -> DVector<f64> {
    let g = params.factor();
    let z = DVector::from_fn(g.ncols(), |_, _| StandardNormal.sample(rng));
    let mut dx = g * z * dt.sqrt();
    dx[name] += dt;
    dx
}

/// Diffusion structure of the posterior SDE (zero-generator case): belief
/// volatilities, innovation correlations and the instantaneous lognormal
/// volatility of each posterior entry.
#[derive(Debug, Clone)]
pub struct FilterCoefficients {
    /// `(delta_ij - pi_j) / sigma_j`.
    pub gamma_hat: DMatrix<f64>,
    /// Innovation correlations `rho_jk = Sigma_jk / (sigma_j sigma_k)`.
    pub innovation_corr: DMatrix<f64>,
    /// Lognormal volatility of `pi_i`.
    pub lognormal_vol: DVector<f64>,
    /// Absolute diffusion magnitude of `d pi_i`, `pi_i * lognormal_vol_i`;
    /// vanishes at both `pi_i -> 0` and `pi_i -> 1`.
    pub diffusion_magnitude: DVector<f64>,
}

impl FilterCoefficients {
    /// Max over innovations of `|sum_i pi_i gamma_hat_ij|`; zero means the
    /// posterior entries sum to a constant along the flow.
    pub fn conservation_residual(&self, pi: &DVector<f64>) -> f64 {
        let n = pi.len();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let s: f64 = (0..n).map(|i| pi[i] * self.gamma_hat[(i, j)]).sum();
            worst = worst.max(s.abs());
        }
        worst
    }
}

/// Coefficients of the continuous-time posterior dynamics at state `pi`.
/// Exposed as diagnostics; simulation itself uses the discrete Bayes update.
pub fn continuous_filter_coefficients(
    pi: &DVector<f64>,
    params: &InfoProcessParams,
) -> Result<FilterCoefficients> {
    let n = pi.len();
    if params.dimension() != n {
        return Err(Error::invalid("state dimension mismatch"));
    }
    let sigma = params.sigma();
    let mut vols = vec![0.0; n];
    for j in 0..n {
        let v = sigma[(j, j)];
        if !(v > 0.0) {
            return Err(Error::invalid(format!(
                "observation volatility of component {j} must be positive"
            )));
        }
        vols[j] = v.sqrt();
    }
    let gamma_hat = DMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        (delta - pi[j]) / vols[j]
    });
    let innovation_corr =
        DMatrix::from_fn(n, n, |j, k| sigma[(j, k)] / (vols[j] * vols[k]));
    let mut lognormal_vol = DVector::zeros(n);
    for i in 0..n {
        // u_j = (delta_ij - pi_j) / sigma_j^2; var = u' Sigma u.
        let u = DVector::from_fn(n, |j, _| {
            let delta = if i == j { 1.0 } else { 0.0 };
            (delta - pi[j]) / (vols[j] * vols[j])
        });
        let var = (sigma * &u).dot(&u);
        lognormal_vol[i] = var.max(0.0).sqrt();
    }
    let diffusion_magnitude = DVector::from_fn(n, |i, _| pi[i] * lognormal_vol[i]);
    Ok(FilterCoefficients {
        gamma_hat,
        innovation_corr,
        lognormal_vol,
        diffusion_magnitude,
    })
}

/// Draws a defaulter from the order-`k` column (1-based) of a conditional
/// matrix, restricted to surviving names.
pub fn sample_identity<R: Rng>(
    matrix: &DMatrix<f64>,
    order_k: usize,
    alive: &[bool],
    rng: &mut R,
) -> Result<usize> {
    let n = matrix.nrows();
    if order_k == 0 || order_k > n {
        return Err(Error::invalid(format!("default order {order_k} out of range")));
    }
    let col = matrix.column(order_k - 1);
    let mut total = 0.0;
    for i in 0..n {
        if alive[i] && col[i] > 0.0 {
            total += col[i];
        }
    }
    if !(total > 0.0) {
        return Err(Error::numerical(format!(
            "column {order_k} is degenerate: no surviving name carries mass"
        )));
    }
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for i in 0..n {
        if alive[i] && col[i] > 0.0 {
            acc += col[i];
            last = Some(i);
            if target < acc {
                return Ok(i);
            }
        }
    }
    Ok(last.expect("positive total implies at least one candidate"))
}

/// Default updating at the `order_k`-th default (1-based) of name
/// `defaulter`: zero the name's row and the consumed column in every matrix,
/// then rescale the remaining columns by `1/(1 - p_defaulter)` so column sums
/// over survivors return to one. Columns fully carried by the defaulter
/// become inactive; a warning is returned for each.
pub fn default_update(
    matrices: &mut [DMatrix<f64>],
    defaulter: usize,
    order_k: usize,
) -> Vec<String> {
    let mut warnings = Vec::new();
    for (idx, p) in matrices.iter_mut().enumerate() {
        let n = p.nrows();
        p.column_mut(order_k - 1).fill(0.0);
        for c in order_k..n {
            let pd = p[(defaulter, c)];
            let denom = 1.0 - pd;
            if denom <= 1e-12 {
                p.column_mut(c).fill(0.0);
                warnings.push(format!(
                    "matrix {}: column {} carried entirely by defaulter; now inactive",
                    idx + 1,
                    c + 1
                ));
            } else {
                for i in 0..n {
                    p[(i, c)] = if i == defaulter { 0.0 } else { p[(i, c)] / denom };
                }
            }
        }
        p.row_mut(defaulter).fill(0.0);
    }
    warnings
}

/// Which column the defaulter identity is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentitySampling {
    /// Current matrices, i.e. default-updated and (when enabled)
    /// information-filtered to the default time.
    Filtered,
    /// Time-zero calibrated columns restricted to survivors, ignoring any
    /// accumulated information updates. For A/B comparisons.
    Static,
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// `None` disables information updating (matrices are then piecewise
    /// constant between defaults).
    pub info: Option<InfoProcessParams>,
    pub identity_sampling: IdentitySampling,
    /// Number of leading paths for which full event records (with matrix
    /// snapshots and posterior checkpoints) are kept.
    pub record_paths: usize,
}

/// One default event on a path.
#[derive(Debug, Clone, Serialize)]
pub struct DefaultEvent {
    pub path: usize,
    pub time: f64,
    pub order: usize,
    pub name_index: usize,
    pub interval: usize,
}

/// Detailed record of one simulated path.
#[derive(Debug, Clone)]
pub struct PathRecord {
    pub path: usize,
    pub events: Vec<DefaultEvent>,
    /// Posterior over the next defaulter at each updating step (time, pi),
    /// read off the next-to-default column of the current interval matrix.
    pub pi_checkpoints: Vec<(f64, DVector<f64>)>,
    /// Conditional matrices right after each default update.
    pub matrix_snapshots: Vec<(f64, Vec<DMatrix<f64>>)>,
}

/// Aggregate statistics over all simulated paths.
#[derive(Debug, Clone)]
pub struct SimulationStats {
    pub n_paths: usize,
    /// N x M counts: paths on which name `i` defaulted by `T(m)`.
    pub cumulative_defaults: DMatrix<f64>,
    /// Histogram of the portfolio default count at the horizon.
    pub default_count_distribution: Vec<usize>,
}

impl SimulationStats {
    /// Empirical cumulative default probability of name `i` by `T(m)`.
    pub fn empirical_q(&self, i: usize, m: usize) -> f64 {
        self.cumulative_defaults[(i, m - 1)] / self.n_paths as f64
    }
}

#[derive(Debug)]
pub struct SimulationOutput {
    pub stats: SimulationStats,
    pub records: Vec<PathRecord>,
}

struct PathOutcome {
    events: Vec<DefaultEvent>,
    record: Option<PathRecord>,
}

/// Runs the simulation loop over `n_paths` independent paths (parallelized;
/// path `p` owns the RNG stream `(seed, p)`, so results do not depend on the
/// worker count).
pub fn run_simulation(
    set: &TdMatrixSet,
    top: &BirthProcessTop,
    cfg: &SimulationConfig,
) -> Result<SimulationOutput> {
    let n = set.n_names();
    if top.n_names() != n {
        return Err(Error::invalid("top model and matrix set sizes disagree"));
    }
    if !(cfg.horizon > 0.0) || cfg.horizon > set.grid().horizon() + 1e-12 {
        return Err(Error::invalid(format!(
            "horizon must lie in (0, {}], got {}",
            set.grid().horizon(),
            cfg.horizon
        )));
    }
    if cfg.n_paths == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    if let Some(info) = &cfg.info {
        if info.dimension() != n {
            return Err(Error::invalid("information process dimension mismatch"));
        }
    }

    let outcomes: Vec<Result<PathOutcome>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| {
            simulate_path(set, top, cfg, path)
                .map_err(|e| Error::numerical(format!("path {path}: {e}")))
        })
        .collect();

    let m = set.n_intervals();
    let mut cumulative = DMatrix::zeros(n, m);
    let mut hist = vec![0usize; n + 1];
    let mut records = Vec::new();
    for outcome in outcomes {
        let outcome = outcome?;
        let mut count_at_horizon = 0usize;
        for ev in &outcome.events {
            count_at_horizon += 1;
            for mm in ev.interval..=m {
                cumulative[(ev.name_index, mm - 1)] += 1.0;
            }
        }
        hist[count_at_horizon] += 1;
        if let Some(r) = outcome.record {
            records.push(r);
        }
    }
    Ok(SimulationOutput {
        stats: SimulationStats {
            n_paths: cfg.n_paths,
            cumulative_defaults: cumulative,
            default_count_distribution: hist,
        },
        records,
    })
}

fn path_rng(seed: u64, path: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

fn simulate_path(
    set: &TdMatrixSet,
    top: &BirthProcessTop,
    cfg: &SimulationConfig,
    path: usize,
) -> Result<PathOutcome> {
    let detailed = cfg.info.is_some() || path < cfg.record_paths;
    if detailed {
        simulate_path_detailed(set, top, cfg, path)
    } else {
        simulate_path_fast(set, top, cfg, path)
    }
}

/// Without information updating, default updating is exactly a restriction of
/// the calibrated columns to survivors followed by renormalization, so the
/// matrices never need to be materialized per path.
fn simulate_path_fast(
    set: &TdMatrixSet,
    top: &BirthProcessTop,
    cfg: &SimulationConfig,
    path: usize,
) -> Result<PathOutcome> {
    let mut rng = path_rng(cfg.seed, path);
    let n = set.n_names();
    let grid = set.grid();
    let mut alive = vec![true; n];
    let mut events = Vec::new();
    let mut t = 0.0;
    for count in 0..n {
        let lambda = top.intensity(count);
        if lambda <= 0.0 {
            break;
        }
        t += Exp::new(lambda).expect("positive rate").sample(&mut rng);
        if t > cfg.horizon {
            break;
        }
        let interval = grid.interval_of(t)?;
        let name = sample_identity(set.conditional(interval), count + 1, &alive, &mut rng)?;
        alive[name] = false;
        events.push(DefaultEvent {
            path,
            time: t,
            order: count + 1,
            name_index: name,
            interval,
        });
    }
    Ok(PathOutcome {
        events,
        record: None,
    })
}

fn simulate_path_detailed(
    set: &TdMatrixSet,
    top: &BirthProcessTop,
    cfg: &SimulationConfig,
    path: usize,
) -> Result<PathOutcome> {
    let mut rng = path_rng(cfg.seed, path);
    let n = set.n_names();
    let m_total = set.n_intervals();
    let grid = set.grid();
    let record = path < cfg.record_paths;

    let mut matrices: Vec<DMatrix<f64>> = set.conditional_matrices().to_vec();
    let mut alive = vec![true; n];
    let mut events = Vec::new();
    let mut pi_checkpoints = Vec::new();
    let mut matrix_snapshots = Vec::new();
    let mut t_prev = 0.0;
    let mut active_from = 1usize;

    for count in 0..n {
        let lambda = top.intensity(count);
        let tau = if lambda > 0.0 {
            t_prev + Exp::new(lambda).expect("positive rate").sample(&mut rng)
        } else {
            f64::INFINITY
        };
        let landed = tau <= cfg.horizon;
        let segment_end = if landed { tau } else { cfg.horizon };

        // Hidden next defaulter driving the observation drift; for a default
        // beyond the horizon the draw comes from the column of the interval
        // containing the horizon.
        let order = count + 1;
        let identity = if landed || cfg.info.is_some() {
            let m_star = grid.interval_of(segment_end.max(f64::MIN_POSITIVE))?;
            let source = match cfg.identity_sampling {
                IdentitySampling::Filtered => &matrices[m_star - 1],
                IdentitySampling::Static => set.conditional(m_star),
            };
            Some(sample_identity(source, order, &alive, &mut rng)?)
        } else {
            None
        };

        if let Some(info) = &cfg.info {
            let truth = identity.expect("identity drawn when info updating is on");
            let mut t = t_prev;
            while t < segment_end - 1e-14 {
                let step = info.dt().min(segment_end - t);
                let dx = simulate_observation(truth, step, info, &mut rng);
                let pinv = info.pseudo_inverse();
                let drift_term = pinv * &dx;
                while active_from < grid.interval_of(t.max(f64::MIN_POSITIVE))? {
                    active_from += 1;
                }
                for mm in active_from..=m_total {
                    bayes_update_column(
                        &mut matrices[mm - 1],
                        order,
                        &drift_term,
                        step,
                        pinv,
                    )?;
                }
                t += step;
                if record {
                    let current = grid.interval_of(t.min(grid.horizon()).max(f64::MIN_POSITIVE))?;
                    pi_checkpoints.push((t, matrices[current - 1].column(order - 1).into_owned()));
                }
            }
        }

        if !landed {
            break;
        }
        let m_star = grid.interval_of(tau)?;
        let name = identity.expect("identity drawn for landed default");
        alive[name] = false;
        while active_from < m_star {
            active_from += 1;
        }
        default_update(&mut matrices[active_from - 1..], name, order);
        events.push(DefaultEvent {
            path,
            time: tau,
            order,
            name_index: name,
            interval: m_star,
        });
        if record {
            matrix_snapshots.push((tau, matrices[active_from - 1..].to_vec()));
        }
        t_prev = tau;
    }

    let record = record.then(|| PathRecord {
        path,
        events: events.clone(),
        pi_checkpoints,
        matrix_snapshots,
    });
    Ok(PathOutcome { events, record })
}

/// Bayes update of one next-to-default column (1-based order) in place,
/// reusing the precomputed `pinv * dx` term.
fn bayes_update_column(
    matrix: &mut DMatrix<f64>,
    order_k: usize,
    drift_term: &DVector<f64>,
    dt: f64,
    pinv: &DMatrix<f64>,
) -> Result<()> {
    let n = matrix.nrows();
    let c = order_k - 1;
    let mut best = f64::NEG_INFINITY;
    let mut loglik = vec![0.0; n];
    let mut any = false;
    for i in 0..n {
        let p = matrix[(i, c)];
        if p > 0.0 {
            any = true;
            let ll = p.ln() + drift_term[i] - 0.5 * dt * pinv[(i, i)];
            loglik[i] = ll;
            if ll > best {
                best = ll;
            }
        }
    }
    if !any {
        // Column already inactive (all mass consumed); nothing to filter.
        return Ok(());
    }
    let mut total = 0.0;
    for i in 0..n {
        if matrix[(i, c)] > 0.0 {
            let v = (loglik[i] - best).exp();
            matrix[(i, c)] = v;
            total += v;
        }
    }
    if !(total > 0.0) {
        return Err(Error::numerical("posterior mass vanished in column update"));
    }
    for i in 0..n {
        matrix[(i, c)] /= total;
        if matrix[(i, c)] < MASS_FLOOR {
            matrix[(i, c)] = 0.0;
        }
    }
    Ok(())
}

/// Pure-filtering run: no defaults, one hidden identity per path drawn from
/// `pi0`, Bayes updating at step `dt` up to the horizon. Reports realized
/// log-volatilities and correlations of the posterior entries plus the
/// fraction of paths whose posterior collapses early.
#[derive(Debug, Clone)]
pub struct FilterPathsConfig {
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// A path "collapses" when some posterior entry exceeds this before
    /// `collapse_horizon`.
    pub collapse_threshold: f64,
    pub collapse_horizon: f64,
}

#[derive(Debug, Clone)]
pub struct FilterPathsStats {
    pub n_paths: usize,
    /// Paths contributing to the vol/correlation estimates (enough interior
    /// steps before any collapse).
    pub paths_used: usize,
    /// Mean over paths of the per-path average realized log-vol of the
    /// posterior entries (annualized), with its standard error.
    pub mean_vol: f64,
    pub se_mean_vol: f64,
    /// Mean over paths of the per-path cross-name dispersion of vols.
    pub std_vol: f64,
    /// Mean over paths of the per-path average pairwise correlation of
    /// posterior log-increments, with its standard error.
    pub mean_corr: f64,
    pub se_mean_corr: f64,
    pub std_corr: f64,
    pub collapse_fraction: f64,
}

pub fn run_filter_paths(
    pi0: &DVector<f64>,
    params: &InfoProcessParams,
    cfg: &FilterPathsConfig,
) -> Result<FilterPathsStats> {
    let n = pi0.len();
    if params.dimension() != n {
        return Err(Error::invalid("state dimension mismatch"));
    }
    FilterState::new(pi0.clone())?;
    if !(cfg.horizon > 0.0) || cfg.n_paths == 0 {
        return Err(Error::invalid("need a positive horizon and at least one path"));
    }

    struct PathStats {
        mean_vol: f64,
        std_vol: f64,
        mean_corr: f64,
        std_corr: f64,
        usable: bool,
        collapsed: bool,
    }

    let results: Vec<Result<PathStats>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = path_rng(cfg.seed, path);
            let truth = sample_from_weights(pi0, &mut rng)?;
            let mut pi = pi0.clone();
            let steps = (cfg.horizon / params.dt()).round().max(1.0) as usize;
            let mut increments: Vec<DVector<f64>> = Vec::new();
            let mut collapsed = false;
            let mut window_open = true;
            let mut t = 0.0;
            for _ in 0..steps {
                let dx = simulate_observation(truth, params.dt(), params, &mut rng);
                let prev = pi.clone();
                bayes_update_weights(&mut pi, &dx, params.dt(), params)?;
                t += params.dt();
                if !collapsed && t <= cfg.collapse_horizon + 1e-12 && pi.max() > cfg.collapse_threshold
                {
                    collapsed = true;
                }
                if window_open {
                    let interior = (0..n).all(|i| {
                        prev[i] > 1e-12 && pi[i] > 1e-12 && prev[i] < 1.0 - 1e-12 && pi[i] < 1.0 - 1e-12
                    });
                    if interior {
                        increments
                            .push(DVector::from_fn(n, |i, _| (pi[i] / prev[i]).ln()));
                    } else {
                        window_open = false;
                    }
                }
            }
            if increments.len() < 8 {
                return Ok(PathStats {
                    mean_vol: 0.0,
                    std_vol: 0.0,
                    mean_corr: 0.0,
                    std_corr: 0.0,
                    usable: false,
                    collapsed,
                });
            }
            let vols: Vec<f64> = (0..n)
                .map(|i| {
                    let series: Vec<f64> = increments.iter().map(|v| v[i]).collect();
                    sample_std(&series) / params.dt().sqrt()
                })
                .collect();
            let mut corrs = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    let a: Vec<f64> = increments.iter().map(|v| v[i]).collect();
                    let b: Vec<f64> = increments.iter().map(|v| v[j]).collect();
                    if let Some(c) = pearson(&a, &b) {
                        corrs.push(c);
                    }
                }
            }
            Ok(PathStats {
                mean_vol: mean(&vols),
                std_vol: sample_std(&vols),
                mean_corr: mean(&corrs),
                std_corr: sample_std(&corrs),
                usable: true,
                collapsed,
            })
        })
        .collect();

    let mut mean_vols = Vec::new();
    let mut std_vols = Vec::new();
    let mut mean_corrs = Vec::new();
    let mut std_corrs = Vec::new();
    let mut collapsed_count = 0usize;
    for r in results {
        let s = r?;
        if s.collapsed {
            collapsed_count += 1;
        }
        if s.usable {
            mean_vols.push(s.mean_vol);
            std_vols.push(s.std_vol);
            mean_corrs.push(s.mean_corr);
            std_corrs.push(s.std_corr);
        }
    }
    let used = mean_vols.len();
    let se = |v: &[f64]| {
        if v.len() > 1 {
            sample_std(v) / (v.len() as f64).sqrt()
        } else {
            f64::NAN
        }
    };
    Ok(FilterPathsStats {
        n_paths: cfg.n_paths,
        paths_used: used,
        mean_vol: mean(&mean_vols),
        se_mean_vol: se(&mean_vols),
        std_vol: mean(&std_vols),
        mean_corr: mean(&mean_corrs),
        se_mean_corr: se(&mean_corrs),
        std_corr: mean(&std_corrs),
        collapse_fraction: collapsed_count as f64 / cfg.n_paths as f64,
    })
}

fn sample_from_weights<R: Rng>(weights: &DVector<f64>, rng: &mut R) -> Result<usize> {
    let total = weights.sum();
    if !(total > 0.0) {
        return Err(Error::invalid("weights carry no mass"));
    }
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for i in 0..weights.len() {
        if weights[i] > 0.0 {
            acc += weights[i];
            last = i;
            if target < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    var.sqrt()
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = mean(a);
    let mb = mean(b);
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(num / (va * vb).sqrt())
}
