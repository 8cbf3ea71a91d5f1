//! Regularized MNL maximum likelihood, design matrices and Thompson samples.
//!
//! The shared estimator learns one parameter vector from per-server feature
//! vectors. The disjoint estimator keeps one parameter vector, design matrix
//! and selection count per server over a shared context; only the servers in
//! the played assortment are touched by an update.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::mnl::Assortment;

/// Gradient-norm tolerance for every MLE solve.
pub const MLE_TOLERANCE: f64 = 1e-8;
/// Newton iteration (or block sweep) cap.
pub const MLE_MAX_ITERATIONS: usize = 100;

/// One logged round: the feature vector of every offered item (assortment
/// order), the assortment, and the observed choice.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<DVector<f64>>,
    pub assortment: Assortment,
    /// 0 for the outside option, otherwise the 1-based assortment position.
    pub choice: usize,
}

impl Observation {
    pub fn new(features: Vec<DVector<f64>>, assortment: Assortment, choice: usize) -> Result<Self> {
        check_dim(assortment.len(), features.len())?;
        if choice > assortment.len() {
            return Err(Error::Domain(format!(
                "choice {choice} outside 0..={}",
                assortment.len()
            )));
        }
        Ok(Observation { features, assortment, choice })
    }

    /// The one-hot choice vector `(y_0, y_1, …, y_K)`.
    pub fn y(&self) -> Vec<u8> {
        let mut y = vec![0; self.assortment.len() + 1];
        y[self.choice] = 1;
        y
    }
}

/// Chronological log of learnable observations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationLog {
    entries: Vec<Observation>,
}

impl ObservationLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, obs: Observation) {
        self.entries.push(obs);
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Outcome of an MLE solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub theta: DVector<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

// (log-partition, item probabilities) for utilities u with the outside option at 0.
fn log_partition_and_probs(u: &[f64], probs: &mut Vec<f64>) -> f64 {
    let shift = u.iter().copied().fold(0.0_f64, f64::max);
    let outside = (-shift).exp();
    probs.clear();
    probs.extend(u.iter().map(|v| (v - shift).exp()));
    let total = outside + probs.iter().sum::<f64>();
    probs.iter_mut().for_each(|p| *p /= total);
    shift + total.ln()
}

fn neg_log_lik_term(u: &[f64], choice: usize, scratch: &mut Vec<f64>) -> f64 {
    let lse = log_partition_and_probs(u, scratch);
    if choice == 0 {
        lse
    } else {
        lse - u[choice - 1]
    }
}

/// Regularized negative log-likelihood `(λ₀/2)‖θ‖² − Σ_i Σ_j y_ij ln p_j`.
pub fn shared_loss(log: &ObservationLog, lambda0: f64, theta: &DVector<f64>) -> f64 {
    let mut scratch = Vec::new();
    let mut u = Vec::new();
    let mut total = 0.5 * lambda0 * theta.norm_squared();
    for obs in log.entries() {
        u.clear();
        u.extend(obs.features.iter().map(|x| x.dot(theta)));
        total += neg_log_lik_term(&u, obs.choice, &mut scratch);
    }
    total
}

/// Gradient `λ₀θ + Σ_i Σ_{j∈S_i} (p_ij − y_ij) x_ij`.
pub fn shared_gradient(log: &ObservationLog, lambda0: f64, theta: &DVector<f64>) -> DVector<f64> {
    shared_gradient_hessian(log, lambda0, theta, false).0
}

/// Hessian `λ₀I + Σ_i (Σ_j p_j x_j x_jᵀ − m mᵀ)` with `m = Σ_j p_j x_j`.
pub fn shared_hessian(log: &ObservationLog, lambda0: f64, theta: &DVector<f64>) -> DMatrix<f64> {
    shared_gradient_hessian(log, lambda0, theta, true).1
}

fn shared_gradient_hessian(
    log: &ObservationLog,
    lambda0: f64,
    theta: &DVector<f64>,
    with_hessian: bool,
) -> (DVector<f64>, DMatrix<f64>) {
    let dim = theta.len();
    let mut grad = theta * lambda0;
    let mut hess = if with_hessian {
        DMatrix::identity(dim, dim) * lambda0
    } else {
        DMatrix::zeros(0, 0)
    };
    let mut probs = Vec::new();
    let mut u = Vec::new();
    let mut mean = DVector::zeros(dim);
    for obs in log.entries() {
        u.clear();
        u.extend(obs.features.iter().map(|x| x.dot(theta)));
        log_partition_and_probs(&u, &mut probs);
        mean.fill(0.0);
        for (pos, (x, p)) in obs.features.iter().zip(&probs).enumerate() {
            let y = if obs.choice == pos + 1 { 1.0 } else { 0.0 };
            grad.axpy(p - y, x, 1.0);
            if with_hessian {
                mean.axpy(*p, x, 1.0);
                hess.ger(*p, x, x, 1.0);
            }
        }
        if with_hessian {
            hess.ger(-1.0, &mean, &mean, 1.0);
        }
    }
    (grad, hess)
}

fn newton_direction(hess: DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = Cholesky::new(hess)
        .ok_or_else(|| Error::Numerical("MLE Hessian is not positive definite".into()))?;
    Ok(chol.solve(grad))
}

/// Damped Newton solve of the regularized shared MNL likelihood.
///
/// Starts from `warm_start`, backtracks until the Armijo condition holds, and
/// stops once `‖∇ℒ‖₂ ≤ 1e-8` or after 100 iterations. A non-converged fit
/// returns the last iterate with `converged == false`.
pub fn mle_fit(log: &ObservationLog, lambda0: f64, warm_start: &DVector<f64>) -> Result<MleFit> {
    if !(lambda0 > 0.0) {
        return Err(Error::Domain(format!("regularization {lambda0} must be positive")));
    }
    for obs in log.entries() {
        for x in &obs.features {
            check_dim(warm_start.len(), x.len())?;
        }
    }
    let mut theta = warm_start.clone();
    let mut loss = shared_loss(log, lambda0, &theta);
    for iteration in 0..MLE_MAX_ITERATIONS {
        let (grad, hess) = shared_gradient_hessian(log, lambda0, &theta, true);
        let gnorm = grad.norm();
        if gnorm <= MLE_TOLERANCE {
            return Ok(MleFit { theta, iterations: iteration, gradient_norm: gnorm, converged: true });
        }
        let dir = newton_direction(hess, &grad)?;
        let slope = grad.dot(&dir);
        // once the Newton decrement is at rounding level, loss comparisons are noise
        let quadratic = slope <= 1e-12 * (1.0 + loss.abs());
        let mut step = 1.0;
        loop {
            let candidate = &theta - &dir * step;
            let cand_loss = shared_loss(log, lambda0, &candidate);
            if quadratic || cand_loss <= loss - 1e-4 * step * slope || step < 1e-10 {
                theta = candidate;
                loss = cand_loss;
                break;
            }
            step *= 0.5;
        }
    }
    let gnorm = shared_gradient(log, lambda0, &theta).norm();
    Ok(MleFit {
        theta,
        iterations: MLE_MAX_ITERATIONS,
        gradient_norm: gnorm,
        converged: gnorm <= MLE_TOLERANCE,
    })
}

/// Confidence radius `α_l = (κ/2)·√(d·ln(1 + lK/(dλ₀)) + 4·ln l) + κ√λ₀`.
///
/// `l = 0` returns `κ√λ₀`.
pub fn confidence_radius(l: usize, d: usize, k: usize, kappa: f64, lambda0: f64) -> f64 {
    let tail = kappa * lambda0.sqrt();
    if l == 0 {
        return tail;
    }
    let (l, d, k) = (l as f64, d as f64, k as f64);
    let inner = d * (1.0 + l * k / (d * lambda0)).ln() + 4.0 * l.ln();
    0.5 * kappa * inner.sqrt() + tail
}

/// Number of Thompson samples `M = ⌈1 − ln K / ln(1 − 1/(4√(eπ)))⌉`.
pub fn sample_count(k: usize) -> usize {
    assert!(k >= 1, "assortment size must be positive");
    let denom = (1.0 - 1.0 / (4.0 * (std::f64::consts::E * std::f64::consts::PI).sqrt())).ln();
    let m = (1.0 - (k as f64).ln() / denom).ceil();
    (m as usize).max(1)
}

/// `M` i.i.d. draws from `N(θ̂, α²V⁻¹)`.
///
/// With `V = LLᵀ`, each draw is `θ̂ + α·L⁻ᵀz` for standard normal `z`.
pub fn thompson_samples(
    theta_hat: &DVector<f64>,
    alpha: f64,
    v: &DMatrix<f64>,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<DVector<f64>>> {
    check_dim(theta_hat.len(), v.nrows())?;
    let chol = Cholesky::new(v.clone())
        .ok_or_else(|| Error::Numerical("design matrix is not positive definite".into()))?;
    let l = chol.l();
    let dim = theta_hat.len();
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = l
            .tr_solve_lower_triangular(&z)
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        out.push(theta_hat + w * alpha);
    }
    Ok(out)
}

/// `max_i xᵀθ̃⁽ⁱ⁾`.
pub fn optimistic_utility(x: &DVector<f64>, samples: &[DVector<f64>]) -> f64 {
    samples
        .iter()
        .map(|s| x.dot(s))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Optimistic departure rate `R̃(x, S)` for the shared model.
///
/// `features[j]` is the feature vector of server `j`.
pub fn optimistic_rate(
    features: &[DVector<f64>],
    assortment: &Assortment,
    samples: &[DVector<f64>],
) -> Result<f64> {
    let mut u = Vec::with_capacity(assortment.len());
    for &j in assortment.servers() {
        let x = features
            .get(j)
            .ok_or_else(|| Error::Domain(format!("no features for server {}", j + 1)))?;
        if let Some(s) = samples.first() {
            check_dim(s.len(), x.len())?;
        }
        u.push(optimistic_utility(x, samples));
    }
    crate::mnl::departure_rate(&u)
}

/// Optimistic departure rate for the disjoint model; `samples[j]` are server `j`'s draws.
pub fn optimistic_rate_disjoint(
    x: &DVector<f64>,
    assortment: &Assortment,
    samples: &[Vec<DVector<f64>>],
) -> Result<f64> {
    let mut u = Vec::with_capacity(assortment.len());
    for &j in assortment.servers() {
        let s = samples
            .get(j)
            .ok_or_else(|| Error::Domain(format!("no samples for server {}", j + 1)))?;
        if let Some(first) = s.first() {
            check_dim(first.len(), x.len())?;
        }
        u.push(optimistic_utility(x, s));
    }
    crate::mnl::departure_rate(&u)
}

/// Shared-parameter estimator: design matrix, MLE, and the log it is fitted to.
#[derive(Debug, Clone)]
pub struct SharedEstimator {
    pub v: DMatrix<f64>,
    pub theta_hat: DVector<f64>,
    pub lambda0: f64,
    pub kappa: f64,
    k: usize,
    log: ObservationLog,
    last_fit: Option<MleFit>,
}

impl SharedEstimator {
    pub fn new(dim: usize, k: usize, lambda0: f64, kappa: f64) -> Result<Self> {
        if !(lambda0 > 0.0) || !(kappa >= 0.0) {
            return Err(Error::Config(format!(
                "need lambda0 > 0 and kappa >= 0, got {lambda0} and {kappa}"
            )));
        }
        Ok(SharedEstimator {
            v: DMatrix::identity(dim, dim) * lambda0,
            theta_hat: DVector::zeros(dim),
            lambda0,
            kappa,
            k,
            log: ObservationLog::new(),
            last_fit: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn log(&self) -> &ObservationLog {
        &self.log
    }

    /// Number of learnable rounds observed so far.
    pub fn count(&self) -> usize {
        self.log.len()
    }

    pub fn last_fit(&self) -> Option<&MleFit> {
        self.last_fit.as_ref()
    }

    /// Current confidence radius.
    pub fn alpha(&self) -> f64 {
        confidence_radius(self.count(), self.dim(), self.k, self.kappa, self.lambda0)
    }

    /// Logs `obs`, refits the MLE warm-started from the previous estimate, and
    /// adds `Σ_{j∈S} x_j x_jᵀ` to the design matrix.
    pub fn update(&mut self, obs: Observation) -> Result<&MleFit> {
        for x in &obs.features {
            check_dim(self.dim(), x.len())?;
            self.v.ger(1.0, x, x, 1.0);
        }
        self.log.push(obs);
        let fit = mle_fit(&self.log, self.lambda0, &self.theta_hat)?;
        self.theta_hat = fit.theta.clone();
        Ok(self.last_fit.insert(fit))
    }

    pub fn samples(&self, m: usize, rng: &mut impl Rng) -> Result<Vec<DVector<f64>>> {
        thompson_samples(&self.theta_hat, self.alpha(), &self.v, m, rng)
    }
}

/// Per-server statistics of the disjoint estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerStats {
    pub v: DMatrix<f64>,
    pub theta_hat: DVector<f64>,
    /// Rounds in which this server was offered.
    pub count: usize,
    pub alpha: f64,
}

/// Disjoint-parameter loss `(λ₀/2)Σ_j‖θ_j‖² − Σ_i Σ_j y_ij ln p_j(x_i, S_i, Θ)`.
///
/// Item `pos` of observation `i` uses `features[pos]ᵀ θ_{S_i[pos]}`.
pub fn disjoint_loss(log: &ObservationLog, lambda0: f64, thetas: &[DVector<f64>]) -> f64 {
    let mut scratch = Vec::new();
    let mut u = Vec::new();
    let mut total = 0.5 * lambda0 * thetas.iter().map(|t| t.norm_squared()).sum::<f64>();
    for obs in log.entries() {
        disjoint_item_utilities(obs, thetas, &mut u);
        total += neg_log_lik_term(&u, obs.choice, &mut scratch);
    }
    total
}

fn disjoint_item_utilities(obs: &Observation, thetas: &[DVector<f64>], u: &mut Vec<f64>) {
    u.clear();
    u.extend(
        obs.features
            .iter()
            .zip(obs.assortment.servers())
            .map(|(x, &j)| x.dot(&thetas[j])),
    );
}

/// Per-server gradients `λ₀θ_j − Σ_i 1{j∈S_i}(y_ij − p_j) x_i`.
pub fn disjoint_gradient(
    log: &ObservationLog,
    lambda0: f64,
    thetas: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let mut grads: Vec<DVector<f64>> = thetas.iter().map(|t| t * lambda0).collect();
    let mut u = Vec::new();
    let mut probs = Vec::new();
    for obs in log.entries() {
        disjoint_item_utilities(obs, thetas, &mut u);
        log_partition_and_probs(&u, &mut probs);
        for (pos, (&j, x)) in obs.assortment.servers().iter().zip(&obs.features).enumerate() {
            let y = if obs.choice == pos + 1 { 1.0 } else { 0.0 };
            grads[j].axpy(probs[pos] - y, x, 1.0);
        }
    }
    grads
}

/// Result of a block-coordinate disjoint fit.
#[derive(Debug, Clone, PartialEq)]
pub struct DisjointFit {
    pub thetas: Vec<DVector<f64>>,
    pub sweeps: usize,
    /// Norm of the gradient stacked over the fitted blocks.
    pub gradient_norm: f64,
    pub converged: bool,
}

// Loss restricted to the terms that depend on block j.
fn block_loss(
    log: &ObservationLog,
    rows: &[usize],
    lambda0: f64,
    thetas: &[DVector<f64>],
    j: usize,
) -> f64 {
    let mut scratch = Vec::new();
    let mut u = Vec::new();
    let mut total = 0.5 * lambda0 * thetas[j].norm_squared();
    for &i in rows {
        let obs = &log.entries()[i];
        disjoint_item_utilities(obs, thetas, &mut u);
        total += neg_log_lik_term(&u, obs.choice, &mut scratch);
    }
    total
}

fn block_gradient_hessian(
    log: &ObservationLog,
    rows: &[usize],
    lambda0: f64,
    thetas: &[DVector<f64>],
    j: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let dim = thetas[j].len();
    let mut grad = &thetas[j] * lambda0;
    let mut hess = DMatrix::identity(dim, dim) * lambda0;
    let mut u = Vec::new();
    let mut probs = Vec::new();
    for &i in rows {
        let obs = &log.entries()[i];
        disjoint_item_utilities(obs, thetas, &mut u);
        log_partition_and_probs(&u, &mut probs);
        let pos = obs.assortment.position(j).expect("row index lists only rows containing j");
        let p = probs[pos];
        let y = if obs.choice == pos + 1 { 1.0 } else { 0.0 };
        let x = &obs.features[pos];
        grad.axpy(p - y, x, 1.0);
        hess.ger(p * (1.0 - p), x, x, 1.0);
    }
    (grad, hess)
}

/// Rows of the log in which each server was offered.
pub fn server_rows(log: &ObservationLog, n_servers: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); n_servers];
    for (i, obs) in log.entries().iter().enumerate() {
        for &j in obs.assortment.servers() {
            rows[j].push(i);
        }
    }
    rows
}

/// Block-coordinate damped Newton over the listed server blocks.
///
/// Other blocks stay fixed at their values in `thetas`. Sweeps stop once the
/// gradient stacked over `blocks` has norm `≤ 1e-8`, or after 100 sweeps.
pub fn fit_blocks(
    log: &ObservationLog,
    rows: &[Vec<usize>],
    lambda0: f64,
    mut thetas: Vec<DVector<f64>>,
    blocks: &[usize],
) -> Result<DisjointFit> {
    if !(lambda0 > 0.0) {
        return Err(Error::Domain(format!("regularization {lambda0} must be positive")));
    }
    let stacked_norm = |thetas: &[DVector<f64>]| -> f64 {
        blocks
            .iter()
            .map(|&j| block_gradient_hessian(log, &rows[j], lambda0, thetas, j).0.norm_squared())
            .sum::<f64>()
            .sqrt()
    };
    for sweep in 0..MLE_MAX_ITERATIONS {
        let mut gnorm_sq = 0.0;
        for &j in blocks {
            let (grad, hess) = block_gradient_hessian(log, &rows[j], lambda0, &thetas, j);
            let gn = grad.norm_squared();
            gnorm_sq += gn;
            if gn.sqrt() <= MLE_TOLERANCE * 1e-2 {
                continue;
            }
            let dir = newton_direction(hess, &grad)?;
            let slope = grad.dot(&dir);
            let loss = block_loss(log, &rows[j], lambda0, &thetas, j);
            let quadratic = slope <= 1e-12 * (1.0 + loss.abs());
            let original = thetas[j].clone();
            let mut step = 1.0;
            loop {
                thetas[j] = &original - &dir * step;
                let cand = block_loss(log, &rows[j], lambda0, &thetas, j);
                if quadratic || cand <= loss - 1e-4 * step * slope || step < 1e-10 {
                    break;
                }
                step *= 0.5;
            }
        }
        if gnorm_sq.sqrt() <= MLE_TOLERANCE {
            let gradient_norm = stacked_norm(&thetas);
            if gradient_norm <= MLE_TOLERANCE {
                return Ok(DisjointFit { thetas, sweeps: sweep, gradient_norm, converged: true });
            }
        }
    }
    let gradient_norm = stacked_norm(&thetas);
    Ok(DisjointFit {
        thetas,
        sweeps: MLE_MAX_ITERATIONS,
        gradient_norm,
        converged: gradient_norm <= MLE_TOLERANCE,
    })
}

/// Joint disjoint MLE over every server, from a zero start.
pub fn disjoint_mle_fit(
    log: &ObservationLog,
    lambda0: f64,
    n_servers: usize,
    dim: usize,
) -> Result<DisjointFit> {
    for obs in log.entries() {
        for x in &obs.features {
            check_dim(dim, x.len())?;
        }
        if obs.assortment.servers().iter().any(|&j| j >= n_servers) {
            return Err(Error::Domain("assortment references an unknown server".into()));
        }
    }
    let rows = server_rows(log, n_servers);
    let blocks: Vec<usize> = (0..n_servers).collect();
    fit_blocks(log, &rows, lambda0, vec![DVector::zeros(dim); n_servers], &blocks)
}

/// Disjoint estimator: one design matrix, MLE and confidence radius per server.
#[derive(Debug, Clone)]
pub struct DisjointEstimator {
    servers: Vec<ServerStats>,
    pub lambda0: f64,
    pub kappa: f64,
    k: usize,
    dim: usize,
    log: ObservationLog,
    rows: Vec<Vec<usize>>,
    last_fit: Option<DisjointFit>,
}

impl DisjointEstimator {
    pub fn new(dim: usize, n_servers: usize, k: usize, lambda0: f64, kappa: f64) -> Result<Self> {
        if !(lambda0 > 0.0) || !(kappa >= 0.0) {
            return Err(Error::Config(format!(
                "need lambda0 > 0 and kappa >= 0, got {lambda0} and {kappa}"
            )));
        }
        let stats = ServerStats {
            v: DMatrix::identity(dim, dim) * lambda0,
            theta_hat: DVector::zeros(dim),
            count: 0,
            alpha: confidence_radius(0, dim, k, kappa, lambda0),
        };
        Ok(DisjointEstimator {
            servers: vec![stats; n_servers],
            lambda0,
            kappa,
            k,
            dim,
            log: ObservationLog::new(),
            rows: vec![Vec::new(); n_servers],
            last_fit: None,
        })
    }

    pub fn servers(&self) -> &[ServerStats] {
        &self.servers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log(&self) -> &ObservationLog {
        &self.log
    }

    pub fn last_fit(&self) -> Option<&DisjointFit> {
        self.last_fit.as_ref()
    }

    /// Logs a round with shared context `x` and updates only the offered servers.
    pub fn update(&mut self, x: &DVector<f64>, assortment: Assortment, choice: usize) -> Result<()> {
        check_dim(self.dim, x.len())?;
        let obs = Observation::new(vec![x.clone(); assortment.len()], assortment, choice)?;
        let offered = obs.assortment.servers().to_vec();
        let row = self.log.len();
        self.log.push(obs);
        for &j in &offered {
            self.rows[j].push(row);
        }
        let current: Vec<DVector<f64>> = self.servers.iter().map(|s| s.theta_hat.clone()).collect();
        let fit = fit_blocks(&self.log, &self.rows, self.lambda0, current, &offered)?;
        for &j in &offered {
            let s = &mut self.servers[j];
            s.theta_hat = fit.thetas[j].clone();
            s.v.ger(1.0, x, x, 1.0);
            s.count += 1;
            s.alpha = confidence_radius(s.count, self.dim, self.k, self.kappa, self.lambda0);
        }
        self.last_fit = Some(fit);
        Ok(())
    }

    /// `m` samples per server.
    pub fn samples(&self, m: usize, rng: &mut impl Rng) -> Result<Vec<Vec<DVector<f64>>>> {
        self.servers
            .iter()
            .map(|s| thompson_samples(&s.theta_hat, s.alpha, &s.v, m, rng))
            .collect()
    }
}
