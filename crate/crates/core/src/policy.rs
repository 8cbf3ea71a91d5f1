//! Decision rules: ACQB, CQB-ε, and the optimal, random, Q-UCB and Q-ThS baselines.
//!
//! Every policy answers the same question each round: which pending job to
//! serve and which assortment to offer. Ties in every argmax go to the lowest
//! pending index, then to the lexicographically smallest assortment.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::contrastive::ProjectionHead;
use crate::env::{MnlInstance, QueueState, RateTable, StepOutcome};
use crate::error::{Error, Result};
use crate::estimator::{
    optimistic_utility, sample_count, DisjointEstimator, Observation, SharedEstimator,
};
use crate::mnl::{self, Assortment};
use crate::rng::policy_rng;

/// Which job a decision serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Query {
    /// Index into [`QueueState::pending`].
    Pending(usize),
    /// The all-zero placeholder job served when the queue is empty.
    Dummy,
}

/// A (job, assortment) choice for one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub query: Query,
    pub assortment: Assortment,
    /// Whether the decision came from forced exploration.
    pub explored: bool,
}

/// What a policy may look at when deciding.
#[derive(Debug, Clone, Copy)]
pub struct RoundView<'a> {
    /// 1-based index of the round being decided.
    pub round: u64,
    pub queue: &'a QueueState,
    pub instance: &'a MnlInstance,
    /// This round's exploration uniform.
    pub e_draw: f64,
}

/// What a policy learns after the round resolves.
#[derive(Debug, Clone, Copy)]
pub struct Feedback<'a> {
    pub round: u64,
    pub decision: &'a PolicyDecision,
    pub outcome: &'a StepOutcome,
    pub instance: &'a MnlInstance,
    pub e_draw: f64,
}

pub trait Policy {
    fn name(&self) -> &'static str;
    fn decide(&mut self, view: &RoundView<'_>) -> Result<PolicyDecision>;
    fn observe(&mut self, feedback: &Feedback<'_>) -> Result<()>;
}

/// Policy names accepted in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Acqb,
    AcqbDisjoint,
    Optimal,
    Random,
    Qucb,
    Qths,
    CqbEps,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::Acqb,
        PolicyKind::AcqbDisjoint,
        PolicyKind::Optimal,
        PolicyKind::Random,
        PolicyKind::Qucb,
        PolicyKind::Qths,
        PolicyKind::CqbEps,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Acqb => "acqb",
            PolicyKind::AcqbDisjoint => "acqb_disjoint",
            PolicyKind::Optimal => "optimal",
            PolicyKind::Random => "random",
            PolicyKind::Qucb => "qucb",
            PolicyKind::Qths => "qths",
            PolicyKind::CqbEps => "cqb_eps",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = PolicyKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::Config(format!("unknown policy {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// How the Thompson-sampling learners parameterize utilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// One parameter vector over Kronecker-embedded features.
    Shared,
    /// One parameter vector per server.
    #[default]
    Disjoint,
}

/// Tunables shared by the learning policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    /// Exploration constant in `η(t) = min{1, c₁(t+1)^{-1/2}}`.
    pub c1: f64,
    /// Ridge regularization.
    pub lambda0: f64,
    /// Scale of the confidence radius.
    pub kappa: f64,
    /// Horizon known to CQB-ε; the other policies ignore it.
    pub horizon: Option<u64>,
    /// Pure-exploration fraction of the horizon for CQB-ε.
    pub tau_fraction: f64,
    /// Parameterization used by CQB-ε.
    pub cqb_estimator: EstimatorMode,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            c1: 0.5,
            lambda0: 1.0,
            kappa: 1.0,
            horizon: None,
            tau_fraction: 0.1,
            cqb_estimator: EstimatorMode::Disjoint,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c1.is_finite()) {
            return Err(Error::Config(format!("c1 must be positive, got {}", self.c1)));
        }
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return Err(Error::Config(format!("lambda0 must be positive, got {}", self.lambda0)));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be non-negative, got {}", self.kappa)));
        }
        if !(0.0..=1.0).contains(&self.tau_fraction) {
            return Err(Error::Config(format!(
                "tau_fraction must lie in [0, 1], got {}",
                self.tau_fraction
            )));
        }
        Ok(())
    }
}

/// `η(t) = min{1, c₁(t+1)^{-1/2}}`.
pub fn eta(t: u64, c1: f64) -> f64 {
    (c1 / ((t + 1) as f64).sqrt()).min(1.0)
}

/// Maps raw pool contexts to the features the learner sees.
#[derive(Debug, Clone, Default)]
pub enum FeatureMap {
    #[default]
    Identity,
    Head(ProjectionHead),
}

impl FeatureMap {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            FeatureMap::Identity => Ok(x.to_vec()),
            FeatureMap::Head(head) => head.forward(x),
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            FeatureMap::Identity => input_dim,
            FeatureMap::Head(head) => head.d_out(),
        }
    }
}

/// When the Thompson learners force exploration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExplorationSchedule {
    /// Coin `E(t) ~ Bern(η(t))` drawn at the end of round `t`, used in round `t+1`.
    Anytime { c1: f64 },
    /// Always explore through round `tau`, then with probability `prob`.
    Fixed { tau: u64, prob: f64 },
}

impl ExplorationSchedule {
    /// Coin carried into the next round after round `round` ends.
    pub fn coin_after(&self, round: u64, e_draw: f64) -> bool {
        match *self {
            ExplorationSchedule::Anytime { c1 } => e_draw < eta(round, c1),
            ExplorationSchedule::Fixed { .. } => false,
        }
    }

    /// Whether round `round` explores, given last round's arrival and coin.
    pub fn explores(&self, round: u64, last_arrival: bool, coin: bool, e_draw: f64) -> bool {
        if !last_arrival {
            return false;
        }
        match *self {
            ExplorationSchedule::Anytime { .. } => coin,
            ExplorationSchedule::Fixed { tau, prob } => round <= tau || e_draw < prob,
        }
    }
}

/// Thompson draws from the current posterior.
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    /// Draws of the stacked parameter.
    Shared(Vec<DVector<f64>>),
    /// Per-server draws.
    Disjoint(Vec<Vec<DVector<f64>>>),
}

#[derive(Debug, Clone)]
enum Learner {
    Shared(SharedEstimator),
    Disjoint(DisjointEstimator),
}

/// Shared machinery of ACQB and CQB-ε.
#[derive(Debug, Clone)]
struct ThompsonCore {
    learner: Learner,
    schedule: ExplorationSchedule,
    feature_map: FeatureMap,
    assortments: Vec<Assortment>,
    n_servers: usize,
    m: usize,
    combo: usize,
    coin: bool,
    last_arrival: bool,
    // per pool index: mapped context, and for the shared learner its Kronecker lifts
    contexts: Vec<Option<DVector<f64>>>,
    lifted: Vec<Option<Vec<DVector<f64>>>>,
    last_samples: Option<Samples>,
    rng: ChaCha8Rng,
}

impl ThompsonCore {
    fn new(
        instance: &MnlInstance,
        mode: EstimatorMode,
        params: &PolicyParams,
        schedule: ExplorationSchedule,
        feature_map: FeatureMap,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        let d = feature_map.output_dim(instance.d);
        let (n, k) = (instance.n_servers, instance.k);
        let learner = match mode {
            EstimatorMode::Shared => {
                Learner::Shared(SharedEstimator::new(d * n, k, params.lambda0, params.kappa)?)
            }
            EstimatorMode::Disjoint => Learner::Disjoint(DisjointEstimator::new(
                d,
                n,
                k,
                params.lambda0,
                params.kappa,
            )?),
        };
        Ok(ThompsonCore {
            learner,
            schedule,
            feature_map,
            assortments: instance.assortments(),
            n_servers: n,
            m: sample_count(k),
            combo: 0,
            coin: false,
            last_arrival: false,
            contexts: vec![None; instance.pool.len()],
            lifted: vec![None; instance.pool.len()],
            last_samples: None,
            rng: policy_rng(seed),
        })
    }

    fn context(&mut self, instance: &MnlInstance, index: usize) -> Result<DVector<f64>> {
        if index >= self.contexts.len() {
            self.contexts.resize(index + 1, None);
            self.lifted.resize(index + 1, None);
        }
        if self.contexts[index].is_none() {
            let z = self.feature_map.apply(instance.context(index))?;
            self.contexts[index] = Some(DVector::from_vec(z));
        }
        Ok(self.contexts[index].clone().expect("filled above"))
    }

    fn lifted(&mut self, instance: &MnlInstance, index: usize) -> Result<&[DVector<f64>]> {
        let z = self.context(instance, index)?;
        if self.lifted[index].is_none() {
            let n = self.n_servers;
            let lifts = (0..n)
                .map(|j| DVector::from_vec(mnl::kronecker_feature(z.as_slice(), j, n)))
                .collect();
            self.lifted[index] = Some(lifts);
        }
        Ok(self.lifted[index].as_deref().expect("filled above"))
    }

    fn draw_samples(&mut self) -> Result<Samples> {
        match &self.learner {
            Learner::Shared(est) => Ok(Samples::Shared(est.samples(self.m, &mut self.rng)?)),
            Learner::Disjoint(est) => Ok(Samples::Disjoint(est.samples(self.m, &mut self.rng)?)),
        }
    }

    // ũ_j for every server
    fn optimistic_utilities(
        &mut self,
        instance: &MnlInstance,
        index: usize,
        samples: &Samples,
    ) -> Result<Vec<f64>> {
        match samples {
            Samples::Shared(s) => {
                let lifts = self.lifted(instance, index)?;
                Ok(lifts.iter().map(|x| optimistic_utility(x, s)).collect())
            }
            Samples::Disjoint(per_server) => {
                let z = self.context(instance, index)?;
                Ok(per_server.iter().map(|s| optimistic_utility(&z, s)).collect())
            }
        }
    }

    fn decide(&mut self, view: &RoundView<'_>) -> Result<PolicyDecision> {
        let queue = view.queue;
        if self.schedule.explores(view.round, self.last_arrival, self.coin, view.e_draw) {
            if let Some(_) = queue.newest() {
                let assortment = self.assortments[self.combo].clone();
                self.combo = (self.combo + 1) % self.assortments.len();
                return Ok(PolicyDecision {
                    query: Query::Pending(queue.len() - 1),
                    assortment,
                    explored: true,
                });
            }
        }
        if queue.is_empty() {
            // the zero context makes every optimistic rate equal
            return Ok(PolicyDecision {
                query: Query::Dummy,
                assortment: self.assortments[0].clone(),
                explored: false,
            });
        }
        let samples = self.draw_samples()?;
        let mut best: Option<(usize, usize, f64)> = None;
        let mut cache: Vec<(usize, Vec<f64>)> = Vec::new();
        for (i, job) in queue.pending().iter().enumerate() {
            let u = match cache.iter().find(|(c, _)| *c == job.context) {
                Some((_, u)) => u.clone(),
                None => {
                    let u = self.optimistic_utilities(view.instance, job.context, &samples)?;
                    cache.push((job.context, u.clone()));
                    u
                }
            };
            for (si, s) in self.assortments.iter().enumerate() {
                let offered: Vec<f64> = s.servers().iter().map(|&j| u[j]).collect();
                let r = mnl::departure_rate(&offered)?;
                if best.is_none_or(|(_, _, b)| r > b) {
                    best = Some((i, si, r));
                }
            }
        }
        self.last_samples = Some(samples);
        let (i, si, _) = best.expect("queue is non-empty");
        Ok(PolicyDecision {
            query: Query::Pending(i),
            assortment: self.assortments[si].clone(),
            explored: false,
        })
    }

    fn observe(&mut self, fb: &Feedback<'_>) -> Result<()> {
        if let Some(job) = fb.outcome.served {
            let s = fb.decision.assortment.clone();
            match &self.learner {
                Learner::Shared(_) => {
                    let lifts = self.lifted(fb.instance, job.context)?;
                    let features = s.servers().iter().map(|&j| lifts[j].clone()).collect();
                    let obs = Observation::new(features, s, fb.outcome.choice)?;
                    if let Learner::Shared(est) = &mut self.learner {
                        est.update(obs)?;
                    }
                }
                Learner::Disjoint(_) => {
                    let z = self.context(fb.instance, job.context)?;
                    if let Learner::Disjoint(est) = &mut self.learner {
                        est.update(&z, s, fb.outcome.choice)?;
                    }
                }
            }
        }
        self.last_arrival = fb.outcome.arrived;
        self.coin = self.schedule.coin_after(fb.round, fb.e_draw);
        Ok(())
    }
}

/// ACQB: η(t)-exploration on arrivals, otherwise the Thompson-sampling optimistic rule.
///
/// Needs neither the horizon nor the slackness.
#[derive(Debug, Clone)]
pub struct Acqb {
    core: ThompsonCore,
    mode: EstimatorMode,
}

impl Acqb {
    pub fn new(
        instance: &MnlInstance,
        mode: EstimatorMode,
        params: &PolicyParams,
        feature_map: FeatureMap,
        seed: u64,
    ) -> Result<Self> {
        let schedule = ExplorationSchedule::Anytime { c1: params.c1 };
        Ok(Acqb {
            core: ThompsonCore::new(instance, mode, params, schedule, feature_map, seed)?,
            mode,
        })
    }

    pub fn mode(&self) -> EstimatorMode {
        self.mode
    }

    /// Samples behind the most recent exploitation decision.
    pub fn last_samples(&self) -> Option<&Samples> {
        self.core.last_samples.as_ref()
    }

    /// Round-robin position of the next exploration assortment.
    pub fn combo_counter(&self) -> usize {
        self.core.combo
    }

    pub fn shared_estimator(&self) -> Option<&SharedEstimator> {
        match &self.core.learner {
            Learner::Shared(e) => Some(e),
            Learner::Disjoint(_) => None,
        }
    }

    pub fn disjoint_estimator(&self) -> Option<&DisjointEstimator> {
        match &self.core.learner {
            Learner::Disjoint(e) => Some(e),
            Learner::Shared(_) => None,
        }
    }
}

impl Policy for Acqb {
    fn name(&self) -> &'static str {
        match self.mode {
            EstimatorMode::Shared => PolicyKind::Acqb.as_str(),
            EstimatorMode::Disjoint => PolicyKind::AcqbDisjoint.as_str(),
        }
    }

    fn decide(&mut self, view: &RoundView<'_>) -> Result<PolicyDecision> {
        self.core.decide(view)
    }

    fn observe(&mut self, feedback: &Feedback<'_>) -> Result<()> {
        self.core.observe(feedback)
    }
}

/// CQB-ε: pure exploration on arrivals through `τ = ⌊fraction·T⌋`, then with
/// probability `T^{-1/2}`; otherwise the same optimistic rule as ACQB.
#[derive(Debug, Clone)]
pub struct CqbEps {
    core: ThompsonCore,
    tau: u64,
}

impl CqbEps {
    pub fn new(
        instance: &MnlInstance,
        params: &PolicyParams,
        horizon: u64,
        feature_map: FeatureMap,
        seed: u64,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("CQB-eps needs a positive horizon".into()));
        }
        let tau = (params.tau_fraction * horizon as f64).floor() as u64;
        let schedule = ExplorationSchedule::Fixed { tau, prob: 1.0 / (horizon as f64).sqrt() };
        Ok(CqbEps {
            core: ThompsonCore::new(
                instance,
                params.cqb_estimator,
                params,
                schedule,
                feature_map,
                seed,
            )?,
            tau,
        })
    }

    pub fn tau(&self) -> u64 {
        self.tau
    }
}

impl Policy for CqbEps {
    fn name(&self) -> &'static str {
        PolicyKind::CqbEps.as_str()
    }

    fn decide(&mut self, view: &RoundView<'_>) -> Result<PolicyDecision> {
        self.core.decide(view)
    }

    fn observe(&mut self, feedback: &Feedback<'_>) -> Result<()> {
        self.core.observe(feedback)
    }
}

/// Serves the (job, assortment) pair with the highest true departure rate.
pub fn optimal_decision(queue: &QueueState, table: &RateTable) -> PolicyDecision {
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, job) in queue.pending().iter().enumerate() {
        let (si, r) = table.best(job.context);
        if best.is_none_or(|(_, _, b)| r > b) {
            best = Some((i, si, r));
        }
    }
    match best {
        Some((i, si, _)) => PolicyDecision {
            query: Query::Pending(i),
            assortment: table.assortments()[si].clone(),
            explored: false,
        },
        None => PolicyDecision {
            query: Query::Dummy,
            assortment: table.assortments()[0].clone(),
            explored: false,
        },
    }
}

/// Oracle policy with access to the true model.
#[derive(Debug, Clone)]
pub struct Optimal {
    table: RateTable,
}

impl Optimal {
    pub fn new(instance: &MnlInstance) -> Result<Self> {
        Ok(Optimal { table: RateTable::new(instance)? })
    }

    pub fn from_table(table: RateTable) -> Self {
        Optimal { table }
    }
}

impl Policy for Optimal {
    fn name(&self) -> &'static str {
        PolicyKind::Optimal.as_str()
    }

    fn decide(&mut self, view: &RoundView<'_>) -> Result<PolicyDecision> {
        Ok(optimal_decision(view.queue, &self.table))
    }

    fn observe(&mut self, _: &Feedback<'_>) -> Result<()> {
        Ok(())
    }
}

/// Uniform job, uniform assortment.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    assortments: Vec<Assortment>,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(instance: &MnlInstance, seed: u64) -> Self {
        RandomPolicy { assortments: instance.assortments(), rng: policy_rng(seed) }
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> &'static str {
        PolicyKind::Random.as_str()
    }

    fn decide(&mut self, view: &RoundView<'_>) -> Result<PolicyDecision> {
        let query = if view.queue.is_empty() {
            Query::Dummy
        } else {
            Query::Pending(self.rng.random_range(0..view.queue.len()))
        };
        let si = self.rng.random_range(0..self.assortments.len());
        Ok(PolicyDecision { query, assortment: self.assortments[si].clone(), explored: false })
    }

    fn observe(&mut self, _: &Feedback<'_>) -> Result<()> {
        Ok(())
    }
}

/// Per-server departure counts for the context-free K = 1 baselines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArmStats {
    pub plays: Vec<u64>,
    pub departures: Vec<u64>,
}

impl ArmStats {
    pub fn new(n: usize) -> Self {
        ArmStats { plays: vec![0; n], departures: vec![0; n] }
    }

    pub fn mean(&self, arm: usize) -> f64 {
        if self.plays[arm] == 0 {
            0.0
        } else {
            self.departures[arm] as f64 / self.plays[arm] as f64
        }
    }
}

/// Exploration probability `min{1, 3N ln²t / t}` of Q-UCB and Q-ThS; 1 for `t ≤ 1`.
pub fn queue_bandit_exploration(t: u64, n: usize) -> f64 {
    if t <= 1 {
        return 1.0;
    }
    let tf = t as f64;
    (3.0 * n as f64 * tf.ln().powi(2) / tf).min(1.0)
}

/// `μ̂ + √(ln²t / (2T_S))`, infinite for an unplayed arm.
pub fn ucb_index(mean: f64, plays: u64, t: u64) -> f64 {
    if plays == 0 {
        return f64::INFINITY;
    }
    let l = (t as f64).ln();
    mean + (l * l / (2.0 * plays as f64)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ArmRule {
    Ucb,
    Thompson,
}

#[derive(Debug, Clone)]
struct QueueBandit {
    rule: ArmRule,
    stats: ArmStats,
    assortments: Vec<Assortment>,
    rng: ChaCha8Rng,
}

impl QueueBandit {
    fn new(instance: &MnlInstance, rule: ArmRule, seed: u64) -> Result<Self> {
        if instance.k != 1 {
            return Err(Error::Config(format!(
                "Q-UCB and Q-ThS need assortment size 1, got {}",
                instance.k
            )));
        }
        Ok(QueueBandit {
            rule,
            stats: ArmStats::new(instance.n_servers),
            assortments: instance.assortments(),
            rng: policy_rng(seed),
        })
    }

    fn decide(&mut self, view: &RoundView<'_>) -> Result<PolicyDecision> {
        let n = self.assortments.len();
        let explored = view.e_draw < queue_bandit_exploration(view.round, n);
        let arm = if explored {
            self.rng.random_range(0..n)
        } else {
            let mut best = (0, f64::NEG_INFINITY);
            for a in 0..n {
                let score = match self.rule {
                    ArmRule::Ucb => ucb_index(self.stats.mean(a), self.stats.plays[a], view.round),
                    ArmRule::Thompson => {
                        let s = self.stats.departures[a] as f64;
                        let f = (self.stats.plays[a] - self.stats.departures[a]) as f64;
                        Beta::new(s + 1.0, f + 1.0)
                            .map_err(|e| Error::Numerical(e.to_string()))?
                            .sample(&mut self.rng)
                    }
                };
                if score > best.1 {
                    best = (a, score);
                }
            }
            best.0
        };
        // pending jobs are kept in arrival order, so slot 0 is the oldest
        let query = if view.queue.is_empty() { Query::Dummy } else { Query::Pending(0) };
        Ok(PolicyDecision { query, assortment: self.assortments[arm].clone(), explored })
    }

    fn observe(&mut self, fb: &Feedback<'_>) {
        if fb.outcome.learnable() {
            let arm = fb.decision.assortment.servers()[0];
            self.stats.plays[arm] += 1;
            self.stats.departures[arm] += u64::from(fb.outcome.departed);
        }
    }
}

/// Q-UCB: FIFO service, decaying forced exploration, UCB arm choice. K = 1 only.
#[derive(Debug, Clone)]
pub struct QUcb(QueueBandit);

impl QUcb {
    pub fn new(instance: &MnlInstance, seed: u64) -> Result<Self> {
        QueueBandit::new(instance, ArmRule::Ucb, seed).map(QUcb)
    }

    pub fn stats(&self) -> &ArmStats {
        &self.0.stats
    }
}

impl Policy for QUcb {
    fn name(&self) -> &'static str {
        PolicyKind::Qucb.as_str()
    }

    fn decide(&mut self, view: &RoundView<'_>) -> Result<PolicyDecision> {
        self.0.decide(view)
    }

    fn observe(&mut self, feedback: &Feedback<'_>) -> Result<()> {
        self.0.observe(feedback);
        Ok(())
    }
}

/// Q-ThS: as Q-UCB but exploits with Beta posterior draws. K = 1 only.
#[derive(Debug, Clone)]
pub struct QThs(QueueBandit);

impl QThs {
    pub fn new(instance: &MnlInstance, seed: u64) -> Result<Self> {
        QueueBandit::new(instance, ArmRule::Thompson, seed).map(QThs)
    }

    pub fn stats(&self) -> &ArmStats {
        &self.0.stats
    }
}

impl Policy for QThs {
    fn name(&self) -> &'static str {
        PolicyKind::Qths.as_str()
    }

    fn decide(&mut self, view: &RoundView<'_>) -> Result<PolicyDecision> {
        self.0.decide(view)
    }

    fn observe(&mut self, feedback: &Feedback<'_>) -> Result<()> {
        self.0.observe(feedback);
        Ok(())
    }
}

/// Builds a policy by kind. `params.horizon` is required for CQB-ε.
pub fn build_policy(
    kind: PolicyKind,
    instance: &MnlInstance,
    params: &PolicyParams,
    feature_map: FeatureMap,
    seed: u64,
) -> Result<Box<dyn Policy + Send>> {
    Ok(match kind {
        PolicyKind::Acqb => {
            Box::new(Acqb::new(instance, EstimatorMode::Shared, params, feature_map, seed)?)
        }
        PolicyKind::AcqbDisjoint => {
            Box::new(Acqb::new(instance, EstimatorMode::Disjoint, params, feature_map, seed)?)
        }
        PolicyKind::Optimal => Box::new(Optimal::new(instance)?),
        PolicyKind::Random => Box::new(RandomPolicy::new(instance, seed)),
        PolicyKind::Qucb => Box::new(QUcb::new(instance, seed)?),
        PolicyKind::Qths => Box::new(QThs::new(instance, seed)?),
        PolicyKind::CqbEps => {
            let horizon = params
                .horizon
                .ok_or_else(|| Error::Config("cqb_eps requires a horizon".into()))?;
            Box::new(CqbEps::new(instance, params, horizon, feature_map, seed)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_instance, InstanceParams, TrueModel};
    use crate::estimator::optimistic_rate;
    use crate::rng::RunStreams;
    use approx::assert_abs_diff_eq;

    fn instance(n: usize, k: usize) -> MnlInstance {
        generate_instance(
            &InstanceParams {
                d: 3,
                n_servers: n,
                k,
                arrival_rate: 0.6,
                slack: 0.02,
                pool_size: 20,
                normalize_theta: false,
            },
            5,
        )
        .unwrap()
    }

    fn view<'a>(round: u64, queue: &'a QueueState, inst: &'a MnlInstance, e: f64) -> RoundView<'a> {
        RoundView { round, queue, instance: inst, e_draw: e }
    }

    // Runs `policy` alone for `rounds` rounds, calling `audit` after each decision.
    fn drive(
        policy: &mut dyn Policy,
        inst: &MnlInstance,
        rounds: u64,
        seed: u64,
        mut audit: impl FnMut(&dyn Policy, &QueueState, &PolicyDecision),
    ) -> Vec<PolicyDecision> {
        let mut streams = RunStreams::new(seed, inst.pool.len());
        let mut q = QueueState::new();
        let mut out = Vec::new();
        for round in 1..=rounds {
            let r = streams.next_round();
            let dec = policy.decide(&view(round, &q, inst, r.e_draw)).unwrap();
            audit(&*policy, &q, &dec);
            let outcome = q.step(&dec, &r, inst).unwrap();
            policy
                .observe(&Feedback {
                    round,
                    decision: &dec,
                    outcome: &outcome,
                    instance: inst,
                    e_draw: r.e_draw,
                })
                .unwrap();
            out.push(dec);
        }
        out
    }

    #[test]
    fn eta_values() {
        assert_eq!(eta(0, 1.0), 1.0);
        assert_eq!(eta(3, 1.0), 0.5);
        assert_eq!(eta(15, 2.0), 0.5);
        for t in 0..1000 {
            let e = eta(t, 0.7);
            assert!(e > 0.0 && e <= 1.0);
        }
    }

    #[test]
    fn policy_names_round_trip() {
        for kind in PolicyKind::ALL {
            assert_eq!(kind.as_str().parse::<PolicyKind>().unwrap(), kind);
        }
        assert!(matches!("ucb".parse::<PolicyKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn exploration_rounds_use_round_robin() {
        let inst = instance(3, 2);
        let mut p = Acqb::new(&inst, EstimatorMode::Shared, &PolicyParams::default(), FeatureMap::Identity, 1)
            .unwrap();
        let mut q = QueueState::new();
        q.push(0);
        q.push(1);
        let names: Vec<String> = (0..4)
            .map(|_| {
                p.core.last_arrival = true;
                p.core.coin = true;
                let d = p.decide(&view(1, &q, &inst, 0.9)).unwrap();
                assert!(d.explored);
                assert_eq!(d.query, Query::Pending(1));
                d.assortment.to_string()
            })
            .collect();
        assert_eq!(names, ["{1,2}", "{1,3}", "{2,3}", "{1,2}"]);
    }

    #[test]
    fn exploration_frequency_matches_schedule() {
        // Monte Carlo over the environment streams: round t explores iff
        // A(t-1) = 1 and E(t-1) = 1, so its probability is λ·η(t-1).
        let schedule = ExplorationSchedule::Anytime { c1: 1.0 };
        let lambda = 0.6;
        let mut streams = RunStreams::new(99, 10);
        let (mut arrival, mut coin) = (false, false);
        let (mut hits, mut expected, mut var) = (0.0, 0.0, 0.0);
        let rounds = 100_000u64;
        for t in 1..=rounds {
            let r = streams.next_round();
            if schedule.explores(t, arrival, coin, r.e_draw) {
                hits += 1.0;
            }
            let p = if t == 1 { 0.0 } else { lambda * eta(t - 1, 1.0) };
            expected += p;
            var += p * (1.0 - p);
            arrival = r.a_draw < lambda;
            coin = schedule.coin_after(t, r.e_draw);
        }
        assert!((hits - expected).abs() <= 3.0 * var.sqrt(), "{hits} vs {expected}");
    }

    #[test]
    fn round_robin_is_balanced() {
        let inst = instance(4, 2);
        let mut p = Acqb::new(&inst, EstimatorMode::Disjoint, &PolicyParams { c1: 50.0, ..Default::default() }, FeatureMap::Identity, 3)
            .unwrap();
        let decisions = drive(&mut p, &inst, 400, 3, |_, _, _| {});
        let explored: Vec<_> = decisions.iter().filter(|d| d.explored).collect();
        let combos = inst.assortments();
        let full = explored.len() / combos.len() * combos.len();
        for s in &combos {
            let count = explored[..full].iter().filter(|d| &d.assortment == s).count();
            assert_eq!(count, full / combos.len());
        }
    }

    #[test]
    fn exploitation_attains_the_optimistic_max() {
        for mode in [EstimatorMode::Shared, EstimatorMode::Disjoint] {
            let inst = instance(3, 2);
            let mut p =
                Acqb::new(&inst, mode, &PolicyParams::default(), FeatureMap::Identity, 8).unwrap();
            let mut audited = 0;
            // exhaustive recomputation from the samples behind each decision
            let mut streams = RunStreams::new(8, inst.pool.len());
            let mut q = QueueState::new();
            for round in 1..=300 {
                let r = streams.next_round();
                let dec = p.decide(&view(round, &q, &inst, r.e_draw)).unwrap();
                if !dec.explored && dec.query != Query::Dummy {
                    audited += 1;
                    let samples = p.last_samples().unwrap();
                    let mut best = (0, 0, f64::NEG_INFINITY);
                    for (i, job) in q.pending().iter().enumerate() {
                        for (si, s) in inst.assortments().iter().enumerate() {
                            let x = inst.context(job.context);
                            let r = match samples {
                                Samples::Shared(sm) => {
                                    let feats: Vec<DVector<f64>> = (0..3)
                                        .map(|j| DVector::from_vec(mnl::kronecker_feature(x, j, 3)))
                                        .collect();
                                    optimistic_rate(&feats, s, sm).unwrap()
                                }
                                Samples::Disjoint(sm) => crate::estimator::optimistic_rate_disjoint(
                                    &DVector::from_column_slice(x),
                                    s,
                                    sm,
                                )
                                .unwrap(),
                            };
                            if r > best.2 {
                                best = (i, si, r);
                            }
                        }
                    }
                    assert_eq!(dec.query, Query::Pending(best.0));
                    assert_eq!(dec.assortment, inst.assortments()[best.1]);
                }
                let outcome = q.step(&dec, &r, &inst).unwrap();
                p.observe(&Feedback {
                    round,
                    decision: &dec,
                    outcome: &outcome,
                    instance: &inst,
                    e_draw: r.e_draw,
                })
                .unwrap();
            }
            assert!(audited > 100);
        }
    }

    #[test]
    fn dummy_round_leaves_estimator_unchanged() {
        let inst = instance(3, 1);
        let mut p =
            Acqb::new(&inst, EstimatorMode::Shared, &PolicyParams::default(), FeatureMap::Identity, 2)
                .unwrap();
        let q = QueueState::new();
        let dec = p.decide(&view(1, &q, &inst, 0.5)).unwrap();
        assert_eq!(dec.query, Query::Dummy);
        let outcome = StepOutcome { served: None, choice: 1, departed: false, arrived: false };
        let before = p.shared_estimator().unwrap().clone();
        p.observe(&Feedback { round: 1, decision: &dec, outcome: &outcome, instance: &inst, e_draw: 0.1 })
            .unwrap();
        let after = p.shared_estimator().unwrap();
        assert_eq!(before.v, after.v);
        assert_eq!(before.theta_hat, after.theta_hat);
        assert_eq!(after.count(), 0);
        // the coin is still refreshed: η(1) = 1/√2 > 0.1
        assert!(p.core.coin);
    }

    #[test]
    fn disjoint_update_only_touches_offered_servers() {
        let inst = instance(4, 2);
        let mut p =
            Acqb::new(&inst, EstimatorMode::Disjoint, &PolicyParams::default(), FeatureMap::Identity, 4)
                .unwrap();
        let mut prev: Option<Vec<crate::estimator::ServerStats>> = None;
        let mut streams = RunStreams::new(4, inst.pool.len());
        let mut q = QueueState::new();
        for round in 1..=200 {
            let r = streams.next_round();
            let dec = p.decide(&view(round, &q, &inst, r.e_draw)).unwrap();
            let outcome = q.step(&dec, &r, &inst).unwrap();
            p.observe(&Feedback { round, decision: &dec, outcome: &outcome, instance: &inst, e_draw: r.e_draw })
                .unwrap();
            let now = p.disjoint_estimator().unwrap().servers().to_vec();
            if let Some(prev) = prev {
                for j in 0..4 {
                    if !outcome.learnable() || !dec.assortment.contains(j) {
                        assert_eq!(prev[j], now[j]);
                    }
                }
            }
            prev = Some(now);
        }
    }

    #[test]
    fn optimal_picks_best_pair_with_tie_rule() {
        let inst = MnlInstance {
            d: 1,
            n_servers: 2,
            k: 1,
            arrival_rate: 0.5,
            slack: 0.01,
            seed: 0,
            pool: vec![vec![1.0], vec![0.5], vec![1.0]],
            model: TrueModel::Linear { theta: vec![vec![-1.0], vec![2.0]] },
        };
        let table = RateTable::new(&inst).unwrap();
        let mut q = QueueState::new();
        assert_eq!(optimal_decision(&q, &table).query, Query::Dummy);
        q.push(1);
        q.push(0);
        q.push(2);
        let d = optimal_decision(&q, &table);
        // contexts 0 and 2 tie; the lower pending slot wins, on server 2
        assert_eq!(d.query, Query::Pending(1));
        assert_eq!(d.assortment.to_string(), "{2}");
    }

    #[test]
    fn optimal_agrees_with_exhaustive_scan() {
        let inst = instance(4, 2);
        let table = RateTable::new(&inst).unwrap();
        let mut rng = policy_rng(17);
        for _ in 0..200 {
            let mut q = QueueState::new();
            for _ in 0..rng.random_range(1..8) {
                q.push(rng.random_range(0..inst.pool.len()));
            }
            let d = optimal_decision(&q, &table);
            let mut best = (0, 0, f64::NEG_INFINITY);
            for (i, job) in q.pending().iter().enumerate() {
                for (si, s) in inst.assortments().iter().enumerate() {
                    let r = inst.departure_rate(job.context, s).unwrap();
                    if r > best.2 {
                        best = (i, si, r);
                    }
                }
            }
            assert_eq!(d.query, Query::Pending(best.0));
            assert_eq!(d.assortment, inst.assortments()[best.1]);
        }
    }

    #[test]
    fn random_policy_is_uniform() {
        let inst = instance(4, 2);
        let mut p = RandomPolicy::new(&inst, 12);
        let mut q = QueueState::new();
        for c in 0..3 {
            q.push(c);
        }
        let combos = inst.assortments();
        let mut counts = vec![0.0; combos.len() * 3];
        let draws = 100_000;
        for _ in 0..draws {
            let d = p.decide(&view(1, &q, &inst, 0.0)).unwrap();
            let Query::Pending(i) = d.query else { panic!() };
            let si = combos.iter().position(|s| *s == d.assortment).unwrap();
            counts[i * combos.len() + si] += 1.0;
        }
        let expected = draws as f64 / counts.len() as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 17 degrees of freedom; 99.9% quantile is 40.8
        assert!(chi2 < 40.8, "chi2 {chi2}");
        let empty = QueueState::new();
        assert_eq!(p.decide(&view(1, &empty, &inst, 0.0)).unwrap().query, Query::Dummy);
        let full = instance(3, 3);
        let mut p = RandomPolicy::new(&full, 1);
        for _ in 0..20 {
            assert_eq!(p.decide(&view(1, &q, &full, 0.0)).unwrap().assortment.to_string(), "{1,2,3}");
        }
    }

    #[test]
    fn queue_bandit_formulas() {
        assert_eq!(queue_bandit_exploration(1, 5), 1.0);
        assert_eq!(queue_bandit_exploration(0, 5), 1.0);
        assert!(queue_bandit_exploration(100_000, 5) < 1.0);
        assert_abs_diff_eq!(ucb_index(0.5, 10, 100), 1.529_747_358_382_472_2, epsilon = 1e-12);
        assert_eq!(ucb_index(0.9, 0, 50), f64::INFINITY);
    }

    #[test]
    fn queue_bandits_need_k_one() {
        let inst = instance(3, 2);
        assert!(matches!(QUcb::new(&inst, 0), Err(Error::Config(_))));
        assert!(matches!(QThs::new(&inst, 0), Err(Error::Config(_))));
    }

    #[test]
    fn queue_bandits_serve_fifo_and_try_unplayed_arms() {
        let inst = instance(3, 1);
        let mut p = QUcb::new(&inst, 1).unwrap();
        p.0.stats.plays = vec![5, 0, 5];
        p.0.stats.departures = vec![5, 0, 5];
        let mut q = QueueState::new();
        q.push(3);
        q.push(1);
        let d = p.decide(&view(1000, &q, &inst, 0.999_999)).unwrap();
        assert!(!d.explored);
        assert_eq!(d.query, Query::Pending(0));
        assert_eq!(d.assortment.to_string(), "{2}");

        let mut th = QThs::new(&inst, 2).unwrap();
        for round in 1..200 {
            let d = th.decide(&view(round, &q, &inst, 0.5)).unwrap();
            assert_eq!(d.query, Query::Pending(0));
        }
    }

    #[test]
    fn beta_posterior_mean() {
        let mut rng = policy_rng(3);
        let (s, f) = (7.0, 3.0);
        let beta = Beta::new(s + 1.0, f + 1.0).unwrap();
        let n = 200_000;
        let mean = (0..n).map(|_| beta.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - (s + 1.0) / (s + f + 2.0)).abs() < 3e-3);
    }

    #[test]
    fn qths_concentrates_on_the_better_arm() {
        // two arms with departure 0.8 and 0.5 for every context
        let inst = MnlInstance {
            d: 1,
            n_servers: 2,
            k: 1,
            arrival_rate: 0.5,
            slack: 0.05,
            seed: 0,
            pool: vec![vec![1.0]],
            model: TrueModel::Tabular { departure: vec![vec![0.8, 0.5]] },
        };
        let mut p = QThs::new(&inst, 21).unwrap();
        let decisions = drive(&mut p, &inst, 2000, 21, |_, _, _| {});
        let last: Vec<_> = decisions[1500..].iter().filter(|d| d.query != Query::Dummy).collect();
        let best = last.iter().filter(|d| d.assortment.servers()[0] == 0).count();
        assert!(best as f64 >= 0.8 * last.len() as f64, "{best} of {}", last.len());
    }

    #[test]
    fn cqb_eps_schedule() {
        let inst = instance(3, 1);
        let p = CqbEps::new(&inst, &PolicyParams::default(), 1000, FeatureMap::Identity, 0).unwrap();
        assert_eq!(p.tau(), 100);
        let s = p.core.schedule;
        for t in 1..=100 {
            assert!(s.explores(t, true, false, 0.99));
            assert!(!s.explores(t, false, false, 0.0));
        }
        // after τ the per-round probability is T^{-1/2}
        let mut streams = RunStreams::new(5, 3);
        let rounds = 100_000;
        let lambda = 0.6;
        let mut hits = 0.0;
        let mut arrival = false;
        for _ in 0..rounds {
            let r = streams.next_round();
            if s.explores(500, arrival, false, r.e_draw) {
                hits += 1.0;
            }
            arrival = r.a_draw < lambda;
        }
        let pr = lambda / 1000f64.sqrt();
        let sd = (rounds as f64 * pr * (1.0 - pr)).sqrt();
        assert!((hits - rounds as f64 * pr).abs() <= 3.0 * sd);
        assert!(build_policy(PolicyKind::CqbEps, &inst, &PolicyParams::default(), FeatureMap::Identity, 0).is_err());
    }

    #[test]
    fn decisions_are_deterministic() {
        let inst = instance(3, 1);
        let params = PolicyParams { horizon: Some(200), ..Default::default() };
        for kind in PolicyKind::ALL {
            let run = || {
                let mut p = build_policy(kind, &inst, &params, FeatureMap::Identity, 6).unwrap();
                drive(p.as_mut(), &inst, 200, 6, |_, _, _| {})
            };
            assert_eq!(run(), run(), "{kind}");
        }
    }
}
