//! Discrete-time queueing environment.
//!
//! One round: the policy picks a pending job (or the dummy job when the queue
//! is empty) and an assortment, the user's choice is drawn with the shared
//! departure uniform, the job leaves on acceptance, and a new job joins with
//! probability `λ`. Contexts of arriving jobs are drawn uniformly from a
//! finite pool generated up front.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mnl::{self, Assortment, ChoiceDistribution};
use crate::policy::{PolicyDecision, Query};
use crate::rng::{stream_rng, RoundRandomness, Stream};

/// Rejection sampling gives up after this many consecutive failures.
pub const MAX_CONSECUTIVE_REJECTIONS: usize = 1_000_000;

/// Ground-truth choice model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrueModel {
    /// Disjoint linear utilities `xᵀθ_j`, one parameter row per server.
    Linear { theta: Vec<Vec<f64>> },
    /// Per-context departure probabilities, one row per pool entry, mapped to
    /// choices through their odds.
    Tabular { departure: Vec<Vec<f64>> },
}

/// A generated problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnlInstance {
    /// Context dimension.
    pub d: usize,
    pub n_servers: usize,
    /// Assortment size.
    pub k: usize,
    /// Arrival probability per round.
    pub arrival_rate: f64,
    /// Slackness margin enforced on every pool context.
    pub slack: f64,
    pub seed: u64,
    /// Admissible contexts; jobs reference them by index.
    pub pool: Vec<Vec<f64>>,
    pub model: TrueModel,
}

impl MnlInstance {
    /// Checks shapes and ranges; called after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.n_servers {
            return Err(Error::Config(format!(
                "assortment size {} must be in 1..={}",
                self.k, self.n_servers
            )));
        }
        if !(self.arrival_rate > 0.0 && self.arrival_rate < 1.0) {
            return Err(Error::Config(format!(
                "arrival rate {} must lie in (0, 1)",
                self.arrival_rate
            )));
        }
        if self.pool.is_empty() {
            return Err(Error::Config("empty context pool".into()));
        }
        for x in &self.pool {
            check_dim(self.d, x.len())?;
        }
        match &self.model {
            TrueModel::Linear { theta } => {
                check_dim(self.n_servers, theta.len())?;
                for row in theta {
                    check_dim(self.d, row.len())?;
                }
            }
            TrueModel::Tabular { departure } => {
                check_dim(self.pool.len(), departure.len())?;
                for row in departure {
                    check_dim(self.n_servers, row.len())?;
                    if row.iter().any(|u| !(*u > 0.0 && *u < 1.0)) {
                        return Err(Error::Config(
                            "tabular departure probabilities must lie in (0, 1)".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn context(&self, index: usize) -> &[f64] {
        &self.pool[index]
    }

    pub fn assortments(&self) -> Vec<Assortment> {
        mnl::enumerate_assortments(self.n_servers, self.k)
            .expect("validated instance has 1 <= k <= n")
    }

    /// True choice distribution for pool context `index` under `assortment`.
    pub fn choice_distribution(
        &self,
        index: usize,
        assortment: &Assortment,
    ) -> Result<ChoiceDistribution> {
        let x = self
            .pool
            .get(index)
            .ok_or_else(|| Error::Domain(format!("pool index {index} out of range")))?;
        match &self.model {
            TrueModel::Linear { theta } => {
                let u = mnl::disjoint_utilities(x, assortment, theta)?;
                mnl::choice_probs(u.as_slice())
            }
            TrueModel::Tabular { departure } => {
                mnl::odds_choice_probs(&departure[index], assortment)
            }
        }
    }

    pub fn departure_rate(&self, index: usize, assortment: &Assortment) -> Result<f64> {
        Ok(self.choice_distribution(index, assortment)?.departure_rate())
    }

    /// Best true departure rate of context `index` over every assortment.
    pub fn best_rate(&self, index: usize) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for s in self.assortments() {
            best = best.max(self.departure_rate(index, &s)?);
        }
        Ok(best)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let inst: MnlInstance = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        inst.validate()?;
        Ok(inst)
    }
}

/// Precomputed true departure rates for every (pool context, assortment).
///
/// The pool is finite, so the optimal policy and the regret bookkeeping read
/// from this table instead of re-evaluating the model each round.
#[derive(Debug, Clone)]
pub struct RateTable {
    assortments: Vec<Assortment>,
    // rates[context * |C| + s]
    rates: Vec<f64>,
    best: Vec<(usize, f64)>,
}

impl RateTable {
    pub fn new(instance: &MnlInstance) -> Result<Self> {
        let assortments = instance.assortments();
        let mut rates = Vec::with_capacity(instance.pool.len() * assortments.len());
        let mut best = Vec::with_capacity(instance.pool.len());
        for c in 0..instance.pool.len() {
            let mut arg = (0, f64::NEG_INFINITY);
            for (si, s) in assortments.iter().enumerate() {
                let r = instance.departure_rate(c, s)?;
                if r > arg.1 {
                    arg = (si, r);
                }
                rates.push(r);
            }
            best.push(arg);
        }
        Ok(RateTable { assortments, rates, best })
    }

    pub fn assortments(&self) -> &[Assortment] {
        &self.assortments
    }

    pub fn rate(&self, context: usize, assortment_index: usize) -> f64 {
        self.rates[context * self.assortments.len() + assortment_index]
    }

    /// Lexicographically first optimal assortment index and its rate.
    pub fn best(&self, context: usize) -> (usize, f64) {
        self.best[context]
    }

    pub fn index_of(&self, assortment: &Assortment) -> Option<usize> {
        self.assortments.binary_search(assortment).ok()
    }
}

/// Parameters for [`generate_instance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceParams {
    pub d: usize,
    pub n_servers: usize,
    pub k: usize,
    pub arrival_rate: f64,
    pub slack: f64,
    pub pool_size: usize,
    /// Scale each θ_j to unit norm when it exceeds one.
    #[serde(default)]
    pub normalize_theta: bool,
}

impl InstanceParams {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_servers == 0 || self.pool_size == 0 {
            return Err(Error::Config("d, servers and pool size must be positive".into()));
        }
        if self.k == 0 || self.k > self.n_servers {
            return Err(Error::Config(format!(
                "assortment size {} must be in 1..={}",
                self.k, self.n_servers
            )));
        }
        validate_rates(self.arrival_rate, self.slack)
    }
}

pub(crate) fn validate_rates(arrival_rate: f64, slack: f64) -> Result<()> {
    if !(arrival_rate > 0.0 && arrival_rate < 1.0) {
        return Err(Error::Config(format!(
            "arrival rate {arrival_rate} must lie in (0, 1)"
        )));
    }
    if !(slack > 0.0) {
        return Err(Error::Config(format!("slack {slack} must be positive")));
    }
    if arrival_rate + slack >= 1.0 {
        return Err(Error::Config(format!(
            "arrival rate + slack = {} must be below 1",
            arrival_rate + slack
        )));
    }
    Ok(())
}

fn scale_to_unit_ball(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Draws a synthetic linear instance.
///
/// Parameters θ_j are i.i.d. `Unif(-1, 1)^d`. Contexts are drawn from
/// `Unif(-1, 1)^d`, divided by `max(1, ‖x‖)`, and kept only if some
/// assortment reaches `λ + ε`.
pub fn generate_instance(params: &InstanceParams, seed: u64) -> Result<MnlInstance> {
    params.validate()?;
    let mut rng = stream_rng(seed, Stream::Instance);
    let theta: Vec<Vec<f64>> = (0..params.n_servers)
        .map(|_| {
            let mut row: Vec<f64> = (0..params.d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if params.normalize_theta {
                scale_to_unit_ball(&mut row);
            }
            row
        })
        .collect();
    let assortments = mnl::enumerate_assortments(params.n_servers, params.k)?;
    let target = params.arrival_rate + params.slack;
    let mut pool = Vec::with_capacity(params.pool_size);
    let mut failures = 0usize;
    while pool.len() < params.pool_size {
        let mut x: Vec<f64> = (0..params.d).map(|_| rng.random_range(-1.0..1.0)).collect();
        scale_to_unit_ball(&mut x);
        let mut best = f64::NEG_INFINITY;
        for s in &assortments {
            let u = mnl::disjoint_utilities(&x, s, &theta)?;
            best = best.max(mnl::departure_rate(u.as_slice())?);
        }
        if best >= target {
            pool.push(x);
            failures = 0;
        } else {
            failures += 1;
            if failures > MAX_CONSECUTIVE_REJECTIONS {
                return Err(Error::Generation(format!(
                    "no context reached departure rate {target} after {MAX_CONSECUTIVE_REJECTIONS} \
                     consecutive draws (seed {seed})"
                )));
            }
        }
    }
    let inst = MnlInstance {
        d: params.d,
        n_servers: params.n_servers,
        k: params.k,
        arrival_rate: params.arrival_rate,
        slack: params.slack,
        seed,
        pool,
        model: TrueModel::Linear { theta },
    };
    inst.validate()?;
    Ok(inst)
}

/// Parameters for the synthetic tabular-utility environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularParams {
    /// Raw embedding dimension.
    pub d_in: usize,
    pub n_servers: usize,
    pub k: usize,
    pub arrival_rate: f64,
    pub slack: f64,
    pub pool_size: usize,
    /// Number of utility clusters the items are drawn around.
    pub clusters: usize,
    /// Cost weight in `perf - ρ·cost`.
    pub rho: f64,
    /// Standard deviation of per-item noise around the cluster prototypes.
    pub noise: f64,
}

impl Default for TabularParams {
    fn default() -> Self {
        TabularParams {
            d_in: 16,
            n_servers: 3,
            k: 1,
            arrival_rate: 0.7,
            slack: 0.03,
            pool_size: 200,
            clusters: 3,
            rho: 0.2,
            noise: 0.3,
        }
    }
}

/// One synthetic item: a raw embedding and its departure probability per server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularItem {
    pub embedding: Vec<f64>,
    pub departure: Vec<f64>,
    pub cluster: usize,
}

/// Cluster prototypes of the tabular environment: a unit embedding center and
/// per-server performance and cost profiles for each cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPrototypes {
    params: TabularParams,
    centers: Vec<Vec<f64>>,
    perf: Vec<Vec<f64>>,
    cost: Vec<Vec<f64>>,
}

impl TabularPrototypes {
    /// Draws one prototype per cluster. Cluster `c` favours server `c mod N`.
    pub fn draw(params: &TabularParams, rng: &mut impl Rng) -> Result<Self> {
        if params.clusters == 0 || params.d_in == 0 || params.n_servers < 2 {
            return Err(Error::Config(
                "tabular environment needs clusters >= 1, d_in >= 1 and at least two servers"
                    .into(),
            ));
        }
        let mut out = TabularPrototypes {
            params: params.clone(),
            centers: Vec::new(),
            perf: Vec::new(),
            cost: Vec::new(),
        };
        for c in 0..params.clusters {
            let mut center: Vec<f64> =
                (0..params.d_in).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = center.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            center.iter_mut().for_each(|x| *x /= norm);
            let best = c % params.n_servers;
            let perf = (0..params.n_servers)
                .map(|j| {
                    if j == best {
                        rng.random_range(0.85..1.0)
                    } else {
                        rng.random_range(0.2..0.6)
                    }
                })
                .collect();
            let cost = (0..params.n_servers).map(|_| rng.random_range(0.0..1.0)).collect();
            out.centers.push(center);
            out.perf.push(perf);
            out.cost.push(cost);
        }
        Ok(out)
    }

    pub fn params(&self) -> &TabularParams {
        &self.params
    }

    /// Draws from the instance seed; the same seed always yields the same prototypes.
    pub fn for_seed(params: &TabularParams, seed: u64) -> Result<Self> {
        Self::draw(params, &mut stream_rng(seed, Stream::Instance))
    }

    /// One item of cluster `cluster`: a perturbed embedding and departure vector.
    pub fn sample(&self, cluster: usize, rng: &mut impl Rng) -> Result<TabularItem> {
        let p = &self.params;
        let spread = p.noise / (p.d_in as f64).sqrt();
        let mut emb: Vec<f64> = self.centers[cluster]
            .iter()
            .map(|v| v + spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        scale_to_unit_ball(&mut emb);
        let perf: Vec<f64> = self.perf[cluster]
            .iter()
            .map(|v| (v + 0.05 * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
            .collect();
        let (departure, _) = mnl::utility_from_perf_cost(
            &perf,
            &self.cost[cluster],
            p.rho,
            mnl::DEFAULT_R_LO,
            mnl::DEFAULT_R_HI,
        )?;
        Ok(TabularItem { embedding: emb, departure, cluster })
    }

    /// Best departure rate of each noise-free prototype over all size-`k` assortments.
    pub fn best_rates(&self) -> Result<Vec<f64>> {
        let p = &self.params;
        let assortments = mnl::enumerate_assortments(p.n_servers, p.k)?;
        (0..self.centers.len())
            .map(|c| {
                let (departure, _) = mnl::utility_from_perf_cost(
                    &self.perf[c],
                    &self.cost[c],
                    p.rho,
                    mnl::DEFAULT_R_LO,
                    mnl::DEFAULT_R_HI,
                )?;
                let mut best = f64::NEG_INFINITY;
                for s in &assortments {
                    best = best.max(mnl::odds_choice_probs(&departure, s)?.departure_rate());
                }
                Ok(best)
            })
            .collect()
    }

    /// `count` items cycling through the clusters.
    pub fn items(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<TabularItem>> {
        (0..count).map(|i| self.sample(i % self.centers.len(), rng)).collect()
    }
}

/// Offline items sharing the prototypes of the instance generated from `seed`,
/// drawn from a stream the instance never touches.
pub fn offline_tabular_items(
    params: &TabularParams,
    seed: u64,
    count: usize,
) -> Result<Vec<TabularItem>> {
    let protos = TabularPrototypes::for_seed(params, seed)?;
    protos.items(count, &mut stream_rng(seed, Stream::Contrastive))
}

/// Draws a tabular-utility instance whose pool satisfies the slackness bound.
/// Prototypes and pool both come from `seed`.
pub fn generate_tabular_instance(params: &TabularParams, seed: u64) -> Result<MnlInstance> {
    tabular_instance_from(&TabularPrototypes::for_seed(params, seed)?, seed)
}

/// Draws a pool from fixed prototypes, rejecting items whose best departure
/// rate falls short of `λ + ε`. Items cycle through the clusters.
pub fn tabular_instance_from(protos: &TabularPrototypes, seed: u64) -> Result<MnlInstance> {
    let params = &protos.params;
    validate_rates(params.arrival_rate, params.slack)?;
    if params.k == 0 || params.k > params.n_servers || params.pool_size == 0 {
        return Err(Error::Config("invalid tabular instance dimensions".into()));
    }
    let mut rng = stream_rng(seed, Stream::Pool);
    let assortments = mnl::enumerate_assortments(params.n_servers, params.k)?;
    let target = params.arrival_rate + params.slack;
    let mut pool = Vec::with_capacity(params.pool_size);
    let mut departure = Vec::with_capacity(params.pool_size);
    let mut failures = 0usize;
    let mut cluster = 0;
    while pool.len() < params.pool_size {
        let item = protos.sample(cluster, &mut rng)?;
        cluster = (cluster + 1) % params.clusters;
        let mut best = f64::NEG_INFINITY;
        for s in &assortments {
            best = best.max(mnl::odds_choice_probs(&item.departure, s)?.departure_rate());
        }
        if best >= target {
            pool.push(item.embedding);
            departure.push(item.departure);
            failures = 0;
        } else {
            failures += 1;
            if failures > MAX_CONSECUTIVE_REJECTIONS {
                return Err(Error::Generation(format!(
                    "no tabular item reached departure rate {target}"
                )));
            }
        }
    }
    let inst = MnlInstance {
        d: params.d_in,
        n_servers: params.n_servers,
        k: params.k,
        arrival_rate: params.arrival_rate,
        slack: params.slack,
        seed,
        pool,
        model: TrueModel::Tabular { departure },
    };
    inst.validate()?;
    Ok(inst)
}

/// A queued job. `context` indexes the instance pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Job {
    pub id: u64,
    pub context: usize,
    /// Round in which the job arrived.
    pub arrived: u64,
}

/// Pending jobs in arrival order plus the round counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueueState {
    pending: Vec<Job>,
    /// Rounds completed so far; the next round is `t + 1`.
    pub t: u64,
    next_id: u64,
}

/// What happened in one call to [`QueueState::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// The job that was served, `None` for a dummy round.
    pub served: Option<Job>,
    /// 0 for the outside option, otherwise the 1-based position in the assortment.
    pub choice: usize,
    pub departed: bool,
    pub arrived: bool,
}

impl StepOutcome {
    /// Dummy-round feedback is never used for learning.
    pub fn learnable(&self) -> bool {
        self.served.is_some()
    }
}

impl QueueState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn pending(&self) -> &[Job] {
        &self.pending
    }

    /// Most recently arrived job still in the queue.
    pub fn newest(&self) -> Option<&Job> {
        self.pending.last()
    }

    /// Appends a job directly; used to set up queue states in tests and tools.
    pub fn push(&mut self, context: usize) -> Job {
        let job = Job { id: self.next_id, context, arrived: self.t };
        self.next_id += 1;
        self.pending.push(job);
        job
    }

    /// Advances one round: serve, sample the choice, remove on departure, admit an arrival.
    pub fn step(
        &mut self,
        decision: &PolicyDecision,
        rand: &RoundRandomness,
        instance: &MnlInstance,
    ) -> Result<StepOutcome> {
        let (served, dist) = match decision.query {
            Query::Pending(i) => {
                let job = *self.pending.get(i).ok_or_else(|| {
                    Error::Contract(format!(
                        "decision references pending slot {i} but the queue holds {}",
                        self.pending.len()
                    ))
                })?;
                (Some((i, job)), instance.choice_distribution(job.context, &decision.assortment)?)
            }
            Query::Dummy => {
                if !self.pending.is_empty() {
                    return Err(Error::Contract(
                        "dummy job selected while the queue is non-empty".into(),
                    ));
                }
                // the dummy context is all zeros, so every offered utility is 0
                (None, mnl::choice_probs(&vec![0.0; decision.assortment.len()])?)
            }
        };
        let choice = mnl::sample_choice(&dist, rand.u_depart);
        let departed = served.is_some() && choice != 0;
        if departed {
            let (i, _) = served.unwrap();
            self.pending.remove(i);
        }
        self.t += 1;
        let arrived = rand.a_draw < instance.arrival_rate;
        if arrived {
            let job = Job {
                id: self.next_id,
                context: rand.arrival_context_index,
                arrived: self.t,
            };
            self.next_id += 1;
            self.pending.push(job);
        }
        Ok(StepOutcome { served: served.map(|(_, j)| j), choice, departed, arrived })
    }
}
