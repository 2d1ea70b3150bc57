//! Slotted simulation loop.
//!
//! Each slot: (1) non-stationary index updates for users with packets,
//! (2) index lookup, (3) policy decision, (4) arrivals, (5) queue update,
//! (6) cost and drop accounting on the pre-transition queue lengths.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{running_average, slot_cost, CostAccumulator, SlotCost};
use crate::error::{IndexError, SimError};
use crate::graph::{ConflictGraph, GraphFile, UserId};
use crate::index::{
    stationary_from_bank, table_cache_key, IndexTableFile, NonStationaryIndex, ResponseBank,
    StationaryIndex,
};
use crate::policy::{
    aloha_select, lyapunov_select, mws_select, whittle_activation, DecisionProvider,
    ExternalRegistry, PolicyConfig, PolicyKind,
};
use crate::rng::{stream, SimRng, Stream};
use crate::traffic::{
    queue_step, ArrivalDist, ArrivalSampler, EnergyFn, QueueState, TxCap, UserModel, UserParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArrivalRegime {
    /// l uniform on [1, M/10]
    Default,
    /// l uniform on [1, M/8]
    Large,
    /// l uniform on [1, M/15]
    Small,
}

impl ArrivalRegime {
    fn divisor(self) -> f64 {
        match self {
            ArrivalRegime::Default => 10.0,
            ArrivalRegime::Large => 8.0,
            ArrivalRegime::Small => 15.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transmission {
    /// Ψ uniform on {1, …, M/5}
    Restricted,
    /// Ψ = ∞ for index policies
    Unrestricted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Regime {
    pub arrival: ArrivalRegime,
    pub transmission: Transmission,
}

impl Regime {
    pub const PAPER_GRID: [Regime; 4] = [
        Regime::new(ArrivalRegime::Large, Transmission::Restricted),
        Regime::new(ArrivalRegime::Large, Transmission::Unrestricted),
        Regime::new(ArrivalRegime::Small, Transmission::Restricted),
        Regime::new(ArrivalRegime::Small, Transmission::Unrestricted),
    ];

    pub const fn new(arrival: ArrivalRegime, transmission: Transmission) -> Self {
        Self {
            arrival,
            transmission,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = match self.arrival {
            ArrivalRegime::Default => "default",
            ArrivalRegime::Large => "large",
            ArrivalRegime::Small => "small",
        };
        let t = match self.transmission {
            Transmission::Restricted => "restricted",
            Transmission::Unrestricted => "unrestricted",
        };
        write!(f, "{a}_{t}")
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || {
            format!(
                "unknown regime {s:?} (expected {{default,large,small}}_{{restricted,unrestricted}})"
            )
        };
        let (a, t) = s.split_once('_').ok_or_else(bad)?;
        let arrival = match a {
            "default" => ArrivalRegime::Default,
            "large" => ArrivalRegime::Large,
            "small" => ArrivalRegime::Small,
            _ => return Err(bad()),
        };
        let transmission = match t {
            "restricted" => Transmission::Restricted,
            "unrestricted" => Transmission::Unrestricted,
            _ => return Err(bad()),
        };
        Ok(Self::new(arrival, transmission))
    }
}

impl TryFrom<String> for Regime {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Regime> for String {
    fn from(r: Regime) -> Self {
        r.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    /// Fresh random geometric placement per seed.
    Geometric { num_users: usize, threshold_d: f64 },
    /// Fixed topology shared by every seed.
    Explicit { graph: GraphFile },
}

impl GraphSpec {
    pub fn num_users(&self) -> usize {
        match self {
            GraphSpec::Geometric { num_users, .. } => *num_users,
            GraphSpec::Explicit { graph } => graph.num_users,
        }
    }

    pub fn realize(&self, seed: u64) -> Result<ConflictGraph, SimError> {
        Ok(match self {
            GraphSpec::Geometric {
                num_users,
                threshold_d,
            } => ConflictGraph::generate_geometric(*num_users, *threshold_d, seed)?,
            GraphSpec::Explicit { graph } => ConflictGraph::from_file(graph)?,
        })
    }
}

/// Per-user replacement of drawn or default parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserOverride {
    pub user: UserId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holding_coeff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergyFn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrivals: Option<ArrivalDist>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_cap: Option<TxCap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_queue: Option<QueueState>,
}

/// A fully resolved experiment: one regime, one policy, a list of seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub regime: Regime,
    pub graph: GraphSpec,
    pub buffer_cap: u32,
    pub holding_coeff: f64,
    pub energy: EnergyFn,
    pub initial_queue: QueueState,
    pub user_overrides: Vec<UserOverride>,
    pub policy: PolicyConfig,
    pub n_slots: u64,
    pub burn_in: u64,
    pub gamma: f64,
    pub n_iter: usize,
    pub seeds: Vec<u64>,
}

impl Scenario {
    /// SHA-256 of the resolved scenario with the seed list left out, so every
    /// seed of one scenario shares the hash.
    pub fn config_hash(&self) -> String {
        let mut s = self.clone();
        s.seeds.clear();
        let bytes = serde_json::to_vec(&s).expect("scenario serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        if self.n_slots < 1 {
            return bad("n_slots must be at least 1".into());
        }
        if self.burn_in >= self.n_slots {
            return bad("burn_in must be smaller than n_slots".into());
        }
        if self.buffer_cap < 1 {
            return bad("buffer_cap must be at least 1".into());
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.n_iter < 1 {
            return bad("n_iter must be at least 1".into());
        }
        if self.initial_queue > self.buffer_cap {
            return bad("initial_queue exceeds buffer_cap".into());
        }
        let n = self.graph.num_users();
        if n == 0 {
            return bad("graph must have at least one user".into());
        }
        for o in &self.user_overrides {
            if o.user >= n {
                return bad(format!("user_overrides: user {} out of range", o.user));
            }
            if o.initial_queue.is_some_and(|q| q > self.buffer_cap) {
                return bad(format!("user_overrides[{}]: initial_queue exceeds buffer_cap", o.user));
            }
        }
        self.policy.validate()?;
        Ok(())
    }
}

/// Topology and per-user parameters drawn for one seed.
#[derive(Clone, Debug)]
pub struct Instance {
    pub graph: ConflictGraph,
    /// Parameters with the restricted (finite) transmission cap.
    pub restricted: Vec<UserParams>,
    pub unrestricted_caps: Vec<TxCap>,
    pub initial: Vec<QueueState>,
    pub transmission: Transmission,
}

impl Instance {
    /// Arrival means and transmission caps come from their own streams, so
    /// they are shared across policies (and the caps across regimes).
    pub fn realize(scenario: &Scenario, seed: u64) -> Result<Self, SimError> {
        scenario.validate()?;
        let graph = scenario.graph.realize(seed)?;
        let n = graph.num_users();
        let m = scenario.buffer_cap;
        let hi_mean = (f64::from(m) / scenario.regime.arrival.divisor()).max(1.0);
        let hi_cap = (m / 5).max(1);
        let mut means = stream(seed, Stream::ArrivalMeans);
        let mut caps = stream(seed, Stream::TxCaps);
        let mut restricted = Vec::with_capacity(n);
        let mut unrestricted_caps = vec![TxCap::Unbounded; n];
        let mut initial = vec![scenario.initial_queue; n];
        for _ in 0..n {
            let u: f64 = means.random();
            let mean = 1.0 + u * (hi_mean - 1.0);
            let cap = caps.random_range(1..=hi_cap);
            restricted.push(UserParams {
                buffer_cap: m,
                tx_cap: TxCap::Limited(cap),
                arrivals: ArrivalDist::Poisson { mean },
                holding_coeff: scenario.holding_coeff,
                energy: scenario.energy,
            });
        }
        for o in &scenario.user_overrides {
            let p = &mut restricted[o.user];
            if let Some(c) = o.holding_coeff {
                p.holding_coeff = c;
            }
            if let Some(e) = o.energy {
                p.energy = e;
            }
            if let Some(a) = &o.arrivals {
                p.arrivals = a.clone();
            }
            if let Some(cap) = o.tx_cap {
                p.tx_cap = cap;
                unrestricted_caps[o.user] = cap;
            }
            if let Some(q) = o.initial_queue {
                initial[o.user] = q;
            }
        }
        for p in &restricted {
            p.validate()?;
        }
        Ok(Self {
            graph,
            restricted,
            unrestricted_caps,
            initial,
            transmission: scenario.regime.transmission,
        })
    }

    /// Parameters a policy runs with: index policies in the unrestricted
    /// regime send their whole queue, everything else uses the restricted cap.
    pub fn params_for(&self, kind: &PolicyKind) -> Vec<UserParams> {
        if kind.is_index_policy() && self.transmission == Transmission::Unrestricted {
            self.restricted
                .iter()
                .zip(&self.unrestricted_caps)
                .map(|(p, &cap)| UserParams {
                    tx_cap: cap,
                    ..p.clone()
                })
                .collect()
        } else {
            self.restricted.clone()
        }
    }
}

/// Shared stationary-table and threshold-response cache, optionally backed
/// by a directory of JSON table files.
///
/// Entries are computed without holding a lock: a rayon worker that blocked
/// on an in-progress entry could otherwise steal the very job it waits on.
/// Two callers racing on one key both compute it; results are deterministic,
/// so whichever lands first is kept.
#[derive(Debug, Default)]
pub struct IndexCache {
    dir: Option<PathBuf>,
    banks: Mutex<HashMap<String, Arc<ResponseBank>>>,
    tables: Mutex<HashMap<String, Arc<StationaryIndex>>>,
}

fn remember<T>(map: &Mutex<HashMap<String, Arc<T>>>, key: String, value: Arc<T>) -> Arc<T> {
    map.lock().unwrap().entry(key).or_insert(value).clone()
}

impl IndexCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            ..Self::default()
        }
    }

    fn bank(&self, models: &[UserModel]) -> Result<Arc<ResponseBank>, IndexError> {
        let params: Vec<_> = models.iter().map(|m| &m.params).collect();
        let key = hex::encode(Sha256::digest(
            serde_json::to_vec(&params).expect("params serialize"),
        ));
        if let Some(b) = self.banks.lock().unwrap().get(&key) {
            return Ok(b.clone());
        }
        let bank = Arc::new(ResponseBank::full(models)?);
        Ok(remember(&self.banks, key, bank))
    }

    pub fn stationary(
        &self,
        config: (crate::index::Variant, f64, usize),
        graph: &ConflictGraph,
        models: &[UserModel],
    ) -> Result<Arc<StationaryIndex>, IndexError> {
        let (variant, gamma, n_iter) = config;
        let key = table_cache_key(graph, models, variant, gamma, n_iter);
        if let Some(t) = self.tables.lock().unwrap().get(&key) {
            return Ok(t.clone());
        }
        let path = self.dir.as_ref().map(|d| d.join(format!("{key}.json")));
        if let Some(p) = &path {
            let cached = fs::read_to_string(p)
                .ok()
                .and_then(|t| serde_json::from_str::<IndexTableFile>(&t).ok())
                .filter(|f| f.key == key)
                .and_then(|f| f.into_index().ok());
            if let Some(idx) = cached {
                return Ok(remember(&self.tables, key, Arc::new(idx)));
            }
        }
        let bank = self.bank(models)?;
        let idx = stationary_from_bank(variant, graph, models, &bank, gamma, n_iter)?;
        if let Some(p) = &path {
            // a failed write only costs a recomputation next time
            let file = IndexTableFile::from_index(&key, &idx);
            if let Ok(text) = serde_json::to_string(&file) {
                let _ = fs::create_dir_all(p.parent().unwrap_or(p));
                let _ = fs::write(p, text);
            }
        }
        Ok(remember(&self.tables, key, Arc::new(idx)))
    }
}

/// Everything a run needs beyond the scenario.
#[derive(Debug, Default)]
pub struct RunContext {
    pub cache: IndexCache,
    pub registry: ExternalRegistry,
    pub trace: bool,
}

pub enum PolicyRuntime {
    NonStationary(NonStationaryIndex),
    Stationary(Arc<StationaryIndex>),
    Aloha(Vec<f64>),
    Mws(PolicyConfig),
    Lyapunov(PolicyConfig),
    External(Box<dyn DecisionProvider>),
}

impl fmt::Debug for PolicyRuntime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PolicyRuntime::NonStationary(_) => "NonStationary",
            PolicyRuntime::Stationary(_) => "Stationary",
            PolicyRuntime::Aloha(_) => "Aloha",
            PolicyRuntime::Mws(_) => "Mws",
            PolicyRuntime::Lyapunov(_) => "Lyapunov",
            PolicyRuntime::External(_) => "External",
        };
        f.write_str(name)
    }
}

impl PolicyRuntime {
    pub fn build(
        config: &PolicyConfig,
        graph: &ConflictGraph,
        models: &[UserModel],
        gamma: f64,
        n_iter: usize,
        ctx: &RunContext,
    ) -> Result<Self, SimError> {
        config.validate()?;
        Ok(match &config.kind {
            PolicyKind::NonStationary(v) => PolicyRuntime::NonStationary(
                NonStationaryIndex::new(*v, gamma, models).map_err(SimError::Precompute)?,
            ),
            PolicyKind::Stationary(v) => PolicyRuntime::Stationary(
                ctx.cache
                    .stationary((*v, gamma, n_iter), graph, models)
                    .map_err(SimError::Precompute)?,
            ),
            PolicyKind::Aloha => PolicyRuntime::Aloha(config.aloha_p.per_user(graph)?),
            PolicyKind::Mws => PolicyRuntime::Mws(config.clone()),
            PolicyKind::Lyapunov => PolicyRuntime::Lyapunov(config.clone()),
            PolicyKind::External(name) => PolicyRuntime::External(ctx.registry.create(name)?),
        })
    }
}

/// What happened in one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotRecord {
    pub slot: u64,
    /// Users charged for transmitting (ALOHA: every attempt).
    pub active: Vec<UserId>,
    pub before: Vec<QueueState>,
    pub after: Vec<QueueState>,
    pub served: Vec<u32>,
    pub dropped: Vec<u32>,
    pub arrived: Vec<u32>,
    pub cost: SlotCost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub avg_cost: f64,
    pub avg_energy: f64,
    pub avg_holding: f64,
    pub avg_drops: f64,
    pub avg_throughput: f64,
    pub n_slots: u64,
    pub counted_slots: u64,
    pub conservation_violations: u64,
    /// SHA-256 over every arrival count, for common-random-number checks.
    pub arrival_digest: String,
}

/// One simulation run in progress.
pub struct Simulation<'a> {
    graph: &'a ConflictGraph,
    models: Vec<UserModel>,
    params: Vec<UserParams>,
    policy: PolicyRuntime,
    states: Vec<QueueState>,
    samplers: Vec<ArrivalSampler>,
    arrival_rngs: Vec<SimRng>,
    policy_rng: SimRng,
    slot: u64,
    acc: CostAccumulator,
    violations: u64,
    digest: Sha256,
}

impl<'a> Simulation<'a> {
    /// Arrival and policy randomness come from separate seeds so either can
    /// be pinned while the other varies.
    pub fn new(
        graph: &'a ConflictGraph,
        models: Vec<UserModel>,
        policy: PolicyRuntime,
        initial: Vec<QueueState>,
        arrival_seed: u64,
        policy_seed: u64,
        burn_in: u64,
    ) -> Result<Self, SimError> {
        let n = graph.num_users();
        if models.len() != n || initial.len() != n {
            return Err(SimError::Scenario(format!(
                "{} users in graph, {} parameter sets, {} initial states",
                n,
                models.len(),
                initial.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| initial[i] > models[i].params.buffer_cap) {
            return Err(SimError::Scenario(format!("user {i}: initial queue above buffer cap")));
        }
        let samplers = models
            .iter()
            .map(|m| ArrivalSampler::new(&m.params.arrivals))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            graph,
            params: models.iter().map(|m| m.params.clone()).collect(),
            models,
            policy,
            states: initial,
            samplers,
            arrival_rngs: (0..n).map(|i| stream(arrival_seed, Stream::Arrivals(i))).collect(),
            policy_rng: stream(policy_seed, Stream::Policy),
            slot: 0,
            acc: CostAccumulator::new(burn_in),
            violations: 0,
            digest: Sha256::new(),
        })
    }

    pub fn states(&self) -> &[QueueState] {
        &self.states
    }

    pub fn policy(&self) -> &PolicyRuntime {
        &self.policy
    }

    fn decide(&mut self) -> Result<(Vec<UserId>, Vec<UserId>), SimError> {
        let n = self.states.len();
        let slot = self.slot;
        let graph = self.graph;
        let active = match &mut self.policy {
            PolicyRuntime::NonStationary(ns) => {
                ns.update(&self.states, graph, &self.models)
                    .map_err(|source| SimError::Index { slot, source })?;
                whittle_activation(ns.lambdas(), &self.states, graph).active
            }
            PolicyRuntime::Stationary(table) => {
                let indices: Vec<f64> = (0..n)
                    .map(|i| table.get(i, self.states[i]).unwrap_or(f64::INFINITY))
                    .collect();
                whittle_activation(&indices, &self.states, graph).active
            }
            PolicyRuntime::Aloha(p) => {
                let o = aloha_select(&self.states, graph, p, &mut self.policy_rng);
                return Ok((o.attempts, o.successes));
            }
            PolicyRuntime::Mws(c) => {
                mws_select(&self.states, &self.params, graph, c.mode, c.mws_weight, c.exact_cap)?
                    .active
            }
            PolicyRuntime::Lyapunov(c) => {
                lyapunov_select(&self.states, &self.params, graph, c.theta, c.mode, c.exact_cap)?
                    .active
            }
            PolicyRuntime::External(provider) => {
                let mut a = provider.decide(slot, &self.states, graph);
                a.sort_unstable();
                a.dedup();
                if a.iter().any(|&i| i >= n) || !graph.is_independent_set(&a) {
                    return Err(crate::error::PolicyError::InvalidExternal(format!(
                        "slot {slot}: {a:?} is not an independent set of valid users"
                    ))
                    .into());
                }
                a.retain(|&i| self.states[i] > 0);
                a
            }
        };
        Ok((active.clone(), active))
    }

    /// Advances one slot.
    pub fn run_slot(&mut self) -> Result<SlotRecord, SimError> {
        let n = self.states.len();
        let (charged, serviced) = self.decide()?;
        let mut charged_mask = vec![false; n];
        for &i in &charged {
            charged_mask[i] = true;
        }
        let mut serviced_mask = vec![false; n];
        for &i in &serviced {
            serviced_mask[i] = true;
        }
        let arrived: Vec<u32> = self
            .samplers
            .iter()
            .zip(self.arrival_rngs.iter_mut())
            .map(|(s, rng)| s.sample(rng))
            .collect();
        for a in &arrived {
            self.digest.update(a.to_le_bytes());
        }
        let before = self.states.clone();
        let mut served = vec![0; n];
        let mut dropped = vec![0; n];
        for i in 0..n {
            let step = queue_step(before[i], serviced_mask[i], arrived[i], &self.params[i]);
            let balance = i64::from(before[i]) - i64::from(step.served) + i64::from(arrived[i])
                - i64::from(step.dropped);
            if balance != i64::from(step.next) || step.next > self.params[i].buffer_cap {
                self.violations += 1;
            }
            served[i] = step.served;
            dropped[i] = step.dropped;
            self.states[i] = step.next;
        }
        let cost = slot_cost(&before, &charged_mask, &self.params);
        self.acc.record(
            &cost,
            dropped.iter().map(|&d| u64::from(d)).sum(),
            served.iter().map(|&s| u64::from(s)).sum(),
        );
        let record = SlotRecord {
            slot: self.slot,
            active: charged,
            before,
            after: self.states.clone(),
            served,
            dropped,
            arrived,
            cost,
        };
        self.slot += 1;
        Ok(record)
    }

    pub fn finish(self) -> Result<Metrics, SimError> {
        let counted = self.acc.counted();
        let avg = |v: f64| running_average(v, counted).map_err(SimError::from);
        Ok(Metrics {
            avg_cost: avg(self.acc.total)?,
            avg_energy: avg(self.acc.energy)?,
            avg_holding: avg(self.acc.holding)?,
            avg_drops: avg(self.acc.drops)?,
            avg_throughput: avg(self.acc.served)?,
            n_slots: self.slot,
            counted_slots: counted,
            conservation_violations: self.violations,
            arrival_digest: hex::encode(self.digest.finalize()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexDiagnostics {
    pub sweep_deltas: Vec<f64>,
    pub non_monotone_states: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub scenario_id: String,
    pub policy: String,
    pub regime: String,
    pub seed: u64,
    pub config_hash: String,
    pub gamma: f64,
    pub n_iter: usize,
    pub index: Option<IndexDiagnostics>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub metadata: RunMetadata,
    pub trace: Option<Vec<SlotRecord>>,
}

fn run_on_instance(
    scenario: &Scenario,
    policy: &PolicyConfig,
    instance: &Instance,
    seed: u64,
    ctx: &RunContext,
) -> Result<RunOutput, SimError> {
    let models = instance
        .params_for(&policy.kind)
        .into_iter()
        .map(UserModel::new)
        .collect::<Result<Vec<_>, _>>()?;
    let runtime = PolicyRuntime::build(
        policy,
        &instance.graph,
        &models,
        scenario.gamma,
        scenario.n_iter,
        ctx,
    )?;
    let index = match &runtime {
        PolicyRuntime::Stationary(t) => Some(IndexDiagnostics {
            sweep_deltas: t.sweep_deltas.clone(),
            non_monotone_states: t.non_monotone_states().len(),
        }),
        _ => None,
    };
    let mut sim = Simulation::new(
        &instance.graph,
        models,
        runtime,
        instance.initial.clone(),
        seed,
        seed,
        scenario.burn_in,
    )?;
    let mut trace = ctx.trace.then(Vec::new);
    for _ in 0..scenario.n_slots {
        let rec = sim.run_slot()?;
        if let Some(t) = trace.as_mut() {
            t.push(rec);
        }
    }
    let scenario_for_hash = Scenario {
        policy: policy.clone(),
        ..scenario.clone()
    };
    Ok(RunOutput {
        metrics: sim.finish()?,
        metadata: RunMetadata {
            scenario_id: scenario.id.clone(),
            policy: policy.kind.to_string(),
            regime: scenario.regime.to_string(),
            seed,
            config_hash: scenario_for_hash.config_hash(),
            gamma: scenario.gamma,
            n_iter: scenario.n_iter,
            index,
        },
        trace,
    })
}

/// Computes the stationary table `run_simulation` would need for
/// `(scenario, seed)` and stores it in the context's cache. No-op for other
/// policies.
pub fn warm_cache(scenario: &Scenario, seed: u64, ctx: &RunContext) -> Result<(), SimError> {
    let PolicyKind::Stationary(variant) = scenario.policy.kind else {
        return Ok(());
    };
    let instance = Instance::realize(scenario, seed)?;
    let models = instance
        .params_for(&scenario.policy.kind)
        .into_iter()
        .map(UserModel::new)
        .collect::<Result<Vec<_>, _>>()?;
    ctx.cache
        .stationary((variant, scenario.gamma, scenario.n_iter), &instance.graph, &models)
        .map_err(SimError::Precompute)?;
    Ok(())
}

/// Runs the scenario's policy for `seed`. Stationary tables are computed (or
/// fetched from the cache) before slot 0.
pub fn run_simulation(scenario: &Scenario, seed: u64, ctx: &RunContext) -> Result<RunOutput, SimError> {
    let instance = Instance::realize(scenario, seed)?;
    run_on_instance(scenario, &scenario.policy, &instance, seed, ctx)
}

/// Runs several policies on one realized instance with common random numbers.
pub fn compare_policies(
    base: &Scenario,
    policies: &[PolicyConfig],
    seed: u64,
    ctx: &RunContext,
) -> Result<Vec<RunOutput>, SimError> {
    if policies.is_empty() {
        return Err(SimError::Scenario("policy list is empty".into()));
    }
    let instance = Instance::realize(base, seed)?;
    let outputs = policies
        .iter()
        .map(|p| run_on_instance(base, p, &instance, seed, ctx))
        .collect::<Result<Vec<_>, _>>()?;
    let digest = &outputs[0].metrics.arrival_digest;
    if outputs.iter().any(|o| &o.metrics.arrival_digest != digest) {
        return Err(SimError::Scenario(
            "arrival streams diverged across policies".into(),
        ));
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{AllPassive, SelectMode};

    fn scenario(kind: PolicyKind) -> Scenario {
        Scenario {
            id: "t".into(),
            regime: "large_restricted".parse().unwrap(),
            graph: GraphSpec::Geometric {
                num_users: 6,
                threshold_d: 0.5,
            },
            buffer_cap: 20,
            holding_coeff: 1.0,
            energy: EnergyFn::default(),
            initial_queue: 0,
            user_overrides: vec![],
            policy: PolicyConfig::new(kind),
            n_slots: 300,
            burn_in: 0,
            gamma: 0.05,
            n_iter: 50,
            seeds: vec![1],
        }
    }

    fn zero_arrivals(m: u32) -> UserModel {
        UserModel::new(UserParams {
            buffer_cap: m,
            tx_cap: TxCap::Unbounded,
            arrivals: ArrivalDist::Finite { probs: vec![1.0] },
            holding_coeff: 1.0,
            energy: EnergyFn::default(),
        })
        .unwrap()
    }

    #[test]
    fn regime_names() {
        for r in Regime::PAPER_GRID {
            assert_eq!(r.to_string().parse::<Regime>().unwrap(), r);
        }
        assert!("huge_restricted".parse::<Regime>().is_err());
        assert!("large".parse::<Regime>().is_err());
    }

    #[test]
    fn empty_system_stays_empty() {
        let g = ConflictGraph::from_edges(3, &[(0, 1)]).unwrap();
        let models = vec![zero_arrivals(4); 3];
        let ctx = RunContext::default();
        let rt = PolicyRuntime::build(
            &PolicyConfig::new("ns_type1".parse().unwrap()),
            &g,
            &models,
            0.05,
            10,
            &ctx,
        )
        .unwrap();
        let mut sim = Simulation::new(&g, models, rt, vec![0; 3], 1, 1, 0).unwrap();
        let rec = sim.run_slot().unwrap();
        assert!(rec.active.is_empty());
        assert_eq!(rec.cost.total, 0.0);
        let m = sim.finish().unwrap();
        assert_eq!((m.avg_cost, m.avg_drops, m.avg_throughput), (0.0, 0.0, 0.0));
    }

    #[test]
    fn isolated_nonempty_user_is_activated() {
        let g = ConflictGraph::from_edges(1, &[]).unwrap();
        let ctx = RunContext::default();
        let live = UserModel::new(UserParams {
            arrivals: ArrivalDist::Poisson { mean: 0.5 },
            ..zero_arrivals(5).params
        })
        .unwrap();
        for kind in ["ns_type1", "ns_type2", "stationary_type1", "stationary_type2"] {
            let cfg = PolicyConfig::new(kind.parse().unwrap());
            let rt = PolicyRuntime::build(&cfg, &g, &[live.clone()], 0.05, 5, &ctx).unwrap();
            let mut sim = Simulation::new(&g, vec![live.clone()], rt, vec![3], 1, 1, 0).unwrap();
            assert_eq!(sim.run_slot().unwrap().active, vec![0], "{kind}");
        }
    }

    #[test]
    fn hand_simulated_passive_run() {
        // M = 2, one arrival per slot, never served: 0 -> 1 -> 2 -> 2
        let g = ConflictGraph::from_edges(1, &[]).unwrap();
        let models = vec![UserModel::new(UserParams {
            buffer_cap: 2,
            tx_cap: TxCap::Unbounded,
            arrivals: ArrivalDist::Finite {
                probs: vec![0.0, 1.0],
            },
            holding_coeff: 1.0,
            energy: EnergyFn::default(),
        })
        .unwrap()];
        let rt = PolicyRuntime::External(Box::new(AllPassive));
        let mut sim = Simulation::new(&g, models, rt, vec![0], 3, 3, 0).unwrap();
        for _ in 0..3 {
            sim.run_slot().unwrap();
        }
        let m = sim.finish().unwrap();
        // holding 0 + 1 + 2 over 3 slots, one drop in slot 2
        assert!((m.avg_cost - 1.0).abs() < 1e-12);
        assert!((m.avg_drops - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.avg_energy, 0.0);
    }

    #[test]
    fn seeded_runs_repeat() {
        let ctx = RunContext {
            trace: true,
            ..RunContext::default()
        };
        for kind in ["ns_type2", "stationary_type1", "aloha", "mws", "lyapunov"] {
            let s = scenario(kind.parse().unwrap());
            let a = run_simulation(&s, 7, &ctx).unwrap();
            let b = run_simulation(&s, 7, &ctx).unwrap();
            assert_eq!(a.trace, b.trace, "{kind}");
            assert_eq!(a.metrics, b.metrics);
            assert_eq!(a.metrics.conservation_violations, 0);
        }
    }

    #[test]
    fn policy_seed_only_moves_aloha() {
        let s = scenario(PolicyKind::Aloha);
        let inst = Instance::realize(&s, 4).unwrap();
        let ctx = RunContext::default();
        let models: Vec<_> = inst
            .params_for(&PolicyKind::Aloha)
            .into_iter()
            .map(|p| UserModel::new(p).unwrap())
            .collect();
        let run = |cfg: &PolicyConfig, policy_seed| {
            let rt = PolicyRuntime::build(cfg, &inst.graph, &models, 0.05, 10, &ctx).unwrap();
            let mut sim =
                Simulation::new(&inst.graph, models.clone(), rt, inst.initial.clone(), 4, policy_seed, 0)
                    .unwrap();
            for _ in 0..500 {
                sim.run_slot().unwrap();
            }
            sim.finish().unwrap()
        };
        let aloha = PolicyConfig::new(PolicyKind::Aloha);
        assert_ne!(run(&aloha, 1), run(&aloha, 2));
        let mws = PolicyConfig {
            mode: SelectMode::Exact,
            ..PolicyConfig::new(PolicyKind::Mws)
        };
        let (a, b) = (run(&mws, 1), run(&mws, 2));
        assert_eq!(a, b);
    }

    #[test]
    fn unrestricted_only_lifts_index_policies() {
        let mut s = scenario(PolicyKind::Mws);
        s.regime = "small_unrestricted".parse().unwrap();
        let inst = Instance::realize(&s, 2).unwrap();
        assert!(inst
            .params_for(&PolicyKind::Mws)
            .iter()
            .all(|p| matches!(p.tx_cap, TxCap::Limited(c) if (1..=4).contains(&c))));
        assert!(inst
            .params_for(&"stationary_type1".parse().unwrap())
            .iter()
            .all(|p| p.tx_cap == TxCap::Unbounded));
        for p in &inst.restricted {
            let l = p.arrivals.mean();
            assert!((1.0..=20.0 / 15.0).contains(&l));
        }
    }

    #[test]
    fn common_random_numbers_across_policies() {
        let s = scenario(PolicyKind::Aloha);
        let policies: Vec<_> = ["aloha", "mws", "ns_type1", "external:passive"]
            .iter()
            .map(|k| PolicyConfig::new(k.parse().unwrap()))
            .collect();
        let out = compare_policies(&s, &policies, 9, &RunContext::default()).unwrap();
        let d = &out[0].metrics.arrival_digest;
        assert!(out.iter().all(|o| &o.metrics.arrival_digest == d));
        let passive = &out[3].metrics;
        assert_eq!(passive.avg_energy, 0.0);
        assert!(passive.avg_holding >= out[2].metrics.avg_holding);
    }

    #[test]
    fn invalid_scenarios() {
        let mut s = scenario(PolicyKind::Mws);
        s.n_slots = 0;
        assert!(s.validate().is_err());
        let mut s = scenario(PolicyKind::Mws);
        s.user_overrides.push(UserOverride {
            user: 99,
            ..Default::default()
        });
        assert!(s.validate().is_err());
        let s = scenario("external:nobody".parse().unwrap());
        assert!(run_simulation(&s, 1, &RunContext::default()).is_err());
    }

    #[test]
    fn config_hash_ignores_seeds() {
        let a = scenario(PolicyKind::Mws);
        let mut b = a.clone();
        b.seeds = vec![5, 6];
        assert_eq!(a.config_hash(), b.config_hash());
        b.gamma = 0.1;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
