//! Per-slot activation rules.
//!
//! The index rule activates, round by round, every undecided user whose index
//! is no larger than those of its undecided neighbors and silences those
//! neighbors. Baselines: slotted ALOHA (random access with collisions),
//! max-weight scheduling and a drift-plus-penalty rule, the last two choosing
//! an independent set greedily or exactly.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::PolicyError;
use crate::graph::{ConflictGraph, UserId};
use crate::index::Variant;
use crate::traffic::{service_amount, QueueState, UserParams};

pub const DEFAULT_EXACT_CAP: usize = 40;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicyKind {
    NonStationary(Variant),
    Stationary(Variant),
    Aloha,
    Mws,
    Lyapunov,
    External(String),
}

impl PolicyKind {
    /// Whittle-index policies get the regime's transmission cap; baselines
    /// always run with the restricted cap.
    pub fn is_index_policy(&self) -> bool {
        matches!(self, PolicyKind::NonStationary(_) | PolicyKind::Stationary(_))
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::NonStationary(Variant::Type1) => f.write_str("ns_type1"),
            PolicyKind::NonStationary(Variant::Type2) => f.write_str("ns_type2"),
            PolicyKind::Stationary(Variant::Type1) => f.write_str("stationary_type1"),
            PolicyKind::Stationary(Variant::Type2) => f.write_str("stationary_type2"),
            PolicyKind::Aloha => f.write_str("aloha"),
            PolicyKind::Mws => f.write_str("mws"),
            PolicyKind::Lyapunov => f.write_str("lyapunov"),
            PolicyKind::External(name) => write!(f, "external:{name}"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ns_type1" => PolicyKind::NonStationary(Variant::Type1),
            "ns_type2" => PolicyKind::NonStationary(Variant::Type2),
            "stationary_type1" => PolicyKind::Stationary(Variant::Type1),
            "stationary_type2" => PolicyKind::Stationary(Variant::Type2),
            "aloha" => PolicyKind::Aloha,
            "mws" => PolicyKind::Mws,
            "lyapunov" => PolicyKind::Lyapunov,
            other => match other.strip_prefix("external:") {
                Some(name) if !name.is_empty() => PolicyKind::External(name.to_string()),
                _ => {
                    return Err(format!(
                        "unknown policy {other:?} (expected ns_type1, ns_type2, \
                         stationary_type1, stationary_type2, aloha, mws, lyapunov or external:NAME)"
                    ))
                }
            },
        })
    }
}

impl TryFrom<String> for PolicyKind {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PolicyKind> for String {
    fn from(k: PolicyKind) -> Self {
        k.to_string()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    #[default]
    Greedy,
    Exact,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwsWeight {
    /// w = X
    #[default]
    Queue,
    /// w = X · min(X, Ψ)
    QueueTimesService,
}

/// ALOHA attempt probability: `"auto"` is 1 / (|N(i)| + 1) per user.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlohaP {
    #[default]
    #[serde(with = "auto_tag")]
    Auto,
    Fixed(f64),
}

mod auto_tag {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(D::Error::custom(format!("expected \"auto\" or a number, got {s:?}")))
        }
    }
}

impl AlohaP {
    pub fn per_user(&self, graph: &ConflictGraph) -> Result<Vec<f64>, PolicyError> {
        match *self {
            AlohaP::Auto => Ok((0..graph.num_users())
                .map(|i| 1.0 / (graph.adj(i).len() as f64 + 1.0))
                .collect()),
            AlohaP::Fixed(p) => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(PolicyError::BadProbability(p));
                }
                Ok(vec![p; graph.num_users()])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub aloha_p: AlohaP,
    pub theta: f64,
    pub mode: SelectMode,
    pub mws_weight: MwsWeight,
    pub exact_cap: usize,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            aloha_p: AlohaP::Auto,
            theta: 200.0,
            mode: SelectMode::Greedy,
            mws_weight: MwsWeight::Queue,
            exact_cap: DEFAULT_EXACT_CAP,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if let AlohaP::Fixed(p) = self.aloha_p {
            if !(0.0..=1.0).contains(&p) {
                return Err(PolicyError::BadProbability(p));
            }
        }
        if !(self.theta >= 0.0) || !self.theta.is_finite() {
            return Err(PolicyError::BadTheta(self.theta));
        }
        Ok(())
    }
}

/// Users transmitting in a slot, ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PolicyDecision {
    pub active: Vec<UserId>,
}

fn index_key(indices: &[f64], i: UserId, j: UserId) -> Ordering {
    indices[i].total_cmp(&indices[j]).then(i.cmp(&j))
}

/// Index-driven activation; also returns the number of rounds used.
pub fn whittle_activation_rounds(
    indices: &[f64],
    states: &[QueueState],
    graph: &ConflictGraph,
) -> (PolicyDecision, usize) {
    #[derive(Clone, Copy, PartialEq)]
    enum Status {
        Undecided,
        Active,
        Passive,
    }
    let n = graph.num_users();
    assert_eq!(indices.len(), n);
    assert_eq!(states.len(), n);
    let mut status: Vec<Status> = states
        .iter()
        .map(|&x| if x == 0 { Status::Passive } else { Status::Undecided })
        .collect();
    let mut rounds = 0;
    while status.contains(&Status::Undecided) {
        rounds += 1;
        let winners: Vec<UserId> = (0..n)
            .filter(|&i| {
                status[i] == Status::Undecided
                    && graph.adj(i).iter().all(|&j| {
                        status[j] != Status::Undecided
                            || index_key(indices, i, j) == Ordering::Less
                    })
            })
            .collect();
        debug_assert!(!winners.is_empty());
        for &i in &winners {
            status[i] = Status::Active;
        }
        for &i in &winners {
            for &j in graph.adj(i) {
                if status[j] == Status::Undecided {
                    status[j] = Status::Passive;
                }
            }
        }
    }
    let active = (0..n).filter(|&i| status[i] == Status::Active).collect();
    (PolicyDecision { active }, rounds)
}

pub fn whittle_activation(
    indices: &[f64],
    states: &[QueueState],
    graph: &ConflictGraph,
) -> PolicyDecision {
    whittle_activation_rounds(indices, states, graph).0
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AlohaOutcome {
    pub attempts: Vec<UserId>,
    pub successes: Vec<UserId>,
}

/// Every nonempty user attempts with its own probability; an attempt succeeds
/// iff no neighbor attempted. One uniform is drawn per user per slot so the
/// stream position does not depend on queue contents.
pub fn aloha_select<R: Rng + ?Sized>(
    states: &[QueueState],
    graph: &ConflictGraph,
    p: &[f64],
    rng: &mut R,
) -> AlohaOutcome {
    let n = graph.num_users();
    let mut attempting = vec![false; n];
    for i in 0..n {
        let u: f64 = rng.random();
        attempting[i] = states[i] > 0 && u < p[i];
    }
    let attempts: Vec<UserId> = (0..n).filter(|&i| attempting[i]).collect();
    let successes = attempts
        .iter()
        .copied()
        .filter(|&i| graph.adj(i).iter().all(|&j| !attempting[j]))
        .collect();
    AlohaOutcome {
        attempts,
        successes,
    }
}

/// Independent set over users with positive weight, maximizing total weight
/// (exact) or picking the heaviest remaining user first (greedy).
pub fn select_independent(
    weights: &[f64],
    graph: &ConflictGraph,
    mode: SelectMode,
    exact_cap: usize,
) -> Result<PolicyDecision, PolicyError> {
    let n = graph.num_users();
    let mut cands: Vec<UserId> = (0..n).filter(|&i| weights[i] > 0.0).collect();
    cands.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut active = match mode {
        SelectMode::Greedy => {
            let mut blocked = vec![false; n];
            let mut out = Vec::new();
            for &i in &cands {
                if blocked[i] {
                    continue;
                }
                out.push(i);
                for &j in graph.adj(i) {
                    blocked[j] = true;
                }
            }
            out
        }
        SelectMode::Exact => {
            if n > exact_cap.min(64) {
                return Err(PolicyError::TooLargeForExact {
                    num_users: n,
                    cap: exact_cap.min(64),
                });
            }
            exact_mwis(&cands, weights, graph)
        }
    };
    active.sort_unstable();
    Ok(PolicyDecision { active })
}

/// Branch and bound over candidates ordered by decreasing weight.
fn exact_mwis(cands: &[UserId], weights: &[f64], graph: &ConflictGraph) -> Vec<UserId> {
    struct Search<'a> {
        w: Vec<f64>,
        conflicts: Vec<u64>,
        cands: &'a [UserId],
        best: f64,
        best_set: u64,
    }
    impl Search<'_> {
        fn go(&mut self, open: u64, chosen: u64, value: f64) {
            if open == 0 {
                if value > self.best {
                    self.best = value;
                    self.best_set = chosen;
                }
                return;
            }
            let bound: f64 = value
                + (0..self.w.len())
                    .filter(|k| open >> k & 1 == 1)
                    .map(|k| self.w[k])
                    .sum::<f64>();
            if bound <= self.best {
                return;
            }
            let k = open.trailing_zeros() as usize;
            let bit = 1u64 << k;
            self.go(open & !bit & !self.conflicts[k], chosen | bit, value + self.w[k]);
            self.go(open & !bit, chosen, value);
        }
    }
    let pos: HashMap<UserId, usize> = cands.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let conflicts = cands
        .iter()
        .map(|&i| {
            graph
                .adj(i)
                .iter()
                .filter_map(|j| pos.get(j))
                .fold(0u64, |m, &k| m | 1 << k)
        })
        .collect();
    let mut s = Search {
        w: cands.iter().map(|&i| weights[i]).collect(),
        conflicts,
        cands,
        best: 0.0,
        best_set: 0,
    };
    let all = if cands.len() == 64 {
        u64::MAX
    } else {
        (1u64 << cands.len()) - 1
    };
    s.go(all, 0, 0.0);
    (0..cands.len())
        .filter(|k| s.best_set >> k & 1 == 1)
        .map(|k| s.cands[k])
        .collect()
}

pub fn mws_weights(states: &[QueueState], params: &[UserParams], weight: MwsWeight) -> Vec<f64> {
    states
        .iter()
        .zip(params)
        .map(|(&x, p)| match weight {
            MwsWeight::Queue => f64::from(x),
            MwsWeight::QueueTimesService => f64::from(x) * f64::from(service_amount(x, p)),
        })
        .collect()
}

pub fn mws_select(
    states: &[QueueState],
    params: &[UserParams],
    graph: &ConflictGraph,
    mode: SelectMode,
    weight: MwsWeight,
    exact_cap: usize,
) -> Result<PolicyDecision, PolicyError> {
    select_independent(&mws_weights(states, params, weight), graph, mode, exact_cap)
}

/// Drift-minus-penalty score X·Z − θ·f(Z) with Z = min(X, Ψ).
pub fn lyapunov_score(x: QueueState, params: &UserParams, theta: f64) -> f64 {
    let z = service_amount(x, params);
    f64::from(x) * f64::from(z) - theta * params.energy.eval(z)
}

pub fn lyapunov_select(
    states: &[QueueState],
    params: &[UserParams],
    graph: &ConflictGraph,
    theta: f64,
    mode: SelectMode,
    exact_cap: usize,
) -> Result<PolicyDecision, PolicyError> {
    if !(theta >= 0.0) {
        return Err(PolicyError::BadTheta(theta));
    }
    let scores: Vec<f64> = states
        .iter()
        .zip(params)
        .map(|(&x, p)| lyapunov_score(x, p, theta))
        .collect();
    select_independent(&scores, graph, mode, exact_cap)
}

/// Plug-in point for scheduling rules defined outside this crate.
pub trait DecisionProvider: Send {
    fn decide(&mut self, slot: u64, states: &[QueueState], graph: &ConflictGraph) -> Vec<UserId>;
}

/// Never transmits.
#[derive(Clone, Copy, Debug, Default)]
pub struct AllPassive;

impl DecisionProvider for AllPassive {
    fn decide(&mut self, _: u64, _: &[QueueState], _: &ConflictGraph) -> Vec<UserId> {
        Vec::new()
    }
}

pub type ProviderFactory = Arc<dyn Fn() -> Box<dyn DecisionProvider> + Send + Sync>;

/// Named factories for `external:NAME` policies. `passive` is built in.
#[derive(Clone)]
pub struct ExternalRegistry {
    factories: HashMap<String, ProviderFactory>,
}

impl Default for ExternalRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: HashMap::new(),
        };
        r.register("passive", Arc::new(|| Box::new(AllPassive)));
        r
    }
}

impl fmt::Debug for ExternalRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.factories.keys().collect();
        names.sort();
        f.debug_struct("ExternalRegistry").field("names", &names).finish()
    }
}

impl ExternalRegistry {
    pub fn register(&mut self, name: &str, factory: ProviderFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn DecisionProvider>, PolicyError> {
        self.factories
            .get(name)
            .map(|f| f())
            .ok_or_else(|| PolicyError::UnknownExternal(name.to_string()))
    }
}
