//! JSON experiment configuration.
//!
//! A config file describes a grid: every listed regime is crossed with every
//! listed policy, and each resulting [`Scenario`] runs once per seed. Every
//! key is optional except where noted; unknown keys are rejected.
//!
//! ```json
//! {
//!   "name": "paper-grid",
//!   "users": 20, "d": 0.6, "buffer_cap": 100,
//!   "regimes": ["large_restricted", "large_unrestricted"],
//!   "policies": ["stationary_type1", "aloha", "lyapunov"],
//!   "seeds": [1, 2, 3],
//!   "n_slots": 10000, "gamma": 0.05, "n_iter": 200, "theta": 200
//! }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::graph::{ConflictGraph, GraphFile};
use crate::policy::{AlohaP, MwsWeight, PolicyConfig, PolicyKind, SelectMode, DEFAULT_EXACT_CAP};
use crate::sim::{GraphSpec, Regime, Scenario, UserOverride};
use crate::traffic::{EnergyFn, QueueState};

pub const DEFAULT_USERS: usize = 20;
pub const DEFAULT_D: f64 = 0.6;
pub const DEFAULT_BUFFER_CAP: u32 = 100;
pub const DEFAULT_SLOTS: u64 = 10_000;
pub const DEFAULT_GAMMA: f64 = 0.05;
pub const DEFAULT_N_ITER: usize = 200;
pub const DEFAULT_THETA: f64 = 200.0;

pub const ALL_POLICIES: [&str; 7] = [
    "ns_type1",
    "ns_type2",
    "stationary_type1",
    "stationary_type2",
    "aloha",
    "mws",
    "lyapunov",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub users: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    /// Path to a graph file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_file: Option<String>,
    /// Inline graph; exclusive with `graph_file`, `users` and `d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_cap: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regimes: Option<Vec<Regime>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policies: Option<Vec<PolicyKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_slots: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aloha_p: Option<AlohaP>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mws_mode: Option<SelectMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mws_weight: Option<MwsWeight>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_cap: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holding_coeff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergyFn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_queue: Option<QueueState>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub user_overrides: Vec<UserOverride>,
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub slots: Option<u64>,
    pub policies: Vec<PolicyKind>,
    pub users: Option<usize>,
    pub d: Option<f64>,
    pub gamma: Option<f64>,
    pub n_iter: Option<usize>,
    pub theta: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ConfigFile) {
        if !self.seeds.is_empty() {
            cfg.seed = None;
            cfg.seeds = Some(self.seeds.clone());
        }
        if !self.policies.is_empty() {
            cfg.policies = Some(self.policies.clone());
        }
        if self.slots.is_some() {
            cfg.n_slots = self.slots;
        }
        if self.users.is_some() {
            cfg.users = self.users;
        }
        if self.d.is_some() {
            cfg.d = self.d;
        }
        if self.gamma.is_some() {
            cfg.gamma = self.gamma;
        }
        if self.n_iter.is_some() {
            cfg.n_iter = self.n_iter;
        }
        if self.theta.is_some() {
            cfg.theta = self.theta;
        }
    }
}

pub fn read_config(path: &Path) -> Result<ConfigFile, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_text(&text)
}

/// Deserializes, reporting the JSON path of the offending field.
pub fn parse_config_text(text: &str) -> Result<ConfigFile, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::schema(path, e.into_inner().to_string())
    })
}

/// Reads, overrides and resolves a config file into scenarios.
pub fn parse_config(path: &Path, overrides: &Overrides) -> Result<Vec<Scenario>, ConfigError> {
    let mut cfg = read_config(path)?;
    overrides.apply(&mut cfg);
    resolve(&cfg, path.parent())
}

fn positive(path: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::schema(path, format!("must be positive, got {v}")))
    }
}

fn nonnegative(path: &str, v: f64) -> Result<f64, ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::schema(path, format!("must be nonnegative, got {v}")))
    }
}

/// Materializes every default and expands the regime × policy grid.
pub fn resolve(cfg: &ConfigFile, base_dir: Option<&Path>) -> Result<Vec<Scenario>, ConfigError> {
    let name = cfg.name.clone().unwrap_or_else(|| "run".to_string());
    if name.is_empty() {
        return Err(ConfigError::schema("name", "must not be empty"));
    }

    let graph = match (&cfg.graph, &cfg.graph_file) {
        (Some(_), Some(_)) => {
            return Err(ConfigError::schema("graph", "give either graph or graph_file"))
        }
        (Some(g), None) => Some(g.clone()),
        (None, Some(p)) => {
            let full = base_dir.map_or_else(|| Path::new(p).to_path_buf(), |b| b.join(p));
            let g = ConflictGraph::load(&full)
                .map_err(|e| ConfigError::schema("graph_file", e.to_string()))?;
            Some(g.to_file())
        }
        (None, None) => None,
    };
    let graph = match graph {
        Some(g) => {
            if cfg.users.is_some() || cfg.d.is_some() {
                return Err(ConfigError::schema(
                    "users",
                    "users/d cannot be combined with an explicit graph",
                ));
            }
            ConflictGraph::from_file(&g).map_err(|e| ConfigError::schema("graph", e.to_string()))?;
            GraphSpec::Explicit { graph: g }
        }
        None => {
            let users = cfg.users.unwrap_or(DEFAULT_USERS);
            if users == 0 {
                return Err(ConfigError::schema("users", "must be at least 1"));
            }
            GraphSpec::Geometric {
                num_users: users,
                threshold_d: positive("d", cfg.d.unwrap_or(DEFAULT_D))?,
            }
        }
    };

    let buffer_cap = cfg.buffer_cap.unwrap_or(DEFAULT_BUFFER_CAP);
    if buffer_cap == 0 {
        return Err(ConfigError::schema("buffer_cap", "must be at least 1"));
    }
    let regimes = match (&cfg.regime, &cfg.regimes) {
        (Some(_), Some(_)) => {
            return Err(ConfigError::schema("regimes", "give either regime or regimes"))
        }
        (Some(r), None) => vec![*r],
        (None, Some(rs)) => rs.clone(),
        (None, None) => vec!["default_restricted".parse().expect("valid regime")],
    };
    if regimes.is_empty() {
        return Err(ConfigError::schema("regimes", "must not be empty"));
    }
    let policies = cfg.policies.clone().unwrap_or_else(|| {
        ALL_POLICIES
            .iter()
            .map(|p| p.parse().expect("built-in policy"))
            .collect()
    });
    if policies.is_empty() {
        return Err(ConfigError::schema("policies", "must not be empty"));
    }
    let seeds = match (&cfg.seed, &cfg.seeds) {
        (Some(_), Some(_)) => return Err(ConfigError::schema("seeds", "give either seed or seeds")),
        (Some(s), None) => vec![*s],
        (None, Some(s)) => s.clone(),
        (None, None) => vec![1],
    };
    if seeds.is_empty() {
        return Err(ConfigError::schema("seeds", "must not be empty"));
    }
    let n_slots = cfg.n_slots.unwrap_or(DEFAULT_SLOTS);
    if n_slots == 0 {
        return Err(ConfigError::schema("n_slots", "must be at least 1"));
    }
    let burn_in = cfg.burn_in.unwrap_or(0);
    if burn_in >= n_slots {
        return Err(ConfigError::schema("burn_in", "must be smaller than n_slots"));
    }
    let gamma = positive("gamma", cfg.gamma.unwrap_or(DEFAULT_GAMMA))?;
    let n_iter = cfg.n_iter.unwrap_or(DEFAULT_N_ITER);
    if n_iter == 0 {
        return Err(ConfigError::schema("n_iter", "must be at least 1"));
    }
    let theta = nonnegative("theta", cfg.theta.unwrap_or(DEFAULT_THETA))?;
    let aloha_p = cfg.aloha_p.unwrap_or_default();
    if let AlohaP::Fixed(p) = aloha_p {
        if !(0.0..=1.0).contains(&p) {
            return Err(ConfigError::schema("aloha_p", format!("must be in [0, 1], got {p}")));
        }
    }
    let holding_coeff = nonnegative("holding_coeff", cfg.holding_coeff.unwrap_or(1.0))?;
    let energy = cfg.energy.unwrap_or_default();
    match energy {
        EnergyFn::Linear { coeff } | EnergyFn::Quadratic { coeff } => {
            nonnegative("energy.coeff", coeff)?;
        }
    }
    let initial_queue = cfg.initial_queue.unwrap_or(0);
    if initial_queue > buffer_cap {
        return Err(ConfigError::schema("initial_queue", "exceeds buffer_cap"));
    }
    let n = graph.num_users();
    for (k, o) in cfg.user_overrides.iter().enumerate() {
        let at = |f: &str| format!("user_overrides[{k}].{f}");
        if o.user >= n {
            return Err(ConfigError::schema(at("user"), format!("no user {} among {n}", o.user)));
        }
        if let Some(c) = o.holding_coeff {
            nonnegative(&at("holding_coeff"), c)?;
        }
        if o.initial_queue.is_some_and(|q| q > buffer_cap) {
            return Err(ConfigError::schema(at("initial_queue"), "exceeds buffer_cap"));
        }
    }

    let mut out = Vec::with_capacity(regimes.len() * policies.len());
    for regime in &regimes {
        for kind in &policies {
            let scenario = Scenario {
                id: format!("{name}-{regime}"),
                regime: *regime,
                graph: graph.clone(),
                buffer_cap,
                holding_coeff,
                energy,
                initial_queue,
                user_overrides: cfg.user_overrides.clone(),
                policy: PolicyConfig {
                    kind: kind.clone(),
                    aloha_p,
                    theta,
                    mode: cfg.mws_mode.unwrap_or_default(),
                    mws_weight: cfg.mws_weight.unwrap_or_default(),
                    exact_cap: cfg.exact_cap.unwrap_or(DEFAULT_EXACT_CAP),
                },
                n_slots,
                burn_in,
                gamma,
                n_iter,
                seeds: seeds.clone(),
            };
            scenario
                .validate()
                .map_err(|e| ConfigError::schema(format!("scenario {}", scenario.id), e.to_string()))?;
            out.push(scenario);
        }
    }
    Ok(out)
}

/// Config that resolves back to exactly this scenario.
pub fn to_config(scenario: &Scenario) -> ConfigFile {
    let suffix = format!("-{}", scenario.regime);
    let name = scenario
        .id
        .strip_suffix(&suffix)
        .unwrap_or(&scenario.id)
        .to_string();
    let (users, d, graph) = match &scenario.graph {
        GraphSpec::Geometric {
            num_users,
            threshold_d,
        } => (Some(*num_users), Some(*threshold_d), None),
        GraphSpec::Explicit { graph } => (None, None, Some(graph.clone())),
    };
    let p = &scenario.policy;
    ConfigFile {
        name: Some(name),
        users,
        d,
        graph_file: None,
        graph,
        buffer_cap: Some(scenario.buffer_cap),
        regime: Some(scenario.regime),
        regimes: None,
        policies: Some(vec![p.kind.clone()]),
        seed: None,
        seeds: Some(scenario.seeds.clone()),
        n_slots: Some(scenario.n_slots),
        burn_in: Some(scenario.burn_in),
        gamma: Some(scenario.gamma),
        n_iter: Some(scenario.n_iter),
        theta: Some(p.theta),
        aloha_p: Some(p.aloha_p),
        mws_mode: Some(p.mode),
        mws_weight: Some(p.mws_weight),
        exact_cap: Some(p.exact_cap),
        holding_coeff: Some(scenario.holding_coeff),
        energy: Some(scenario.energy),
        initial_queue: Some(scenario.initial_queue),
        user_overrides: scenario.user_overrides.clone(),
    }
}
