//! Whittle-style index computation.
//!
//! Every scheme iterates `λ ← λ + γ·r`, where `r` is the gap between the
//! active and passive one-step costs at the current state, evaluated with the
//! relative values of the threshold policy whose tax is the neighborhood sum
//! `Λ^i = Σ_{j ∈ N*(i)} λ^j`:
//!
//! ```text
//! r = f(x∧Ψ) − boxed + Σ_k μ(k)·(V([x − x∧Ψ + k]∧M) − V([x + k]∧M))
//! ```
//!
//! Type 1 uses `boxed = λ^i`, type 2 uses `boxed = Λ^i`. The non-stationary
//! schemes keep one scalar per user that is nudged once per slot at the
//! user's current queue length; the stationary schemes precompute a table
//! `λ^i(x)` for every state by running a fixed number of Jacobi sweeps from 0.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IndexError, SolveError};
use crate::graph::{ConflictGraph, UserId};
use crate::poisson::{assemble_system, solve, FactoredSystem, PoissonSolution};
use crate::traffic::{service_amount, QueueState, UserModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Type1,
    Type2,
}

/// Σ_k μ(k) V([base + k] ∧ M)
fn expected_value(model: &UserModel, base: QueueState, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    model.for_each_next(base, |s, p| acc += p * v[s]);
    acc
}

/// Σ_k μ(k) (V(after serving at x) − V(after idling at x))
fn value_drift(model: &UserModel, x: QueueState, v: &[f64]) -> f64 {
    let z = service_amount(x, &model.params);
    expected_value(model, x - z, v) - expected_value(model, x, v)
}

/// Active-minus-passive cost gap at state `x`, with `boxed` as the tax.
pub fn indifference_residual(
    x: QueueState,
    sol: &PoissonSolution,
    boxed: f64,
    model: &UserModel,
) -> f64 {
    model.params.energy_cost(x) - boxed + value_drift(model, x, &sol.v)
}

/// Λ^i = Σ_{j ∈ N*(i)} λ^j, summed in ascending id order.
pub fn aggregate_tax(
    user: UserId,
    lambdas: &[f64],
    graph: &ConflictGraph,
) -> Result<f64, IndexError> {
    if lambdas.len() != graph.num_users() {
        return Err(IndexError::Snapshot {
            got: lambdas.len(),
            expected: graph.num_users(),
        });
    }
    Ok(graph
        .closed_neighborhood(user)?
        .iter()
        .map(|&j| lambdas[j])
        .sum())
}

fn boxed_term(variant: Variant, own: f64, tax: f64) -> f64 {
    match variant {
        Variant::Type1 => own,
        Variant::Type2 => tax,
    }
}

fn check_step(gamma: f64) -> Result<(), IndexError> {
    if gamma.is_finite() && gamma >= 0.0 {
        Ok(())
    } else {
        Err(IndexError::BadStep(gamma))
    }
}

/// One non-stationary update for `user` at queue length `x`: assemble and
/// solve the threshold-`x` system with tax Λ^i from the previous snapshot,
/// then step λ^i by γ times the indifference residual.
pub fn ns_update(
    user: UserId,
    x: QueueState,
    lambdas_prev: &[f64],
    variant: Variant,
    graph: &ConflictGraph,
    model: &UserModel,
    gamma: f64,
) -> Result<f64, IndexError> {
    check_step(gamma)?;
    if x == 0 {
        return Err(IndexError::EmptyQueue { user });
    }
    let tax = aggregate_tax(user, lambdas_prev, graph)?;
    let wrap = |source| IndexError::Solve {
        user,
        state: x,
        sweep: 0,
        source,
    };
    let system = assemble_system(x, tax, model).map_err(wrap)?;
    let sol = solve(&system).map_err(wrap)?;
    let own = lambdas_prev[user];
    let r = indifference_residual(x, &sol, boxed_term(variant, own, tax), model);
    Ok(own + gamma * r)
}

/// Indifference residual of one `(user, threshold)` pair as an affine
/// function of the tax: `r(Λ, boxed) = energy − boxed + drift + Λ·drift_per_tax`.
///
/// The Poisson system's matrix does not depend on Λ, so solving it once for
/// the tax-free right-hand side and once for the tax column gives the exact
/// solution for every Λ by superposition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdResponse {
    pub energy: f64,
    pub drift: f64,
    pub drift_per_tax: f64,
}

impl ThresholdResponse {
    pub fn new(model: &UserModel, x: QueueState) -> Result<Self, SolveError> {
        let factored = FactoredSystem::new(assemble_system(x, 0.0, model)?)?;
        let (base, unit) = factored.affine_parts();
        Ok(Self {
            energy: model.params.energy_cost(x),
            drift: value_drift(model, x, &base.v),
            drift_per_tax: value_drift(model, x, &unit.v),
        })
    }

    pub fn residual(&self, tax: f64, boxed: f64) -> f64 {
        self.energy - boxed + self.drift + tax * self.drift_per_tax
    }
}

/// Threshold responses for every user and every state `1..=M`.
#[derive(Clone, Debug)]
pub struct ResponseBank {
    // responses[i][x - 1]
    responses: Vec<Vec<Option<ThresholdResponse>>>,
}

impl ResponseBank {
    pub fn empty(models: &[UserModel]) -> Self {
        Self {
            responses: models
                .iter()
                .map(|m| vec![None; m.params.buffer_cap as usize])
                .collect(),
        }
    }

    /// Solves every `(user, state)` system up front, in parallel.
    pub fn full(models: &[UserModel]) -> Result<Self, IndexError> {
        let responses = models
            .par_iter()
            .enumerate()
            .map(|(user, m)| {
                (1..=m.params.buffer_cap)
                    .map(|x| {
                        ThresholdResponse::new(m, x).map(Some).map_err(|source| {
                            IndexError::Solve {
                                user,
                                state: x,
                                sweep: 1,
                                source,
                            }
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { responses })
    }

    fn get_or_solve(
        &mut self,
        user: UserId,
        x: QueueState,
        model: &UserModel,
    ) -> Result<ThresholdResponse, SolveError> {
        let slot = &mut self.responses[user][x as usize - 1];
        if let Some(r) = slot {
            return Ok(*r);
        }
        let r = ThresholdResponse::new(model, x)?;
        *slot = Some(r);
        Ok(r)
    }

    fn get(&self, user: UserId, x: QueueState) -> ThresholdResponse {
        self.responses[user][x as usize - 1].expect("response bank is full")
    }
}

/// Per-user λ scalars carried from slot to slot.
#[derive(Clone, Debug)]
pub struct NonStationaryIndex {
    variant: Variant,
    gamma: f64,
    lambdas: Vec<f64>,
    bank: ResponseBank,
}

impl NonStationaryIndex {
    pub fn new(variant: Variant, gamma: f64, models: &[UserModel]) -> Result<Self, IndexError> {
        check_step(gamma)?;
        Ok(Self {
            variant,
            gamma,
            lambdas: vec![0.0; models.len()],
            bank: ResponseBank::empty(models),
        })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Updates every user with a nonempty queue from the previous slot's
    /// snapshot; users with empty queues keep their λ.
    pub fn update(
        &mut self,
        states: &[QueueState],
        graph: &ConflictGraph,
        models: &[UserModel],
    ) -> Result<(), IndexError> {
        let prev = self.lambdas.clone();
        for (user, &x) in states.iter().enumerate() {
            if x == 0 {
                continue;
            }
            let tax = aggregate_tax(user, &prev, graph)?;
            let resp = self
                .bank
                .get_or_solve(user, x, &models[user])
                .map_err(|source| IndexError::Solve {
                    user,
                    state: x,
                    sweep: 0,
                    source,
                })?;
            let boxed = boxed_term(self.variant, prev[user], tax);
            self.lambdas[user] = prev[user] + self.gamma * resp.residual(tax, boxed);
        }
        Ok(())
    }
}

/// Precomputed per-state indices.
#[derive(Clone, Debug, PartialEq)]
pub struct StationaryIndex {
    pub variant: Variant,
    pub gamma: f64,
    pub n_iter: usize,
    // tables[i][x - 1] = λ^i(x)
    tables: Vec<Vec<f64>>,
    /// max |λ_n − λ_{n−1}| over all (user, state), per sweep
    pub sweep_deltas: Vec<f64>,
}

impl StationaryIndex {
    /// λ^i(x); state 0 has no index.
    pub fn get(&self, user: UserId, x: QueueState) -> Option<f64> {
        if x == 0 {
            return None;
        }
        self.tables.get(user)?.get(x as usize - 1).copied()
    }

    pub fn table(&self, user: UserId) -> &[f64] {
        &self.tables[user]
    }

    pub fn num_users(&self) -> usize {
        self.tables.len()
    }

    /// States whose index is lower than at the state below, per user.
    pub fn non_monotone_states(&self) -> Vec<(UserId, QueueState)> {
        let mut out = Vec::new();
        for (i, t) in self.tables.iter().enumerate() {
            for x in 1..t.len() {
                if t[x] < t[x - 1] {
                    out.push((i, x as QueueState + 1));
                }
            }
        }
        out
    }

    pub fn to_entries(&self) -> Vec<IndexEntry> {
        self.tables
            .iter()
            .enumerate()
            .flat_map(|(user, t)| {
                t.iter().enumerate().map(move |(k, &lambda)| IndexEntry {
                    user,
                    state: k as QueueState + 1,
                    lambda,
                })
            })
            .collect()
    }
}

/// Neighbor `j`'s entry read at state `x`, clamped to its own buffer.
fn read_at(table: &[f64], x: usize) -> f64 {
    table[x.min(table.len()) - 1]
}

/// Runs `n_iter` Jacobi sweeps of the stationary update from all-zero tables.
/// Neighbors are read at the same state index as the user being updated.
pub fn stationary_table(
    variant: Variant,
    graph: &ConflictGraph,
    models: &[UserModel],
    gamma: f64,
    n_iter: usize,
) -> Result<StationaryIndex, IndexError> {
    let bank = ResponseBank::full(models)?;
    stationary_from_bank(variant, graph, models, &bank, gamma, n_iter)
}

/// As [`stationary_table`], reusing precomputed threshold responses.
pub fn stationary_from_bank(
    variant: Variant,
    graph: &ConflictGraph,
    models: &[UserModel],
    bank: &ResponseBank,
    gamma: f64,
    n_iter: usize,
) -> Result<StationaryIndex, IndexError> {
    check_step(gamma)?;
    if n_iter == 0 {
        return Err(IndexError::NoIterations);
    }
    if models.len() != graph.num_users() {
        return Err(IndexError::Snapshot {
            got: models.len(),
            expected: graph.num_users(),
        });
    }
    let hoods: Vec<Vec<UserId>> = (0..graph.num_users())
        .map(|i| graph.closed_neighborhood(i))
        .collect::<Result<_, _>>()?;
    let mut tables: Vec<Vec<f64>> = models
        .iter()
        .map(|m| vec![0.0; m.params.buffer_cap as usize])
        .collect();
    let mut sweep_deltas = Vec::with_capacity(n_iter);
    for _ in 0..n_iter {
        let prev = &tables;
        let next: Vec<Vec<f64>> = (0..prev.len())
            .into_par_iter()
            .map(|i| {
                (1..=prev[i].len())
                    .map(|x| {
                        let tax: f64 = hoods[i].iter().map(|&j| read_at(&prev[j], x)).sum();
                        let own = prev[i][x - 1];
                        let resp = bank.get(i, x as QueueState);
                        own + gamma * resp.residual(tax, boxed_term(variant, own, tax))
                    })
                    .collect()
            })
            .collect();
        let delta = next
            .iter()
            .zip(prev)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).abs()))
            .fold(0.0f64, f64::max);
        sweep_deltas.push(delta);
        tables = next;
    }
    Ok(StationaryIndex {
        variant,
        gamma,
        n_iter,
        tables,
        sweep_deltas,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub user: UserId,
    pub state: QueueState,
    pub lambda: f64,
}

/// Serialized stationary tables, keyed for on-disk caching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexTableFile {
    pub key: String,
    pub variant: Variant,
    pub gamma: f64,
    pub n_iter: usize,
    pub entries: Vec<IndexEntry>,
    pub sweep_deltas: Vec<f64>,
}

impl IndexTableFile {
    pub fn from_index(key: &str, index: &StationaryIndex) -> Self {
        Self {
            key: key.to_string(),
            variant: index.variant,
            gamma: index.gamma,
            n_iter: index.n_iter,
            entries: index.to_entries(),
            sweep_deltas: index.sweep_deltas.clone(),
        }
    }

    pub fn into_index(self) -> Result<StationaryIndex, String> {
        let mut by_user: BTreeMap<UserId, Vec<(QueueState, f64)>> = BTreeMap::new();
        for e in self.entries {
            by_user.entry(e.user).or_default().push((e.state, e.lambda));
        }
        let mut tables = Vec::with_capacity(by_user.len());
        for (expected, (user, mut rows)) in by_user.into_iter().enumerate() {
            if user != expected {
                return Err(format!("missing entries for user {expected}"));
            }
            rows.sort_by_key(|r| r.0);
            if rows.iter().enumerate().any(|(k, r)| r.0 as usize != k + 1) {
                return Err(format!("user {user}: states must be 1..=M without gaps"));
            }
            tables.push(rows.into_iter().map(|r| r.1).collect());
        }
        Ok(StationaryIndex {
            variant: self.variant,
            gamma: self.gamma,
            n_iter: self.n_iter,
            tables,
            sweep_deltas: self.sweep_deltas,
        })
    }
}

/// Content hash identifying a stationary table: graph, user parameters,
/// variant, step size and sweep count.
pub fn table_cache_key(
    graph: &ConflictGraph,
    models: &[UserModel],
    variant: Variant,
    gamma: f64,
    n_iter: usize,
) -> String {
    let mut h = Sha256::new();
    h.update(graph.content_hash().as_bytes());
    let params: Vec<_> = models.iter().map(|m| &m.params).collect();
    h.update(serde_json::to_vec(&params).expect("params serialize"));
    h.update(serde_json::to_vec(&variant).expect("variant serializes"));
    h.update(gamma.to_bits().to_le_bytes());
    h.update((n_iter as u64).to_le_bytes());
    hex::encode(h.finalize())
}
