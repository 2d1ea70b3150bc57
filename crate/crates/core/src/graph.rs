//! Undirected interference (conflict) graph over users.
//!
//! Two users share an edge when they cannot transmit in the same slot. The
//! geometric constructor places users uniformly in the unit square and joins
//! every pair closer than a threshold distance; graphs can also be built from
//! an explicit edge list or loaded from a JSON graph file.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::GraphError;
use crate::rng::{stream, Stream};

/// Dense user index in `0..num_users`.
pub type UserId = usize;

/// Position in the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub fn new(x: f64, y: f64) -> Result<Self, GraphError> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(GraphError::PositionOutOfRange { x, y });
        }
        Ok(Self { x, y })
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// On-disk graph description.
///
/// `positions` and `threshold_d` are present for geometric graphs and
/// optional for explicit edge lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub num_users: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<[f64; 2]>>,
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_d: Option<f64>,
}

/// Immutable conflict graph. Adjacency is symmetric and irreflexive.
#[derive(Clone, Debug, PartialEq)]
pub struct ConflictGraph {
    positions: Option<Vec<Point2D>>,
    threshold_d: Option<f64>,
    neighbors: Vec<Vec<UserId>>,
    adjacent: Vec<bool>,
}

impl ConflictGraph {
    /// Places `num_users` users i.i.d. uniformly in the unit square and joins
    /// every pair at distance strictly below `threshold_d`.
    pub fn generate_geometric(
        num_users: usize,
        threshold_d: f64,
        seed: u64,
    ) -> Result<Self, GraphError> {
        if num_users == 0 {
            return Err(GraphError::Empty);
        }
        if !(threshold_d > 0.0) || !threshold_d.is_finite() {
            return Err(GraphError::BadThreshold(threshold_d));
        }
        let mut rng = stream(seed, Stream::Topology);
        let positions: Vec<Point2D> = (0..num_users)
            .map(|_| Point2D {
                x: rng.random::<f64>(),
                y: rng.random::<f64>(),
            })
            .collect();
        Self::from_positions(positions, threshold_d)
    }

    /// Geometric graph over fixed positions.
    pub fn from_positions(positions: Vec<Point2D>, threshold_d: f64) -> Result<Self, GraphError> {
        if positions.is_empty() {
            return Err(GraphError::Empty);
        }
        if !(threshold_d > 0.0) || !threshold_d.is_finite() {
            return Err(GraphError::BadThreshold(threshold_d));
        }
        for p in &positions {
            Point2D::new(p.x, p.y)?;
        }
        let n = positions.len();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if positions[i].distance(&positions[j]) < threshold_d {
                    edges.push((i, j));
                }
            }
        }
        let mut g = Self::from_edges(n, &edges)?;
        g.positions = Some(positions);
        g.threshold_d = Some(threshold_d);
        Ok(g)
    }

    /// Graph from an explicit edge list. Duplicate edges are merged.
    pub fn from_edges(num_users: usize, edges: &[(UserId, UserId)]) -> Result<Self, GraphError> {
        if num_users == 0 {
            return Err(GraphError::Empty);
        }
        let mut adjacent = vec![false; num_users * num_users];
        let mut sets = vec![BTreeSet::new(); num_users];
        for &(i, j) in edges {
            if i >= num_users || j >= num_users {
                return Err(GraphError::InvalidUser {
                    id: i.max(j),
                    num_users,
                });
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            adjacent[i * num_users + j] = true;
            adjacent[j * num_users + i] = true;
            sets[i].insert(j);
            sets[j].insert(i);
        }
        Ok(Self {
            positions: None,
            threshold_d: None,
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            adjacent,
        })
    }

    pub fn num_users(&self) -> usize {
        self.neighbors.len()
    }

    pub fn positions(&self) -> Option<&[Point2D]> {
        self.positions.as_deref()
    }

    pub fn threshold_d(&self) -> Option<f64> {
        self.threshold_d
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    fn check(&self, i: UserId) -> Result<(), GraphError> {
        if i < self.num_users() {
            Ok(())
        } else {
            Err(GraphError::InvalidUser {
                id: i,
                num_users: self.num_users(),
            })
        }
    }

    /// N(i), sorted ascending.
    pub fn neighbors(&self, i: UserId) -> Result<&[UserId], GraphError> {
        self.check(i)?;
        Ok(&self.neighbors[i])
    }

    /// N*(i) = N(i) ∪ {i}, sorted ascending.
    pub fn closed_neighborhood(&self, i: UserId) -> Result<Vec<UserId>, GraphError> {
        self.check(i)?;
        let mut out = Vec::with_capacity(self.neighbors[i].len() + 1);
        let mut inserted = false;
        for &j in &self.neighbors[i] {
            if !inserted && j > i {
                out.push(i);
                inserted = true;
            }
            out.push(j);
        }
        if !inserted {
            out.push(i);
        }
        Ok(out)
    }

    /// Unchecked neighbor slice for hot loops; panics on an invalid id.
    pub(crate) fn adj(&self, i: UserId) -> &[UserId] {
        &self.neighbors[i]
    }

    /// Whether `i` and `j` interfere. Out-of-range ids are never adjacent.
    pub fn are_adjacent(&self, i: UserId, j: UserId) -> bool {
        let n = self.num_users();
        i < n && j < n && self.adjacent[i * n + j]
    }

    /// True iff no two members of `set` are adjacent.
    pub fn is_independent_set(&self, set: &[UserId]) -> bool {
        set.iter().enumerate().all(|(a, &i)| {
            set[a + 1..].iter().all(|&j| !self.are_adjacent(i, j))
        })
    }

    /// True iff `set` is independent and no member of `eligible \ set` can
    /// join it without breaking independence.
    pub fn is_maximal_independent_set(&self, set: &[UserId], eligible: &[UserId]) -> bool {
        if !self.is_independent_set(set) {
            return false;
        }
        eligible
            .iter()
            .filter(|i| !set.contains(i))
            .all(|&i| set.iter().any(|&j| self.are_adjacent(i, j)))
    }

    pub fn to_file(&self) -> GraphFile {
        let edges = self
            .neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| [i, j]))
            .collect();
        GraphFile {
            num_users: self.num_users(),
            positions: self
                .positions
                .as_ref()
                .map(|ps| ps.iter().map(|p| [p.x, p.y]).collect()),
            edges,
            threshold_d: self.threshold_d,
        }
    }

    /// Builds a graph from its file form. Geometric files must agree with the
    /// distance rule.
    pub fn from_file(file: &GraphFile) -> Result<Self, GraphError> {
        let edges: Vec<(usize, usize)> = file.edges.iter().map(|e| (e[0], e[1])).collect();
        let mut g = Self::from_edges(file.num_users, &edges)?;
        if let Some(ps) = &file.positions {
            if ps.len() != file.num_users {
                return Err(GraphError::Format(format!(
                    "positions has {} entries, expected {}",
                    ps.len(),
                    file.num_users
                )));
            }
            let positions = ps
                .iter()
                .map(|p| Point2D::new(p[0], p[1]))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(d) = file.threshold_d {
                let geometric = Self::from_positions(positions.clone(), d)?;
                if geometric.adjacent != g.adjacent {
                    return Err(GraphError::Format(
                        "edge list disagrees with positions and threshold_d".into(),
                    ));
                }
            }
            g.positions = Some(positions);
        }
        g.threshold_d = file.threshold_d;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GraphError::Format(format!("{}: {e}", path.display())))?;
        let file: GraphFile = serde_json::from_str(&text)
            .map_err(|e| GraphError::Format(format!("{}: {e}", path.display())))?;
        Self::from_file(&file)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        fs::write(path, text)
    }

    /// SHA-256 over the edge structure (positions excluded).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_users() as u64).to_le_bytes());
        for [i, j] in self.to_file().edges {
            h.update((i as u64).to_le_bytes());
            h.update((j as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
