//! Poisson equation of a single queue under a threshold policy.
//!
//! With threshold `x`, states `y ≥ x` are active and states `y < x` passive.
//! Unknowns are the relative values `V(0..=M)` and the average cost `β`; rows
//! are, for each state `y`,
//!
//! ```text
//! V(y) = Σ_k V([y − ν(y∧Ψ) + k] ∧ M) μ(k) − β + C·y + (ν ? f(y∧Ψ) : Λ)
//! ```
//!
//! plus the normalization `V(0) = 0`. For `x ≥ 1` state 0 is passive and its
//! row carries the tax like every other passive row, which makes the system
//! square (`M + 2` equations). The tax `Λ` enters only the right-hand side,
//! so one factorization per `(user, threshold)` serves every tax value.

use crate::error::SolveError;
use crate::traffic::{QueueState, UserModel};

/// Relative values and average cost of a threshold policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonSolution {
    pub v: Vec<f64>,
    pub beta: f64,
}

/// Assembled dense system `A u = b_base + Λ · b_tax`, `u = (V(0..=M), β)`.
#[derive(Clone, Debug)]
pub struct ThresholdSystem {
    threshold: QueueState,
    tax: f64,
    dim: usize,
    matrix: Vec<f64>,
    rhs_base: Vec<f64>,
    rhs_tax: Vec<f64>,
}

impl ThresholdSystem {
    pub fn threshold(&self) -> QueueState {
        self.threshold
    }

    pub fn tax(&self) -> f64 {
        self.tax
    }

    /// Number of equations (and unknowns): `M + 2`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coefficient(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * self.dim + col]
    }

    pub fn rhs(&self, row: usize) -> f64 {
        self.rhs_base[row] + self.tax * self.rhs_tax[row]
    }

    /// Same matrix, different tax.
    pub fn with_tax(&self, tax: f64) -> Self {
        Self {
            tax,
            ..self.clone()
        }
    }
}

pub fn assemble_system(
    threshold: QueueState,
    tax: f64,
    model: &UserModel,
) -> Result<ThresholdSystem, SolveError> {
    let p = &model.params;
    let m = p.buffer_cap;
    if threshold > m {
        return Err(SolveError::ThresholdOutOfRange {
            threshold,
            buffer_cap: m,
        });
    }
    let dim = m as usize + 2;
    let beta = dim - 1;
    let mut matrix = vec![0.0; dim * dim];
    let mut rhs_base = vec![0.0; dim];
    let mut rhs_tax = vec![0.0; dim];

    // row 0: V(0) = 0
    matrix[0] = 1.0;
    for y in 0..=m {
        let row = y as usize + 1;
        let a = &mut matrix[row * dim..(row + 1) * dim];
        let active = y >= threshold;
        let served = if active { p.tx_cap.min_with(y) } else { 0 };
        a[y as usize] += 1.0;
        model.for_each_next(y - served, |s, prob| a[s] -= prob);
        a[beta] = 1.0;
        rhs_base[row] = p.holding_coeff * f64::from(y);
        if active {
            rhs_base[row] += p.energy.eval(served);
        } else {
            rhs_tax[row] = 1.0;
        }
    }
    Ok(ThresholdSystem {
        threshold,
        tax,
        dim,
        matrix,
        rhs_base,
        rhs_tax,
    })
}

/// Dense LU factorization with partial pivoting.
#[derive(Clone, Debug)]
struct Lu {
    n: usize,
    a: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(mut a: Vec<f64>, n: usize) -> Result<Self, usize> {
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (piv, best) = (k..n)
                .map(|r| (r, a[r * n + k].abs()))
                .fold((k, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
            if best <= 1e-12 * scale {
                return Err(k);
            }
            if piv != k {
                for c in 0..n {
                    a.swap(k * n + c, piv * n + c);
                }
                perm.swap(k, piv);
            }
            let d = a[k * n + k];
            for r in (k + 1)..n {
                let f = a[r * n + k] / d;
                if f == 0.0 {
                    continue;
                }
                a[r * n + k] = f;
                for c in (k + 1)..n {
                    a[r * n + c] -= f * a[k * n + c];
                }
            }
        }
        Ok(Self { n, a, perm })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&i| b[i]).collect();
        for r in 0..n {
            let mut s = x[r];
            for c in 0..r {
                s -= self.a[r * n + c] * x[c];
            }
            x[r] = s;
        }
        for r in (0..n).rev() {
            let mut s = x[r];
            for c in (r + 1)..n {
                s -= self.a[r * n + c] * x[c];
            }
            x[r] = s / self.a[r * n + r];
        }
        x
    }
}

fn unpack(mut u: Vec<f64>) -> PoissonSolution {
    let beta = u.pop().expect("system has at least two unknowns");
    u[0] = 0.0;
    PoissonSolution { v: u, beta }
}

/// Factorization of one threshold system, reusable across tax values.
#[derive(Clone, Debug)]
pub struct FactoredSystem {
    system: ThresholdSystem,
    lu: Lu,
}

impl FactoredSystem {
    pub fn new(system: ThresholdSystem) -> Result<Self, SolveError> {
        let lu = Lu::factor(system.matrix.clone(), system.dim).map_err(|column| {
            SolveError::Singular {
                column,
                threshold: system.threshold,
            }
        })?;
        Ok(Self { system, lu })
    }

    pub fn system(&self) -> &ThresholdSystem {
        &self.system
    }

    pub fn solve_with_tax(&self, tax: f64) -> PoissonSolution {
        let b: Vec<f64> = self
            .system
            .rhs_base
            .iter()
            .zip(&self.system.rhs_tax)
            .map(|(b0, bt)| b0 + tax * bt)
            .collect();
        unpack(self.lu.solve(&b))
    }

    /// Solution as an affine function of the tax: `(at Λ = 0, ∂/∂Λ)`.
    pub fn affine_parts(&self) -> (PoissonSolution, PoissonSolution) {
        (
            unpack(self.lu.solve(&self.system.rhs_base)),
            unpack(self.lu.solve(&self.system.rhs_tax)),
        )
    }
}

/// Direct dense solve of an assembled system.
pub fn solve(system: &ThresholdSystem) -> Result<PoissonSolution, SolveError> {
    let tax = system.tax;
    Ok(FactoredSystem::new(system.clone())?.solve_with_tax(tax))
}

/// Largest row violation `|lhs − rhs| / (1 + |rhs|)`, each row read as
/// `V(y) = Σ V(next) μ − β + cost`; the normalization row reads `V(0) = 0`.
pub fn residual(system: &ThresholdSystem, sol: &PoissonSolution) -> f64 {
    let n = system.dim;
    assert_eq!(sol.v.len() + 1, n, "solution does not match system");
    let u: Vec<f64> = sol.v.iter().copied().chain(std::iter::once(sol.beta)).collect();
    let mut worst = 0.0f64;
    for row in 0..n {
        let au: f64 = (0..n).map(|c| system.coefficient(row, c) * u[c]).sum();
        let b = system.rhs(row);
        let (lhs, rhs) = if row == 0 {
            (u[0], b)
        } else {
            let y = row - 1;
            (u[y], u[y] - au + b)
        };
        worst = worst.max((lhs - rhs).abs() / (1.0 + rhs.abs()));
    }
    worst
}
