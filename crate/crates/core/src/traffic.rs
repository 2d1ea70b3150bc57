//! Per-user queue dynamics and arrival processes.
//!
//! A queue holding `x` packets serves `min(x, Ψ)` packets when active, then
//! receives a batch of arrivals; anything above the buffer cap `M` is dropped.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::ParamError;

/// Queue length in packets.
pub type QueueState = u32;

/// Per-slot transmission cap Ψ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxCap {
    Limited(u32),
    Unbounded,
}

impl TxCap {
    pub fn min_with(self, x: QueueState) -> QueueState {
        match self {
            TxCap::Limited(cap) => x.min(cap),
            TxCap::Unbounded => x,
        }
    }
}

/// Energy cost f(z) of sending `z` packets in one slot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnergyFn {
    /// f(z) = coeff · z
    Linear { coeff: f64 },
    /// f(z) = coeff · z²
    Quadratic { coeff: f64 },
}

impl Default for EnergyFn {
    fn default() -> Self {
        EnergyFn::Linear { coeff: 1.0 }
    }
}

impl EnergyFn {
    pub fn eval(&self, packets: QueueState) -> f64 {
        let z = f64::from(packets);
        match *self {
            EnergyFn::Linear { coeff } => coeff * z,
            EnergyFn::Quadratic { coeff } => coeff * z * z,
        }
    }

    fn coeff(&self) -> f64 {
        match *self {
            EnergyFn::Linear { coeff } | EnergyFn::Quadratic { coeff } => coeff,
        }
    }
}

/// Distribution of the per-slot arrival count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalDist {
    Poisson { mean: f64 },
    /// Explicit pmf over `0..probs.len()`.
    Finite { probs: Vec<f64> },
}

impl ArrivalDist {
    pub fn mean(&self) -> f64 {
        match self {
            ArrivalDist::Poisson { mean } => *mean,
            ArrivalDist::Finite { probs } => {
                probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
            }
        }
    }

    fn validate(&self) -> Result<(), ParamError> {
        match self {
            ArrivalDist::Poisson { mean } => {
                if !(*mean > 0.0) || !mean.is_finite() {
                    return Err(ParamError::new(
                        "arrival_mean",
                        format!("must be positive and finite, got {mean}"),
                    ));
                }
            }
            ArrivalDist::Finite { probs } => {
                if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                    return Err(ParamError::new(
                        "arrivals.probs",
                        "must be a nonempty list of nonnegative numbers",
                    ));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(ParamError::new(
                        "arrivals.probs",
                        format!("must sum to 1, got {total}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserParams {
    /// M
    pub buffer_cap: u32,
    /// Ψ
    pub tx_cap: TxCap,
    pub arrivals: ArrivalDist,
    /// C
    pub holding_coeff: f64,
    pub energy: EnergyFn,
}

impl UserParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        if self.buffer_cap < 1 {
            return Err(ParamError::new("buffer_cap", "must be at least 1"));
        }
        if self.tx_cap == TxCap::Limited(0) {
            return Err(ParamError::new("tx_cap", "must be at least 1 or unbounded"));
        }
        if !(self.holding_coeff >= 0.0) || !self.holding_coeff.is_finite() {
            return Err(ParamError::new("holding_coeff", "must be nonnegative"));
        }
        let e = self.energy.coeff();
        if !(e >= 0.0) || !e.is_finite() {
            return Err(ParamError::new("energy.coeff", "must be nonnegative"));
        }
        self.arrivals.validate()
    }

    pub fn energy_cost(&self, x: QueueState) -> f64 {
        self.energy.eval(service_amount(x, self))
    }
}

/// Arrival pmf folded at the buffer cap: `probs[k] = P(ξ = k)` for `k < M`
/// and `probs[M] = P(ξ ≥ M)`. Any base queue `b ≥ 0` plus `M` or more arrivals
/// saturates, so this folding makes next-state expectations exact.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrivalPmf {
    probs: Vec<f64>,
    // suffix[k] = P(ξ ≥ k) for k in 0..=M
    suffix: Vec<f64>,
}

impl ArrivalPmf {
    pub fn new(dist: &ArrivalDist, buffer_cap: u32) -> Self {
        let cap = buffer_cap as usize;
        let mut probs = vec![0.0; cap + 1];
        match dist {
            ArrivalDist::Poisson { mean } => {
                let ln_mean = mean.ln();
                let mut ln_fact = 0.0;
                let mut head = 0.0;
                for (k, p) in probs.iter_mut().enumerate().take(cap) {
                    if k > 0 {
                        ln_fact += (k as f64).ln();
                    }
                    *p = (-mean + k as f64 * ln_mean - ln_fact).exp();
                    head += *p;
                }
                probs[cap] = if *mean < cap as f64 {
                    // sum the tail directly; 1 - head loses precision here
                    let mut tail = 0.0;
                    let mut k = cap;
                    let mut lf = ln_fact + if cap > 0 { (cap as f64).ln() } else { 0.0 };
                    loop {
                        let term = (-mean + k as f64 * ln_mean - lf).exp();
                        tail += term;
                        if term < tail * 1e-18 || term == 0.0 {
                            break;
                        }
                        k += 1;
                        lf += (k as f64).ln();
                    }
                    tail
                } else {
                    (1.0 - head).max(0.0)
                };
            }
            ArrivalDist::Finite { probs: src } => {
                for (k, &p) in src.iter().enumerate() {
                    probs[k.min(cap)] += p;
                }
            }
        }
        let mut suffix = vec![0.0; cap + 1];
        let mut acc = 0.0;
        for k in (0..=cap).rev() {
            acc += probs[k];
            suffix[k] = acc;
        }
        Self { probs, suffix }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// P(ξ ≥ k), with the folded last entry standing for everything ≥ M.
    pub fn tail(&self, k: usize) -> f64 {
        self.suffix.get(k).copied().unwrap_or(0.0)
    }
}

/// A user's parameters together with its folded arrival pmf.
#[derive(Clone, Debug, PartialEq)]
pub struct UserModel {
    pub params: UserParams,
    pub pmf: ArrivalPmf,
}

impl UserModel {
    pub fn new(params: UserParams) -> Result<Self, ParamError> {
        params.validate()?;
        let pmf = ArrivalPmf::new(&params.arrivals, params.buffer_cap);
        Ok(Self { params, pmf })
    }

    /// Calls `visit(next_state, probability)` for each reachable next state
    /// from base `b = x − served` (at most one call per state).
    pub(crate) fn for_each_next(&self, base: QueueState, mut visit: impl FnMut(usize, f64)) {
        let cap = self.params.buffer_cap as usize;
        let b = base as usize;
        debug_assert!(b <= cap);
        let probs = self.pmf.probs();
        for (k, &p) in probs.iter().enumerate().take(cap - b) {
            visit(b + k, p);
        }
        visit(cap, self.pmf.tail(cap - b));
    }
}

/// Z = min(x, Ψ).
pub fn service_amount(x: QueueState, params: &UserParams) -> QueueState {
    params.tx_cap.min_with(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepOutcome {
    pub next: QueueState,
    pub dropped: u32,
    pub served: u32,
}

/// One slot of queue evolution: serve (if active), add arrivals, drop overflow.
pub fn queue_step(
    x: QueueState,
    active: bool,
    arrivals: u32,
    params: &UserParams,
) -> StepOutcome {
    let served = if active { service_amount(x, params) } else { 0 };
    let filled = u64::from(x - served) + u64::from(arrivals);
    let cap = u64::from(params.buffer_cap);
    let next = filled.min(cap) as u32;
    let dropped = (filled - u64::from(next)) as u32;
    StepOutcome {
        next,
        dropped,
        served,
    }
}

/// Exact distribution of the next queue length, as `(state, probability)`
/// pairs in ascending state order.
pub fn next_state_pmf(x: QueueState, active: bool, model: &UserModel) -> Vec<(QueueState, f64)> {
    let served = if active {
        service_amount(x, &model.params)
    } else {
        0
    };
    let mut out = Vec::new();
    model.for_each_next(x - served, |s, p| out.push((s as QueueState, p)));
    out
}

/// Exact Poisson variate with mean `l`.
pub fn sample_arrivals<R: Rng + ?Sized>(l: f64, rng: &mut R) -> u32 {
    let d = Poisson::new(l).expect("Poisson mean must be positive and finite");
    d.sample(rng) as u32
}

/// Arrival sampler bound to one user's distribution.
#[derive(Clone, Debug)]
pub enum ArrivalSampler {
    Poisson(Poisson<f64>),
    Finite(WeightedIndex<f64>),
}

impl ArrivalSampler {
    pub fn new(dist: &ArrivalDist) -> Result<Self, ParamError> {
        dist.validate()?;
        Ok(match dist {
            ArrivalDist::Poisson { mean } => ArrivalSampler::Poisson(
                Poisson::new(*mean).map_err(|e| ParamError::new("arrival_mean", e.to_string()))?,
            ),
            ArrivalDist::Finite { probs } => ArrivalSampler::Finite(
                WeightedIndex::new(probs.iter().copied())
                    .map_err(|e| ParamError::new("arrivals.probs", e.to_string()))?,
            ),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match self {
            ArrivalSampler::Poisson(d) => d.sample(rng) as u32,
            ArrivalSampler::Finite(d) => d.sample(rng) as u32,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn params(m: u32, cap: TxCap, mean: f64) -> UserParams {
        UserParams {
            buffer_cap: m,
            tx_cap: cap,
            arrivals: ArrivalDist::Poisson { mean },
            holding_coeff: 1.0,
            energy: EnergyFn::default(),
        }
    }

    #[test]
    fn service() {
        assert_eq!(service_amount(50, &params(100, TxCap::Limited(10), 1.0)), 10);
        assert_eq!(service_amount(5, &params(100, TxCap::Unbounded, 1.0)), 5);
        assert_eq!(service_amount(0, &params(100, TxCap::Limited(10), 1.0)), 0);
    }

    #[test]
    fn step_examples() {
        let p = params(100, TxCap::Unbounded, 1.0);
        let s = queue_step(5, true, 3, &p);
        assert_eq!((s.next, s.dropped, s.served), (3, 0, 5));
        let s = queue_step(98, false, 7, &p);
        assert_eq!((s.next, s.dropped, s.served), (100, 5, 0));
        let p = params(100, TxCap::Limited(10), 1.0);
        let s = queue_step(50, true, 0, &p);
        assert_eq!((s.next, s.dropped, s.served), (40, 0, 10));
    }

    #[test]
    fn pmf_tail_fold_hand_value() {
        let m = UserModel::new(params(1, TxCap::Unbounded, 4.0)).unwrap();
        let d = next_state_pmf(1, true, &m);
        assert_eq!(d.len(), 2);
        assert!((d[0].1 - (-4.0f64).exp()).abs() < 1e-15);
        assert!((d[1].1 - (1.0 - (-4.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn pmf_saturated_and_near_zero_rate() {
        let m = UserModel::new(params(10, TxCap::Unbounded, 3.0)).unwrap();
        let d = next_state_pmf(10, false, &m);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].0, 10);
        assert!((d[0].1 - 1.0).abs() < 1e-12);
        let m = UserModel::new(params(10, TxCap::Limited(2), 1e-9)).unwrap();
        let d = next_state_pmf(5, true, &m);
        assert_eq!(d[0].0, 3);
        assert!(d[0].1 > 1.0 - 1e-8);
    }

    #[test]
    fn pmf_sums_to_one_everywhere() {
        for &mean in &[0.3, 4.0, 12.5, 80.0, 150.0] {
            let m = UserModel::new(params(100, TxCap::Limited(7), mean)).unwrap();
            for x in 0..=100 {
                for active in [false, true] {
                    let total: f64 = next_state_pmf(x, active, &m).iter().map(|p| p.1).sum();
                    assert!((total - 1.0).abs() < 1e-12, "mean {mean} x {x}: {total}");
                }
            }
        }
    }

    #[test]
    fn finite_pmf_folds_into_cap() {
        let p = UserParams {
            arrivals: ArrivalDist::Finite {
                probs: vec![0.25, 0.25, 0.5],
            },
            ..params(1, TxCap::Unbounded, 1.0)
        };
        let m = UserModel::new(p).unwrap();
        assert_eq!(m.pmf.probs(), &[0.25, 0.75]);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(UserModel::new(params(0, TxCap::Unbounded, 1.0)).is_err());
        assert!(UserModel::new(params(5, TxCap::Limited(0), 1.0)).is_err());
        assert!(UserModel::new(params(5, TxCap::Unbounded, 0.0)).is_err());
        let mut p = params(5, TxCap::Unbounded, 1.0);
        p.holding_coeff = -1.0;
        assert!(UserModel::new(p).is_err());
    }

    #[test]
    fn poisson_sample_moments() {
        let mut rng = stream(1, Stream::Arrivals(0));
        let n = 1_000_000usize;
        let (mut s, mut s2) = (0.0f64, 0.0f64);
        for _ in 0..n {
            let v = f64::from(sample_arrivals(4.0, &mut rng));
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        // σ of the sample mean is sqrt(4/n); the variance estimator has
        // standard error sqrt((μ4 - σ⁴)/n) = sqrt((4 + 3·16 - 16)/n) for Poisson(4)
        assert!((mean - 4.0).abs() < 3.0 * (4.0 / n as f64).sqrt());
        assert!((var - 4.0).abs() < 3.0 * (36.0 / n as f64).sqrt());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a: Vec<u32> = {
            let mut r = stream(5, Stream::Arrivals(3));
            (0..100).map(|_| sample_arrivals(4.0, &mut r)).collect()
        };
        let b: Vec<u32> = {
            let mut r = stream(5, Stream::Arrivals(3));
            (0..100).map(|_| sample_arrivals(4.0, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn monte_carlo_matches_pmf() {
        let p = params(6, TxCap::Limited(2), 1.7);
        let m = UserModel::new(p.clone()).unwrap();
        let sampler = ArrivalSampler::new(&p.arrivals).unwrap();
        let mut rng = stream(11, Stream::Arrivals(0));
        let n = 200_000;
        for (x, active) in [(0, false), (3, true), (5, false), (6, true)] {
            let mut hist = [0usize; 7];
            for _ in 0..n {
                let s = queue_step(x, active, sampler.sample(&mut rng), &p);
                hist[s.next as usize] += 1;
            }
            for (state, prob) in next_state_pmf(x, active, &m) {
                let freq = hist[state as usize] as f64 / n as f64;
                let sd = (prob * (1.0 - prob) / n as f64).sqrt();
                assert!((freq - prob).abs() <= 4.0 * sd + 1e-12, "x={x} s={state}");
            }
        }
    }
}
