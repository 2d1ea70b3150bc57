//! Per-slot and time-averaged costs.

use crate::error::ParamError;
use crate::traffic::{QueueState, UserParams};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SlotCost {
    pub energy: f64,
    pub holding: f64,
    pub total: f64,
}

/// Energy Σ ν_i f_i(min(X_i, Ψ_i)) plus holding Σ C_i X_i, charged on the
/// pre-transition queue lengths.
pub fn slot_cost(states: &[QueueState], actives: &[bool], params: &[UserParams]) -> SlotCost {
    assert_eq!(states.len(), actives.len());
    assert_eq!(states.len(), params.len());
    let mut energy = 0.0;
    let mut holding = 0.0;
    for ((&x, &active), p) in states.iter().zip(actives).zip(params) {
        if active {
            energy += p.energy_cost(x);
        }
        holding += p.holding_coeff * f64::from(x);
    }
    SlotCost {
        energy,
        holding,
        total: energy + holding,
    }
}

pub fn running_average(accumulated: f64, n_slots: u64) -> Result<f64, ParamError> {
    if n_slots == 0 {
        return Err(ParamError::new("n_slots", "cannot average over zero slots"));
    }
    Ok(accumulated / n_slots as f64)
}

/// Accumulates slot totals after an optional burn-in.
#[derive(Clone, Debug, Default)]
pub struct CostAccumulator {
    burn_in: u64,
    seen: u64,
    pub energy: f64,
    pub holding: f64,
    pub total: f64,
    pub drops: f64,
    pub served: f64,
}

impl CostAccumulator {
    pub fn new(burn_in: u64) -> Self {
        Self {
            burn_in,
            ..Self::default()
        }
    }

    pub fn record(&mut self, cost: &SlotCost, dropped: u64, served: u64) {
        self.seen += 1;
        if self.seen <= self.burn_in {
            return;
        }
        self.energy += cost.energy;
        self.holding += cost.holding;
        self.total += cost.total;
        self.drops += dropped as f64;
        self.served += served as f64;
    }

    pub fn counted(&self) -> u64 {
        self.seen.saturating_sub(self.burn_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::{ArrivalDist, EnergyFn, TxCap};
    use proptest::prelude::*;

    fn user() -> UserParams {
        UserParams {
            buffer_cap: 100,
            tx_cap: TxCap::Unbounded,
            arrivals: ArrivalDist::Poisson { mean: 1.0 },
            holding_coeff: 1.0,
            energy: EnergyFn::Linear { coeff: 1.0 },
        }
    }

    #[test]
    fn slot_cost_examples() {
        let c = slot_cost(&[0, 0], &[false, false], &[user(), user()]);
        assert_eq!(c.total, 0.0);
        let c = slot_cost(&[10], &[false], &[user()]);
        assert_eq!(c.total, 10.0);
        let c = slot_cost(&[10], &[true], &[user()]);
        assert_eq!((c.energy, c.holding, c.total), (10.0, 10.0, 20.0));
    }

    #[test]
    fn averages() {
        assert_eq!(running_average(100.0, 10).unwrap(), 10.0);
        assert_eq!(running_average(0.0, 5).unwrap(), 0.0);
        assert!(running_average(1.0, 0).is_err());
        for n in 1..50u64 {
            let acc: f64 = (0..n).map(|_| 2.5).sum();
            assert!((running_average(acc, n).unwrap() - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn burn_in_skips_leading_slots() {
        let mut acc = CostAccumulator::new(2);
        let c = SlotCost {
            energy: 1.0,
            holding: 2.0,
            total: 3.0,
        };
        for _ in 0..5 {
            acc.record(&c, 1, 4);
        }
        assert_eq!(acc.counted(), 3);
        assert_eq!(acc.total, 9.0);
        assert_eq!(acc.drops, 3.0);
    }

    proptest! {
        #[test]
        fn average_is_order_independent(mut costs in prop::collection::vec(0u32..1000, 1..64), seed in any::<u64>()) {
            let n = costs.len() as u64;
            let a = running_average(costs.iter().map(|&c| f64::from(c)).sum(), n).unwrap();
            let len = costs.len();
            costs.rotate_left((seed % len as u64) as usize);
            costs.reverse();
            let b = running_average(costs.iter().map(|&c| f64::from(c)).sum(), n).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn uniform_holding_is_c_times_backlog(xs in prop::collection::vec(0u32..=100, 1..20), c in 0.0f64..5.0) {
            let params: Vec<_> = xs.iter().map(|_| UserParams { holding_coeff: c, ..user() }).collect();
            let actives = vec![false; xs.len()];
            let cost = slot_cost(&xs, &actives, &params);
            let backlog: u32 = xs.iter().sum();
            prop_assert!((cost.holding - c * f64::from(backlog)).abs() < 1e-9);
        }
    }
}
