//! Reference models shared by the integration tests, written without the
//! crate's environment code.
#![allow(dead_code)]

use bessco_core::market_env::BatterySpec;
use bessco_core::timeseries::MarketRecord;

/// One one-hour slot of the battery/market model. Returns `(F, next soc)`.
pub fn oracle_step(spec: &BatterySpec, alpha: f64, soc: f64, action: (f64, f64), x: f64, price: f64) -> (f64, f64) {
    let (bid, scale) = action;
    let e = spec.e_max_mwh;
    let surplus = scale * (x - bid);
    let charge_room = (e * (spec.soc_max - soc)).min(spec.p_c_unit_max * e).max(0.0);
    let discharge_room = (spec.eta_d * e * (soc - spec.soc_min)).min(spec.p_d_unit_max * e).max(0.0);
    let p_c = surplus.max(0.0).min(charge_room);
    let p_d = (-surplus).max(0.0).min(discharge_room);
    let dispatched = x - p_c + p_d;
    let profit = price * (dispatched - alpha * (bid - dispatched).abs()) - spec.degradation_cost * (p_c + p_d);
    let next = (soc + spec.eta_c * p_c / e - p_d / (spec.eta_d * e)).clamp(spec.soc_min, spec.soc_max);
    (profit, next)
}

/// Backward induction over 101 SOC levels with linear interpolation, then a
/// forward pass of the resulting policy from the true initial SOC. Returns ΣF.
pub fn dp_optimum(records: &[MarketRecord], spec: &BatterySpec, alpha: f64, actions: &[(f64, f64)], soc0: f64) -> f64 {
    const LEVELS: usize = 101;
    let span = spec.soc_max - spec.soc_min;
    let level = |k: usize| spec.soc_min + span * k as f64 / (LEVELS - 1) as f64;
    let interp = |v: &[f64], soc: f64| {
        let pos = ((soc - spec.soc_min) / span * (LEVELS - 1) as f64).clamp(0.0, (LEVELS - 1) as f64);
        let lo = (pos.floor() as usize).min(LEVELS - 2);
        v[lo] + (v[lo + 1] - v[lo]) * (pos - lo as f64)
    };
    let best = |v_next: &[f64], soc: f64, r: &MarketRecord| {
        actions
            .iter()
            .map(|&a| {
                let (profit, next) = oracle_step(spec, alpha, soc, a, r.generation_mw, r.price);
                (profit + interp(v_next, next), profit, next)
            })
            .fold((f64::NEG_INFINITY, 0.0, 0.0), |acc, c| if c.0 > acc.0 { c } else { acc })
    };
    let mut values = vec![vec![0.0; LEVELS]; records.len() + 1];
    for t in (0..records.len()).rev() {
        for k in 0..LEVELS {
            values[t][k] = best(&values[t + 1], level(k), &records[t]).0;
        }
    }
    let mut soc = soc0;
    let mut total = 0.0;
    for (t, r) in records.iter().enumerate() {
        let (_, profit, next) = best(&values[t + 1], soc, r);
        total += profit;
        soc = next;
    }
    total
}
