//! Real-time market environment for a renewable producer with a battery.
//!
//! A slot proceeds as: the producer has bid `b_t` at gate closure, generation
//! `x_t` is realised, the battery absorbs or supplies part of the mismatch
//! according to the scaling factor `ρ_t`, and the dispatched power `x^D_t` is
//! settled at the single-price imbalance rule with penalty factor `α_pen`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeseries::{MarketRecord, ScenarioData};

/// Absolute slack on SOC limits. Drift inside it is clamped; anything larger is a defect.
pub const SOC_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid battery spec: {0}")]
    InvalidSpec(String),
    #[error("invalid market params: {0}")]
    InvalidParams(String),
    #[error("record slot {record} does not match state slot {state}")]
    SlotMismatch { record: u64, state: u64 },
    #[error("state of charge {soc} outside [{min}, {max}] at slot {slot}")]
    SocOutOfBounds { soc: f64, min: f64, max: f64, slot: u64 },
    #[error("invalid action: bid {bid}, scale {scale}")]
    InvalidAction { bid: f64, scale: f64 },
    #[error("episode already finished")]
    Finished,
}

/// Physical battery parameters. `e_max_mwh` is the sizing decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatterySpec {
    pub e_max_mwh: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    /// Charge power limit per MWh of capacity (MW/MWh).
    pub p_c_unit_max: f64,
    /// Discharge power limit per MWh of capacity (MW/MWh).
    pub p_d_unit_max: f64,
    /// Throughput cost per MWh charged or discharged.
    pub degradation_cost: f64,
}

impl Default for BatterySpec {
    fn default() -> Self {
        Self {
            e_max_mwh: 1.0,
            soc_min: 0.1,
            soc_max: 0.9,
            eta_c: 0.96,
            eta_d: 0.995,
            p_c_unit_max: 1.0,
            p_d_unit_max: 1.0,
            degradation_cost: 1.0,
        }
    }
}

impl BatterySpec {
    pub fn with_capacity(&self, e_max_mwh: f64) -> Self {
        Self { e_max_mwh, ..*self }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |m: String| Err(EnvError::InvalidSpec(m));
        if !(self.e_max_mwh.is_finite() && self.e_max_mwh > 0.0) {
            return fail(format!("e_max_mwh must be > 0, got {}", self.e_max_mwh));
        }
        if !(0.0 < self.soc_min && self.soc_min < self.soc_max && self.soc_max < 1.0) {
            return fail(format!(
                "need 0 < soc_min < soc_max < 1, got [{}, {}]",
                self.soc_min, self.soc_max
            ));
        }
        for (name, eta) in [("eta_c", self.eta_c), ("eta_d", self.eta_d)] {
            if !(eta > 0.0 && eta <= 1.0) {
                return fail(format!("{name} must lie in (0, 1], got {eta}"));
            }
        }
        for (name, p) in [("p_c_unit_max", self.p_c_unit_max), ("p_d_unit_max", self.p_d_unit_max)] {
            if !(p.is_finite() && p > 0.0) {
                return fail(format!("{name} must be > 0, got {p}"));
            }
        }
        if !(self.degradation_cost.is_finite() && self.degradation_cost >= 0.0) {
            return fail(format!("degradation_cost must be >= 0, got {}", self.degradation_cost));
        }
        Ok(())
    }

    pub fn p_c_max(&self) -> f64 {
        self.p_c_unit_max * self.e_max_mwh
    }

    pub fn p_d_max(&self) -> f64 {
        self.p_d_unit_max * self.e_max_mwh
    }

    pub fn soc_midpoint(&self) -> f64 {
        0.5 * (self.soc_min + self.soc_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    pub alpha_pen: f64,
    pub slot_duration_h: f64,
}

impl MarketParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.alpha_pen.is_finite() && self.alpha_pen >= 0.0) {
            return Err(EnvError::InvalidParams(format!("alpha_pen must be >= 0, got {}", self.alpha_pen)));
        }
        if !(self.slot_duration_h.is_finite() && self.slot_duration_h > 0.0) {
            return Err(EnvError::InvalidParams(format!(
                "slot_duration_h must be > 0, got {}",
                self.slot_duration_h
            )));
        }
        Ok(())
    }
}

/// What the agent can see at the start of a slot: the previous slot's
/// generation and price, and the current state of charge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub slot: u64,
    pub soc: f64,
    pub last_generation: f64,
    pub last_price: f64,
}

impl EnvState {
    pub fn initial(slot: u64, soc: f64) -> Self {
        Self {
            slot,
            soc,
            last_generation: 0.0,
            last_price: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub bid_mw: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: f64,
    pub net_profit: f64,
    pub market_revenue: f64,
    pub dispatched_mw: f64,
    pub p_c_mw: f64,
    pub p_d_mw: f64,
    pub deviation_penalty: f64,
    pub degradation: f64,
    /// Revenue had all generation been sold directly, `λ_t x_t Δt`.
    pub baseline_revenue: f64,
    pub next_state: EnvState,
}

/// Charging headroom `min(E_max (S^max − soc)/Δt, P^c_max)`, never negative.
pub fn charge_bound(state: &EnvState, spec: &BatterySpec, params: &MarketParams) -> f64 {
    let headroom = spec.e_max_mwh * (spec.soc_max - state.soc) / params.slot_duration_h;
    headroom.min(spec.p_c_max()).max(0.0)
}

/// Discharging headroom `min(η^d E_max (soc − S^min)/Δt, P^d_max)`, never negative.
///
/// The `η^d` factor keeps a saturating discharge from drawing the SOC below
/// `S^min`; without it the loss term `p^d/η^d` overshoots the window.
pub fn discharge_bound(state: &EnvState, spec: &BatterySpec, params: &MarketParams) -> f64 {
    let headroom = spec.eta_d * spec.e_max_mwh * (state.soc - spec.soc_min) / params.slot_duration_h;
    headroom.min(spec.p_d_max()).max(0.0)
}

/// Maps `(b_t, ρ_t)` and realised generation to `(p^c_t, p^d_t)`.
///
/// Surplus `x_t − b_t` is charged and deficit `b_t − x_t` discharged, both
/// scaled by `ρ_t` and clamped to the SOC-aware bounds.
pub fn apply_action(
    state: &EnvState,
    action: &Action,
    generation_mw: f64,
    spec: &BatterySpec,
    params: &MarketParams,
) -> (f64, f64) {
    let surplus = action.scale * (generation_mw - action.bid_mw);
    let p_c = surplus.max(0.0).min(charge_bound(state, spec, params));
    let p_d = (-surplus).max(0.0).min(discharge_bound(state, spec, params));
    (p_c, p_d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settlement {
    pub market_revenue: f64,
    pub deviation_penalty: f64,
}

/// Single-price imbalance settlement `F^m = λ (x^D − α |b − x^D|) Δt`.
///
/// The priced penalty `λ α |b − x^D| Δt` is also returned on its own.
pub fn settle(bid_mw: f64, dispatched_mw: f64, price: f64, params: &MarketParams) -> Settlement {
    let dt = params.slot_duration_h;
    let deviation_penalty = price * params.alpha_pen * (bid_mw - dispatched_mw).abs() * dt;
    Settlement {
        market_revenue: price * dispatched_mw * dt - deviation_penalty,
        deviation_penalty,
    }
}

/// Advances one slot. `record.slot` must equal `state.slot`.
pub fn step(
    state: &EnvState,
    action: &Action,
    record: &MarketRecord,
    spec: &BatterySpec,
    params: &MarketParams,
) -> Result<StepOutcome, EnvError> {
    if record.slot != state.slot {
        return Err(EnvError::SlotMismatch {
            record: record.slot,
            state: state.slot,
        });
    }
    if !(action.bid_mw.is_finite() && action.bid_mw >= 0.0 && action.scale.is_finite() && action.scale >= 0.0) {
        return Err(EnvError::InvalidAction {
            bid: action.bid_mw,
            scale: action.scale,
        });
    }
    check_soc(state.soc, spec, state.slot)?;

    let dt = params.slot_duration_h;
    let x = record.generation_mw;
    let price = record.price;
    let (p_c, p_d) = apply_action(state, action, x, spec, params);

    let dispatched = x - p_c + p_d;
    let next_soc = state.soc + spec.eta_c * p_c * dt / spec.e_max_mwh
        - p_d * dt / (spec.eta_d * spec.e_max_mwh);
    let next_soc = check_soc(next_soc, spec, state.slot)?;

    let s = settle(action.bid_mw, dispatched, price, params);
    let degradation = spec.degradation_cost * (p_c + p_d) * dt;
    let net_profit = s.market_revenue - degradation;
    let baseline_revenue = price * x * dt;

    Ok(StepOutcome {
        reward: net_profit - baseline_revenue,
        net_profit,
        market_revenue: s.market_revenue,
        dispatched_mw: dispatched,
        p_c_mw: p_c,
        p_d_mw: p_d,
        deviation_penalty: s.deviation_penalty,
        degradation,
        baseline_revenue,
        next_state: EnvState {
            slot: state.slot + 1,
            soc: next_soc,
            last_generation: x,
            last_price: price,
        },
    })
}

fn check_soc(soc: f64, spec: &BatterySpec, slot: u64) -> Result<f64, EnvError> {
    if !soc.is_finite() || soc < spec.soc_min - SOC_TOLERANCE || soc > spec.soc_max + SOC_TOLERANCE {
        return Err(EnvError::SocOutOfBounds {
            soc,
            min: spec.soc_min,
            max: spec.soc_max,
            slot,
        });
    }
    Ok(soc.clamp(spec.soc_min, spec.soc_max))
}

/// Running totals of one rollout, used for the revenue decomposition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTotals {
    pub slots: usize,
    pub total_reward: f64,
    pub net_revenue: f64,
    pub baseline_revenue: f64,
    pub market_revenue: f64,
    pub deviation_penalty: f64,
    pub degradation: f64,
    pub charged_mwh: f64,
    pub discharged_mwh: f64,
    pub negative_price_slots: usize,
}

impl EpisodeTotals {
    pub fn add(&mut self, out: &StepOutcome, price: f64, dt: f64) {
        self.slots += 1;
        self.total_reward += out.reward;
        self.net_revenue += out.net_profit;
        self.baseline_revenue += out.baseline_revenue;
        self.market_revenue += out.market_revenue;
        self.deviation_penalty += out.deviation_penalty;
        self.degradation += out.degradation;
        self.charged_mwh += out.p_c_mw * dt;
        self.discharged_mwh += out.p_d_mw * dt;
        if price < 0.0 {
            self.negative_price_slots += 1;
        }
    }

    /// `|Σr + Σλx Δt − ΣF|`, zero up to rounding.
    pub fn identity_residual(&self) -> f64 {
        (self.total_reward + self.baseline_revenue - self.net_revenue).abs()
    }
}

/// Stateful wrapper stepping through a contiguous scenario slice.
#[derive(Debug, Clone)]
pub struct MarketEnv<'a> {
    records: &'a [MarketRecord],
    spec: BatterySpec,
    params: MarketParams,
    cursor: usize,
    state: EnvState,
}

impl<'a> MarketEnv<'a> {
    pub fn new(
        records: &'a [MarketRecord],
        spec: BatterySpec,
        params: MarketParams,
        initial_soc: f64,
    ) -> Result<Self, EnvError> {
        spec.validate()?;
        params.validate()?;
        let first = records.first().ok_or(EnvError::Finished)?;
        check_soc(initial_soc, &spec, first.slot)?;
        Ok(Self {
            records,
            spec,
            params,
            cursor: 0,
            state: EnvState::initial(first.slot, initial_soc),
        })
    }

    pub fn over_scenario(
        data: &'a ScenarioData,
        spec: BatterySpec,
        alpha_pen: f64,
        initial_soc: f64,
    ) -> Result<Self, EnvError> {
        let params = MarketParams {
            alpha_pen,
            slot_duration_h: data.slot_duration_h(),
        };
        Self::new(data.records(), spec, params, initial_soc)
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn spec(&self) -> &BatterySpec {
        &self.spec
    }

    pub fn params(&self) -> &MarketParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.records.len() - self.cursor
    }

    pub fn is_done(&self) -> bool {
        self.cursor >= self.records.len()
    }

    pub fn current_record(&self) -> Option<&MarketRecord> {
        self.records.get(self.cursor)
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        let record = *self.records.get(self.cursor).ok_or(EnvError::Finished)?;
        let mut out = step(&self.state, action, &record, &self.spec, &self.params)?;
        self.cursor += 1;
        if let Some(next) = self.records.get(self.cursor) {
            out.next_state.slot = next.slot;
        }
        self.state = out.next_state;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_params() -> MarketParams {
        MarketParams {
            alpha_pen: 1.0,
            slot_duration_h: 1.0,
        }
    }

    fn state(soc: f64) -> EnvState {
        EnvState::initial(0, soc)
    }

    #[test]
    fn charge_bound_cases() {
        let spec = BatterySpec::default();
        let p = unit_params();
        assert_eq!(charge_bound(&state(spec.soc_max), &spec, &p), 0.0);
        assert!((charge_bound(&state(0.5), &spec, &p) - 0.4).abs() < 1e-15);
        let slow = BatterySpec {
            p_c_unit_max: 0.5,
            ..spec
        };
        assert_eq!(charge_bound(&state(0.1), &slow, &p), 0.5);
    }

    #[test]
    fn discharge_bound_cases() {
        let spec = BatterySpec {
            eta_d: 1.0,
            ..BatterySpec::default()
        };
        let p = unit_params();
        assert_eq!(discharge_bound(&state(spec.soc_min), &spec, &p), 0.0);
        assert!((discharge_bound(&state(0.5), &spec, &p) - 0.4).abs() < 1e-15);
        let big = BatterySpec {
            e_max_mwh: 2.0,
            p_d_unit_max: 0.3,
            ..spec
        };
        assert!((discharge_bound(&state(0.9), &big, &p) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn saturating_discharge_lands_on_soc_min() {
        let spec = BatterySpec::default();
        let p = unit_params();
        let s = state(0.3);
        let bound = discharge_bound(&s, &spec, &p);
        assert!((bound - 0.995 * 0.2).abs() < 1e-15);
        let record = MarketRecord {
            slot: 0,
            generation_mw: 0.0,
            price: 1.0,
        };
        let out = step(&s, &Action { bid_mw: 0.6, scale: 1.0 }, &record, &spec, &p).unwrap();
        assert_eq!(out.p_d_mw, bound);
        assert!((out.next_state.soc - spec.soc_min).abs() < 1e-15);
    }

    #[test]
    fn apply_action_cases() {
        let spec = BatterySpec {
            eta_d: 1.0,
            ..BatterySpec::default()
        };
        let p = unit_params();
        let s = state(0.5);
        let perfect = Action { bid_mw: 0.4, scale: 1.0 };
        assert_eq!(apply_action(&s, &perfect, 0.4, &spec, &p), (0.0, 0.0));

        let (pc, pd) = apply_action(&s, &Action { bid_mw: 0.2, scale: 1.0 }, 0.5, &spec, &p);
        assert!((pc - 0.3).abs() < 1e-15);
        assert_eq!(pd, 0.0);

        // bounds (0.4, 0.2): soc such that discharge headroom is 0.2
        let s = state(0.3);
        assert!((discharge_bound(&s, &spec, &p) - 0.2).abs() < 1e-12);
        let (pc, pd) = apply_action(&s, &Action { bid_mw: 0.6, scale: 0.5 }, 0.1, &spec, &p);
        assert_eq!(pc, 0.0);
        assert!((pd - 0.2).abs() < 1e-12);
    }

    #[test]
    fn settle_cases() {
        let p = unit_params();
        let s = settle(0.4, 0.4, 10.0, &p);
        assert_eq!(s.market_revenue, 4.0);
        assert_eq!(s.deviation_penalty, 0.0);

        let s = settle(0.5, 0.4, 10.0, &p);
        assert!((s.market_revenue - 3.0).abs() < 1e-12);
        assert!((s.deviation_penalty - 1.0).abs() < 1e-12);

        let s = settle(0.4, 0.5, 10.0, &p);
        assert!((s.market_revenue - 4.0).abs() < 1e-12);
        // two-price form: λb + λ_sur (x^D − b)^+ − λ_def (b − x^D)^+
        let two_price = 10.0 * 0.4 + (1.0 - 1.0) * 10.0 * 0.1;
        assert!((s.market_revenue - two_price).abs() < 1e-12);
    }

    #[test]
    fn identity_step_keeps_soc() {
        let spec = BatterySpec::default();
        let rec = MarketRecord {
            slot: 0,
            generation_mw: 0.3,
            price: 12.0,
        };
        let out = step(&state(0.5), &Action { bid_mw: 0.3, scale: 0.0 }, &rec, &spec, &unit_params()).unwrap();
        assert_eq!((out.p_c_mw, out.p_d_mw), (0.0, 0.0));
        assert_eq!(out.next_state.soc, 0.5);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn soc_update_hand_value() {
        let spec = BatterySpec::default();
        // x − b = 0.1 with ρ = 1 gives p_c = 0.1
        let rec = MarketRecord {
            slot: 0,
            generation_mw: 0.3,
            price: 5.0,
        };
        let out = step(&state(0.5), &Action { bid_mw: 0.2, scale: 1.0 }, &rec, &spec, &unit_params()).unwrap();
        assert!((out.p_c_mw - 0.1).abs() < 1e-15);
        assert!((out.next_state.soc - 0.596).abs() < 1e-12);
    }

    #[test]
    fn full_outcome_hand_chain() {
        let spec = BatterySpec::default();
        let rec = MarketRecord {
            slot: 0,
            generation_mw: 0.5,
            price: 10.0,
        };
        let out = step(&state(0.5), &Action { bid_mw: 0.2, scale: 1.0 }, &rec, &spec, &unit_params()).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(out.p_c_mw, 0.3));
        assert!(close(out.dispatched_mw, 0.2));
        assert!(close(out.market_revenue, 2.0));
        assert!(close(out.degradation, 0.3));
        assert!(close(out.net_profit, 1.7));
        assert!(close(out.reward, -3.3));
        assert!(close(out.next_state.soc, 0.5 + 0.96 * 0.3));
    }

    #[test]
    fn slot_mismatch_and_bad_soc_are_errors() {
        let spec = BatterySpec::default();
        let rec = MarketRecord {
            slot: 3,
            generation_mw: 0.1,
            price: 1.0,
        };
        let a = Action { bid_mw: 0.0, scale: 0.0 };
        assert!(matches!(
            step(&state(0.5), &a, &rec, &spec, &unit_params()),
            Err(EnvError::SlotMismatch { .. })
        ));
        let bad = EnvState::initial(3, 0.95);
        assert!(matches!(
            step(&bad, &a, &rec, &spec, &unit_params()),
            Err(EnvError::SocOutOfBounds { .. })
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(BatterySpec::default().validate().is_ok());
        let bad = BatterySpec {
            soc_min: 0.0,
            ..BatterySpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = BatterySpec {
            eta_d: 1.2,
            ..BatterySpec::default()
        };
        assert!(bad.validate().is_err());
    }

    prop_compose! {
        fn any_spec()(e in 0.05f64..3.0, lo in 0.05f64..0.4, hi in 0.6f64..0.95,
                      ec in 0.5f64..=1.0, ed in 0.5f64..=1.0,
                      pc in 0.1f64..2.0, pd in 0.1f64..2.0, beta in 0.0f64..3.0) -> BatterySpec {
            BatterySpec { e_max_mwh: e, soc_min: lo, soc_max: hi, eta_c: ec, eta_d: ed,
                          p_c_unit_max: pc, p_d_unit_max: pd, degradation_cost: beta }
        }
    }

    proptest! {
        #[test]
        fn rollouts_respect_soc_and_exclusivity(
            spec in any_spec(),
            dt in prop::sample::select(vec![0.25, 0.5, 1.0]),
            steps in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.5, -5.0f64..20.0), 1..60),
        ) {
            let params = MarketParams { alpha_pen: 0.7, slot_duration_h: dt };
            let mut s = EnvState::initial(0, spec.soc_midpoint());
            let start = s.soc;
            let mut stored = 0.0;
            for (t, (x, b, rho, price)) in steps.iter().enumerate() {
                let rec = MarketRecord { slot: t as u64, generation_mw: *x, price: *price };
                let out = step(&s, &Action { bid_mw: *b, scale: *rho }, &rec, &spec, &params).unwrap();
                prop_assert!(!(out.p_c_mw > 0.0 && out.p_d_mw > 0.0));
                prop_assert!(out.next_state.soc >= spec.soc_min && out.next_state.soc <= spec.soc_max);
                // reward − F depends only on (x, λ)
                prop_assert!((out.reward - out.net_profit + price * x * dt).abs() < 1e-12);
                stored += (spec.eta_c * out.p_c_mw - out.p_d_mw / spec.eta_d) * dt;
                s = out.next_state;
            }
            prop_assert!((spec.e_max_mwh * (s.soc - start) - stored).abs() < 1e-9);
        }

        #[test]
        fn settlement_matches_two_price_form(
            price in 0.0f64..100.0, b in 0.0f64..2.0, xd in -1.0f64..2.0, alpha in 0.0f64..1.5,
        ) {
            let params = MarketParams { alpha_pen: alpha, slot_duration_h: 1.0 };
            let s = settle(b, xd, price, &params);
            let sur = (1.0 - alpha) * price;
            let def = (1.0 + alpha) * price;
            let two = price * b + sur * (xd - b).max(0.0) - def * (b - xd).max(0.0);
            let scale = s.market_revenue.abs().max(two.abs()).max(1e-300);
            prop_assert!((s.market_revenue - two).abs() / scale < 1e-12 || (s.market_revenue - two).abs() < 1e-12);
        }
    }
}
