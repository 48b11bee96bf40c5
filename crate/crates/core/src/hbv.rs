//! The HBV conceptual rainfall-runoff model on the tape.
//!
//! One call to [`step`] advances the snow routine, the soil-moisture routine,
//! the two groundwater zones and the triangular routing buffer by one day.
//! Every arithmetic operation is recorded, so the gradient of any function of
//! the simulated discharge is available with respect to the parameters, the
//! initial state, and anything upstream of them (a parameter network, say).
//!
//! Update order within a day:
//!
//! 1. rain `= P * sigmoid((T - TT) / 0.5)`, snowfall `= P - rain`
//! 2. melt `= min(CFMAX * max(T - TT, 0), SP)`,
//!    refreeze `= min(CFR * CFMAX * max(TT - T, 0), WC)`; liquid water in
//!    excess of `CWH * SP` leaves the pack
//! 3. recharge `= (rain + outflow) * (SM / FC)^BETA`; soil water above `FC`
//!    joins the recharge; ET `= min(PET * min(SM / (FC * LP), 1), SM)`
//! 4. upper zone: percolation `= min(PERC, SUZ)`, then
//!    `Q0 = K0 * max(SUZ - UZL, 0)` and `Q1 = K1 * SUZ` from the same storage
//! 5. lower zone: `Q2 = K2 * SLZ`
//! 6. `Q0 + Q1 + Q2` enters the routing buffer
//!
//! `Q0` is capped at `SUZ - Q1`; the recession bounds allow `K0 + K1 > 1`.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Width in degrees Celsius of the smooth rain/snow partition.
pub const PARTITION_WIDTH: f64 = 0.5;

/// Length of the routing buffer in days.
pub const ROUTING_LEN: usize = 7;

pub const PARAM_COUNT: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamName {
    Tt,
    Cfmax,
    Cfr,
    Cwh,
    Fc,
    Beta,
    Lp,
    Perc,
    Uzl,
    K0,
    K1,
    K2,
    Maxbas,
}

impl ParamName {
    pub const ALL: [ParamName; PARAM_COUNT] = [
        ParamName::Tt,
        ParamName::Cfmax,
        ParamName::Cfr,
        ParamName::Cwh,
        ParamName::Fc,
        ParamName::Beta,
        ParamName::Lp,
        ParamName::Perc,
        ParamName::Uzl,
        ParamName::K0,
        ParamName::K1,
        ParamName::K2,
        ParamName::Maxbas,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            ParamName::Tt => "TT",
            ParamName::Cfmax => "CFMAX",
            ParamName::Cfr => "CFR",
            ParamName::Cwh => "CWH",
            ParamName::Fc => "FC",
            ParamName::Beta => "BETA",
            ParamName::Lp => "LP",
            ParamName::Perc => "PERC",
            ParamName::Uzl => "UZL",
            ParamName::K0 => "K0",
            ParamName::K1 => "K1",
            ParamName::K2 => "K2",
            ParamName::Maxbas => "MAXBAS",
        }
    }

    /// Calibration range `(lo, hi)`.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ParamName::Tt => (-2.5, 2.5),
            ParamName::Cfmax => (0.5, 10.0),
            ParamName::Cfr => (0.0, 0.1),
            ParamName::Cwh => (0.0, 0.2),
            ParamName::Fc => (50.0, 1000.0),
            ParamName::Beta => (1.0, 6.0),
            ParamName::Lp => (0.2, 1.0),
            ParamName::Perc => (0.0, 10.0),
            ParamName::Uzl => (0.0, 100.0),
            ParamName::K0 => (0.05, 0.9),
            ParamName::K1 => (0.01, 0.5),
            ParamName::K2 => (0.001, 0.2),
            ParamName::Maxbas => (1.0, 7.0),
        }
    }
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ParamName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamName::ALL
            .into_iter()
            .find(|p| p.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown HBV parameter `{s}`")))
    }
}

/// The thirteen HBV parameters. `T` is `f64` for plain values and [`Var`]
/// when the parameters are recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HbvParameters<T = f64> {
    pub tt: T,
    pub cfmax: T,
    pub cfr: T,
    pub cwh: T,
    pub fc: T,
    pub beta: T,
    pub lp: T,
    pub perc: T,
    pub uzl: T,
    pub k0: T,
    pub k1: T,
    pub k2: T,
    pub maxbas: T,
}

impl<T: Copy> HbvParameters<T> {
    pub fn from_array(a: [T; PARAM_COUNT]) -> Self {
        let [tt, cfmax, cfr, cwh, fc, beta, lp, perc, uzl, k0, k1, k2, maxbas] = a;
        Self {
            tt,
            cfmax,
            cfr,
            cwh,
            fc,
            beta,
            lp,
            perc,
            uzl,
            k0,
            k1,
            k2,
            maxbas,
        }
    }

    pub fn to_array(&self) -> [T; PARAM_COUNT] {
        [
            self.tt,
            self.cfmax,
            self.cfr,
            self.cwh,
            self.fc,
            self.beta,
            self.lp,
            self.perc,
            self.uzl,
            self.k0,
            self.k1,
            self.k2,
            self.maxbas,
        ]
    }

    pub fn get(&self, name: ParamName) -> T {
        self.to_array()[name.index()]
    }

    pub fn set(&mut self, name: ParamName, value: T) {
        let mut a = self.to_array();
        a[name.index()] = value;
        *self = Self::from_array(a);
    }

    pub fn map<U: Copy>(&self, mut f: impl FnMut(ParamName, T) -> U) -> HbvParameters<U> {
        let a = self.to_array();
        HbvParameters::from_array(std::array::from_fn(|i| f(ParamName::ALL[i], a[i])))
    }
}

impl HbvParameters<f64> {
    pub fn midpoints() -> Self {
        Self::from_array(ParamName::ALL.map(|p| {
            let (lo, hi) = p.bounds();
            0.5 * (lo + hi)
        }))
    }

    pub fn validate(&self) -> Result<()> {
        for p in ParamName::ALL {
            let v = self.get(p);
            let (lo, hi) = p.bounds();
            if !(lo..=hi).contains(&v) {
                return Err(Error::Config(format!("{p} = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// The usual recession ordering K0 > K1 > K2 is not required.
    pub fn recession_order_warning(&self) -> Option<String> {
        if self.k0 > self.k1 && self.k1 > self.k2 {
            None
        } else {
            Some(format!(
                "recession coefficients not ordered: K0 = {}, K1 = {}, K2 = {}",
                self.k0, self.k1, self.k2
            ))
        }
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> HbvParameters<Var<'t>> {
        self.map(|_, v| tape.constant(v))
    }
}

impl<'t> HbvParameters<Var<'t>> {
    pub fn values(&self) -> HbvParameters<f64> {
        self.map(|_, v| v.value())
    }
}

/// Storages in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HbvState<T = f64> {
    pub sp: T,
    pub wc: T,
    pub sm: T,
    pub suz: T,
    pub slz: T,
    /// `routing[k]` leaves the catchment `k` days from now.
    pub routing: [T; ROUTING_LEN],
}

impl HbvState<f64> {
    pub fn empty() -> Self {
        Self {
            sp: 0.0,
            wc: 0.0,
            sm: 0.0,
            suz: 0.0,
            slz: 0.0,
            routing: [0.0; ROUTING_LEN],
        }
    }

    /// Storage outside the routing buffer.
    pub fn stored(&self) -> f64 {
        self.sp + self.wc + self.sm + self.suz + self.slz
    }

    pub fn in_flight(&self) -> f64 {
        self.routing.iter().sum()
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> HbvState<Var<'t>> {
        HbvState {
            sp: tape.constant(self.sp),
            wc: tape.constant(self.wc),
            sm: tape.constant(self.sm),
            suz: tape.constant(self.suz),
            slz: tape.constant(self.slz),
            routing: self.routing.map(|v| tape.constant(v)),
        }
    }
}

impl Default for HbvState<f64> {
    fn default() -> Self {
        Self::empty()
    }
}

impl<'t> HbvState<Var<'t>> {
    pub fn values(&self) -> HbvState<f64> {
        HbvState {
            sp: self.sp.value(),
            wc: self.wc.value(),
            sm: self.sm.value(),
            suz: self.suz.value(),
            slz: self.slz.value(),
            routing: self.routing.map(|v| v.value()),
        }
    }
}

/// Daily forcing: precipitation and PET in mm/day, temperature in degrees C.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForcingRecord {
    pub p: f64,
    pub t: f64,
    pub pet: f64,
}

impl ForcingRecord {
    pub fn new(p: f64, t: f64, pet: f64) -> Result<Self> {
        if !(p >= 0.0 && pet >= 0.0 && t.is_finite() && p.is_finite() && pet.is_finite()) {
            return Err(Error::Config(format!("invalid forcing P = {p}, T = {t}, PET = {pet}")));
        }
        Ok(Self { p, t, pet })
    }
}

/// Daily fluxes in mm/day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxRecord<T = f64> {
    pub rain: T,
    pub snowfall: T,
    pub melt: T,
    pub refreeze: T,
    pub recharge: T,
    pub et: T,
    pub percolation: T,
    pub q0: T,
    pub q1: T,
    pub q2: T,
    pub q_generated: T,
    pub q_routed: T,
}

impl<T: Copy> FluxRecord<T> {
    pub fn to_array(&self) -> [T; 12] {
        [
            self.rain,
            self.snowfall,
            self.melt,
            self.refreeze,
            self.recharge,
            self.et,
            self.percolation,
            self.q0,
            self.q1,
            self.q2,
            self.q_generated,
            self.q_routed,
        ]
    }
}

impl<'t> FluxRecord<Var<'t>> {
    pub fn values(&self) -> FluxRecord<f64> {
        FluxRecord {
            rain: self.rain.value(),
            snowfall: self.snowfall.value(),
            melt: self.melt.value(),
            refreeze: self.refreeze.value(),
            recharge: self.recharge.value(),
            et: self.et.value(),
            percolation: self.percolation.value(),
            q0: self.q0.value(),
            q1: self.q1.value(),
            q2: self.q2.value(),
            q_generated: self.q_generated.value(),
            q_routed: self.q_routed.value(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput<T = f64> {
    /// Routed discharge, mm/day.
    pub discharge: Vec<T>,
    pub fluxes: Vec<FluxRecord<T>>,
    /// State after every day (index `t` holds the state at the end of day `t`).
    pub states: Vec<HbvState<T>>,
    pub final_state: HbvState<T>,
}

impl<'t> SimulationOutput<Var<'t>> {
    pub fn values(&self) -> SimulationOutput<f64> {
        SimulationOutput {
            discharge: self.discharge.iter().map(Var::value).collect(),
            fluxes: self.fluxes.iter().map(FluxRecord::values).collect(),
            states: self.states.iter().map(HbvState::values).collect(),
            final_state: self.final_state.values(),
        }
    }
}

impl SimulationOutput<f64> {
    pub fn series(&self, f: impl Fn(&FluxRecord<f64>) -> f64) -> Vec<f64> {
        self.fluxes.iter().map(f).collect()
    }
}

/// Replacement hooks for individual HBV processes.
///
/// Returning `Ok(None)` keeps the standard process law.
pub trait ProcessOverrides<'t> {
    /// Replaces `(SM / FC)^BETA`; `soil_fraction` is `SM / FC` in `[0, 1]` and
    /// the result must lie in `[0, 1]`.
    fn recharge_fraction(&self, soil_fraction: Var<'t>) -> Result<Option<Var<'t>>> {
        let _ = soil_fraction;
        Ok(None)
    }

    /// Replaces `min(PERC, SUZ)` by `min(PERC * f, SUZ)`, where `f` in
    /// `[0, 1]` is returned for `upper_fraction = SUZ / (1 + SUZ)`.
    fn percolation_fraction(&self, upper_fraction: Var<'t>) -> Result<Option<Var<'t>>> {
        let _ = upper_fraction;
        Ok(None)
    }
}

/// The unmodified HBV process laws.
#[derive(Debug, Clone, Copy, Default)]
pub struct StandardProcesses;

impl<'t> ProcessOverrides<'t> for StandardProcesses {}

/// Cumulative distribution of the unit triangle on `[0, m]` at `t`.
fn triangle_cdf<'t>(tape: &'t Tape, m: Var<'t>, t: f64) -> Result<Var<'t>> {
    let mv = m.value();
    if t <= 0.0 {
        return Ok(tape.constant(0.0));
    }
    if t >= mv {
        tape.record_branch(2);
        return Ok(tape.constant(1.0));
    }
    let inv_m2 = m.square().pow_const(-1.0)?;
    if t <= 0.5 * mv {
        tape.record_branch(0);
        Ok(inv_m2 * (2.0 * t * t))
    } else {
        tape.record_branch(1);
        let gap = m - t;
        Ok(1.0 - (gap.square() * inv_m2) * 2.0)
    }
}

/// Triangular unit-hydrograph weights for a base length `maxbas` in `[1, 7]`,
/// normalized to sum to one.
pub fn routing_weights<'t>(maxbas: Var<'t>) -> Result<[Var<'t>; ROUTING_LEN]> {
    let m = maxbas.value();
    let (lo, hi) = ParamName::Maxbas.bounds();
    if !(lo..=hi).contains(&m) {
        return Err(Error::Config(format!("MAXBAS = {m} outside [{lo}, {hi}]")));
    }
    let tape = maxbas.tape();
    let mut cdf = Vec::with_capacity(ROUTING_LEN + 1);
    for i in 0..=ROUTING_LEN {
        cdf.push(triangle_cdf(tape, maxbas, i as f64)?);
    }
    let raw: Vec<Var<'t>> = (0..ROUTING_LEN).map(|i| cdf[i + 1] - cdf[i]).collect();
    let total = raw.iter().copied().reduce(|a, b| a + b).expect("non-empty");
    let mut out = [raw[0]; ROUTING_LEN];
    for (o, w) in out.iter_mut().zip(&raw) {
        *o = w.try_div(total)?;
    }
    Ok(out)
}

/// Convolves a generated-runoff series with the unit hydrograph, starting
/// from an empty buffer. Output day `t` only depends on days `<= t`.
pub fn route<'t>(q_generated: &[Var<'t>], maxbas: Var<'t>) -> Result<Vec<Var<'t>>> {
    let w = routing_weights(maxbas)?;
    Ok((0..q_generated.len())
        .map(|t| {
            (0..ROUTING_LEN.min(t + 1))
                .map(|i| w[i] * q_generated[t - i])
                .reduce(|a, b| a + b)
                .expect("at least one term")
        })
        .collect())
}

/// Advances one day with the standard process laws.
pub fn step<'t>(
    state: &HbvState<Var<'t>>,
    params: &HbvParameters<Var<'t>>,
    forcing: &ForcingRecord,
) -> Result<(HbvState<Var<'t>>, FluxRecord<Var<'t>>)> {
    let weights = routing_weights(params.maxbas)?;
    step_with(state, params, &weights, forcing, &StandardProcesses)
}

/// Advances one day with precomputed routing weights and process overrides.
pub fn step_with<'t>(
    state: &HbvState<Var<'t>>,
    params: &HbvParameters<Var<'t>>,
    weights: &[Var<'t>; ROUTING_LEN],
    forcing: &ForcingRecord,
    hooks: &dyn ProcessOverrides<'t>,
) -> Result<(HbvState<Var<'t>>, FluxRecord<Var<'t>>)> {
    let &ForcingRecord { p, t, pet } = forcing;
    let hp = params;

    // Precipitation partition.
    let rain_share = hp.tt.affine(-1.0 / PARTITION_WIDTH, t / PARTITION_WIDTH).sigmoid();
    let rain = rain_share * p;
    let snowfall = p - rain;

    // Snow routine.
    let warm = hp.tt.affine(-1.0, t).max_const(0.0);
    let melt = (hp.cfmax * warm).min(state.sp);
    let cold = hp.tt.affine(1.0, -t).max_const(0.0);
    let refreeze = (hp.cfr * hp.cfmax * cold).min(state.wc);
    let sp = (state.sp - melt) + (snowfall + refreeze);
    let wc = (state.wc - refreeze) + melt;
    let outflow = (wc - hp.cwh * sp).max_const(0.0);
    let wc = wc - outflow;

    // Soil routine.
    let inflow = rain + outflow;
    let soil_fraction = state.sm.try_div(hp.fc)?;
    let fraction = match hooks.recharge_fraction(soil_fraction)? {
        Some(f) => f,
        None => soil_fraction.pow(hp.beta)?,
    };
    let recharge = inflow * fraction;
    let sm = state.sm + (inflow - recharge);
    let capped = sm.min(hp.fc);
    let excess = sm - capped;
    let recharge = recharge + excess;
    let sm = capped;
    let demand = sm.try_div(hp.fc * hp.lp)?.min_const(1.0) * pet;
    let et = demand.min(sm);
    let sm = sm - et;

    // Upper zone.
    let suz = state.suz + recharge;
    let percolation = match hooks.percolation_fraction(suz.try_div(suz + 1.0)?)? {
        Some(f) => (hp.perc * f).min(suz),
        None => hp.perc.min(suz),
    };
    let suz = suz - percolation;
    let q1 = hp.k1 * suz;
    let remaining = suz - q1;
    let q0 = (hp.k0 * (suz - hp.uzl).max_const(0.0)).min(remaining);
    let suz = remaining - q0;

    // Lower zone.
    let slz = state.slz + percolation;
    let q2 = hp.k2 * slz;
    let slz = slz - q2;

    let q_generated = q0 + q1 + q2;

    // Routing buffer: schedule today's runoff and release the head.
    let mut scheduled = state.routing;
    for (slot, w) in scheduled.iter_mut().zip(weights) {
        *slot = *slot + *w * q_generated;
    }
    let q_routed = scheduled[0];
    let tape = q_generated.tape();
    let mut routing = [tape.constant(0.0); ROUTING_LEN];
    routing[..ROUTING_LEN - 1].copy_from_slice(&scheduled[1..]);

    let next = HbvState {
        sp,
        wc,
        sm,
        suz,
        slz,
        routing,
    };
    let fluxes = FluxRecord {
        rain,
        snowfall,
        melt,
        refreeze,
        recharge,
        et,
        percolation,
        q0,
        q1,
        q2,
        q_generated,
        q_routed,
    };
    Ok((next, fluxes))
}

fn check_run(forcings: &[ForcingRecord], warmup: usize) -> Result<()> {
    if forcings.is_empty() {
        return Err(Error::Config("empty forcing series".into()));
    }
    if forcings.len() <= warmup {
        return Err(Error::Config(format!(
            "forcing length {} does not exceed warmup {warmup}",
            forcings.len()
        )));
    }
    Ok(())
}

/// Runs the model over the whole forcing series with the standard laws.
pub fn simulate<'t>(
    initial: &HbvState<f64>,
    params: &HbvParameters<Var<'t>>,
    forcings: &[ForcingRecord],
    warmup: usize,
) -> Result<SimulationOutput<Var<'t>>> {
    simulate_with(initial, params, forcings, warmup, &StandardProcesses)
}

pub fn simulate_with<'t>(
    initial: &HbvState<f64>,
    params: &HbvParameters<Var<'t>>,
    forcings: &[ForcingRecord],
    warmup: usize,
    hooks: &dyn ProcessOverrides<'t>,
) -> Result<SimulationOutput<Var<'t>>> {
    check_run(forcings, warmup)?;
    let tape = params.tt.tape();
    let weights = routing_weights(params.maxbas)?;
    let mut state = initial.constants(tape);
    let mut discharge = Vec::with_capacity(forcings.len());
    let mut fluxes = Vec::with_capacity(forcings.len());
    let mut states = Vec::with_capacity(forcings.len());
    for f in forcings {
        let (next, flux) = step_with(&state, params, &weights, f, hooks)?;
        discharge.push(flux.q_routed);
        fluxes.push(flux);
        states.push(next);
        state = next;
    }
    Ok(SimulationOutput {
        discharge,
        fluxes,
        states,
        final_state: state,
    })
}

/// Plain-value simulation (no gradients requested).
pub fn simulate_values(
    initial: &HbvState<f64>,
    params: &HbvParameters<f64>,
    forcings: &[ForcingRecord],
    warmup: usize,
) -> Result<SimulationOutput<f64>> {
    let tape = Tape::with_capacity(forcings.len() * 100);
    let p = params.constants(&tape);
    Ok(simulate(initial, &p, forcings, warmup)?.values())
}

/// Mass-balance residuals of a finished run, in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaterBalance {
    pub precipitation: f64,
    /// `sum P - sum ET - sum Q_generated - change in bucket storage`
    pub residual: f64,
    /// `sum Q_routed + final buffer - sum Q_generated - initial buffer`
    pub routing_residual: f64,
}

impl WaterBalance {
    /// Residual per mm of precipitation (absolute residual when `P = 0`).
    pub fn relative(&self) -> f64 {
        self.residual.abs() / self.precipitation.max(1.0)
    }

    pub fn routing_relative(&self, generated: f64) -> f64 {
        self.routing_residual.abs() / generated.max(1.0)
    }
}

pub fn water_balance(
    output: &SimulationOutput<f64>,
    forcings: &[ForcingRecord],
    initial: &HbvState<f64>,
) -> WaterBalance {
    let precipitation: f64 = forcings.iter().map(|f| f.p).sum();
    let et: f64 = output.fluxes.iter().map(|f| f.et).sum();
    let generated: f64 = output.fluxes.iter().map(|f| f.q_generated).sum();
    let routed: f64 = output.fluxes.iter().map(|f| f.q_routed).sum();
    let end = &output.final_state;
    let storage_change = (end.sp - initial.sp)
        + (end.wc - initial.wc)
        + (end.sm - initial.sm)
        + (end.suz - initial.suz)
        + (end.slz - initial.slz);
    WaterBalance {
        precipitation,
        residual: precipitation - et - generated - storage_change,
        routing_residual: routed + end.in_flight() - generated - initial.in_flight(),
    }
}
