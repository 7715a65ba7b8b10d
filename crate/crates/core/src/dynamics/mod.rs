//! Fixed-step time-domain simulation.
//!
//! Differential states (machine swing and governor, inverter droop and power
//! filters) are advanced with classical RK4; the network is solved
//! algebraically at every stage. Breaker and fault events are applied at
//! step boundaries only.

pub mod frequency;
mod network;

use std::f64::consts::TAU;

use num_complex::Complex64;

use crate::model::{BreakerId, BreakerState, BreakerStates, GridModel};
pub use frequency::{
    estimate_bus_frequency, inverter_frequency, FrequencyEstimator, ESTIMATOR_TC,
};
pub use network::{network_solve, Network};

pub const DEFAULT_DT: f64 = 1e-3;
/// |ω − 1| at which the run is declared blown up.
pub const DIVERGENCE_LIMIT: f64 = 0.1;

const EVENT_EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DynamicsError {
    #[error("simulation blew up at t = {t:.6} s: {detail}")]
    BlowUp { t: f64, detail: String },
    #[error("energized island has a singular network matrix")]
    SingularNetwork,
    #[error("event target does not resolve: {0}")]
    BadEvent(String),
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MachineState {
    pub delta: f64,
    /// p.u. speed
    pub omega: f64,
    /// System-base p.u.
    pub p_mech: f64,
    pub p_gov_ref: f64,
    /// Internal EMF magnitude, fixed by initialization.
    pub e_mag: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverterState {
    pub theta: f64,
    /// Filtered active power, system-base p.u.
    pub p_filt: f64,
    pub q_filt: f64,
    /// Droop set-points reconciled at initialization, system-base p.u.
    pub p_ref: f64,
    pub q_ref: f64,
    /// Internal voltage reference at `q_filt == q_ref`.
    pub e_ref: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusState {
    pub v: Complex64,
    /// Estimated frequency, Hz; NaN when de-energized.
    pub f_est: f64,
    pub estimator: FrequencyEstimator,
}

impl Default for BusState {
    fn default() -> Self {
        Self {
            v: Complex64::default(),
            f_est: f64::NAN,
            estimator: FrequencyEstimator::new(60.0, ESTIMATOR_TC),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicState {
    pub t: f64,
    pub step: u64,
    pub machines: Vec<MachineState>,
    pub inverters: Vec<InverterState>,
    pub buses: Vec<BusState>,
    pub breakers: BreakerStates,
    /// Indexed like `model.faults`.
    pub faults_active: Vec<bool>,
    /// Constant-impedance load admittance per bus, system-base p.u.
    pub load_y: Vec<Complex64>,
}

impl DynamicState {
    pub fn inverter_emf(inv: &InverterState, mq: f64) -> Complex64 {
        Complex64::from_polar(inv.e_ref - mq * (inv.q_filt - inv.q_ref), inv.theta)
    }

    pub fn source_emfs(&self, model: &GridModel) -> (Vec<Complex64>, Vec<Complex64>) {
        let em = self
            .machines
            .iter()
            .map(|m| Complex64::from_polar(m.e_mag, m.delta))
            .collect();
        let ei = self
            .inverters
            .iter()
            .zip(&model.inverters)
            .map(|(s, p)| Self::inverter_emf(s, p.mq))
            .collect();
        (em, ei)
    }

    pub fn any_fault_active(&self) -> bool {
        self.faults_active.iter().any(|&f| f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum EventKind {
    BreakerOpen,
    BreakerClose,
    FaultOn,
    FaultOff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum EventTarget {
    Breaker(BreakerId),
    /// Index into `model.faults`.
    Fault(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum EventOrigin {
    Scripted,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimEvent {
    pub at: f64,
    pub kind: EventKind,
    pub target: EventTarget,
    pub origin: EventOrigin,
}

impl SimEvent {
    pub fn breaker(at: f64, id: BreakerId, state: BreakerState, origin: EventOrigin) -> Self {
        Self {
            at,
            kind: match state {
                BreakerState::Open => EventKind::BreakerOpen,
                BreakerState::Closed => EventKind::BreakerClose,
            },
            target: EventTarget::Breaker(id),
            origin,
        }
    }

    /// Fault inception and clearing events for every fault in the model.
    pub fn scripted_faults(model: &GridModel) -> Vec<SimEvent> {
        let mut out = Vec::new();
        for (k, f) in model.faults.iter().enumerate() {
            out.push(SimEvent {
                at: f.t_on,
                kind: EventKind::FaultOn,
                target: EventTarget::Fault(k),
                origin: EventOrigin::Scripted,
            });
            out.push(SimEvent {
                at: f.t_off,
                kind: EventKind::FaultOff,
                target: EventTarget::Fault(k),
                origin: EventOrigin::Scripted,
            });
        }
        out
    }

    /// Whether the event executes at the boundary `t` (events falling inside
    /// a step wait for the next boundary).
    pub fn is_due(&self, t: f64) -> bool {
        self.at <= t + EVENT_EPS
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Governor lag active; when false mechanical power stays constant.
    pub governors: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { governors: true }
    }
}

/// Time derivatives of the packed differential state.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    /// Per machine: [dδ/dt, dω/dt, dp_mech/dt]
    pub machines: Vec<[f64; 3]>,
    /// Per inverter: [dθ/dt, dp_filt/dt, dq_filt/dt]
    pub inverters: Vec<[f64; 3]>,
}

impl Derivatives {
    pub fn max_abs(&self) -> f64 {
        self.machines
            .iter()
            .chain(&self.inverters)
            .flat_map(|d| d.iter())
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

/// Stepper that owns the factorized network for the current topology.
pub struct Simulator<'m> {
    model: &'m GridModel,
    options: SimOptions,
    network: Network,
    topology: (BreakerStates, Vec<bool>),
    omega_s: f64,
}

impl<'m> Simulator<'m> {
    pub fn new(model: &'m GridModel, state: &DynamicState) -> Result<Self, DynamicsError> {
        Self::with_options(model, state, SimOptions::default())
    }

    pub fn with_options(
        model: &'m GridModel,
        state: &DynamicState,
        options: SimOptions,
    ) -> Result<Self, DynamicsError> {
        let network = Network::build(model, &state.breakers, &state.faults_active, &state.load_y)?;
        Ok(Self {
            model,
            options,
            network,
            topology: (state.breakers.clone(), state.faults_active.clone()),
            omega_s: TAU * model.f_nominal,
        })
    }

    pub fn model(&self) -> &GridModel {
        self.model
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    fn refresh_topology(&mut self, state: &DynamicState) -> Result<bool, DynamicsError> {
        if self.topology.0 == state.breakers && self.topology.1 == state.faults_active {
            return Ok(false);
        }
        self.network = Network::build(
            self.model,
            &state.breakers,
            &state.faults_active,
            &state.load_y,
        )?;
        self.topology = (state.breakers.clone(), state.faults_active.clone());
        Ok(true)
    }

    fn apply_event(&self, state: &mut DynamicState, ev: &SimEvent) -> Result<(), DynamicsError> {
        match (ev.kind, ev.target) {
            (EventKind::BreakerOpen | EventKind::BreakerClose, EventTarget::Breaker(id)) => {
                if self.model.breaker(id).is_none() {
                    return Err(DynamicsError::BadEvent(format!("unknown breaker {id}")));
                }
                let s = if ev.kind == EventKind::BreakerOpen {
                    BreakerState::Open
                } else {
                    BreakerState::Closed
                };
                state.breakers.set(id, s);
            }
            (EventKind::FaultOn | EventKind::FaultOff, EventTarget::Fault(k)) => {
                let slot = state
                    .faults_active
                    .get_mut(k)
                    .ok_or_else(|| DynamicsError::BadEvent(format!("unknown fault #{k}")))?;
                *slot = ev.kind == EventKind::FaultOn;
            }
            (kind, target) => {
                return Err(DynamicsError::BadEvent(format!(
                    "{kind:?} cannot target {target:?}"
                )))
            }
        }
        Ok(())
    }

    fn pack(state: &DynamicState) -> Vec<f64> {
        let mut x = Vec::with_capacity(3 * (state.machines.len() + state.inverters.len()));
        for m in &state.machines {
            x.extend([m.delta, m.omega, m.p_mech]);
        }
        for i in &state.inverters {
            x.extend([i.theta, i.p_filt, i.q_filt]);
        }
        x
    }

    fn unpack(state: &mut DynamicState, x: &[f64]) {
        let nm = state.machines.len();
        for (k, m) in state.machines.iter_mut().enumerate() {
            m.delta = x[3 * k];
            m.omega = x[3 * k + 1];
            m.p_mech = x[3 * k + 2];
        }
        for (k, i) in state.inverters.iter_mut().enumerate() {
            let o = 3 * (nm + k);
            i.theta = x[o];
            i.p_filt = x[o + 1];
            i.q_filt = x[o + 2];
        }
    }

    /// Solves the network for `state` and returns the derivatives and bus voltages.
    fn evaluate(&self, state: &DynamicState) -> (Vec<f64>, Vec<Complex64>) {
        let model = self.model;
        let (em, ei) = state.source_emfs(model);
        let v = self.network.solve(&em, &ei);
        let mut dx = Vec::with_capacity(3 * (em.len() + ei.len()));
        for (k, (m, p)) in state.machines.iter().zip(&model.machines).enumerate() {
            let kb = p.rating_mva / model.s_base;
            let i = self.network.machine_current(k, em[k], &v);
            let p_elec = (em[k] * i.conj()).re;
            let dw = m.omega - 1.0;
            let d_delta = self.omega_s * dw;
            let d_omega = (m.p_mech - p_elec - p.d * kb * dw) / (2.0 * p.h * kb);
            let d_pm = if self.options.governors {
                (m.p_gov_ref - kb * dw / p.governor_droop - m.p_mech) / p.governor_tc
            } else {
                0.0
            };
            dx.extend([d_delta, d_omega, d_pm]);
        }
        for (k, (s, p)) in state.inverters.iter().zip(&model.inverters).enumerate() {
            let i = self.network.inverter_current(k, ei[k], &v);
            let vt = v[model.bus_index(p.bus).unwrap()];
            let sm = vt * i.conj();
            let d_theta = -self.omega_s * p.mp * (s.p_filt - s.p_ref);
            let d_p = (sm.re - s.p_filt) / p.filter_tc;
            let d_q = (sm.im - s.q_filt) / p.filter_tc;
            dx.extend([d_theta, d_p, d_q]);
        }
        (dx, v)
    }

    pub fn derivatives(&self, state: &DynamicState) -> Derivatives {
        let (dx, _) = self.evaluate(state);
        let nm = state.machines.len();
        let chunk = |k: usize| [dx[3 * k], dx[3 * k + 1], dx[3 * k + 2]];
        Derivatives {
            machines: (0..nm).map(chunk).collect(),
            inverters: (nm..nm + state.inverters.len()).map(chunk).collect(),
        }
    }

    /// Bus voltages for `state` under the current topology.
    pub fn solve_voltages(&self, state: &DynamicState) -> Vec<Complex64> {
        let (em, ei) = state.source_emfs(self.model);
        self.network.solve(&em, &ei)
    }

    /// Net complex power injected into the network at a bus (sources minus
    /// load), system-base p.u.
    pub fn bus_injection(&self, state: &DynamicState, bus_index: usize) -> Complex64 {
        let model = self.model;
        let v = state.buses[bus_index].v;
        let (em, ei) = state.source_emfs(model);
        let v_all: Vec<Complex64> = state.buses.iter().map(|b| b.v).collect();
        let mut i_src = Complex64::default();
        for (k, m) in model.machines.iter().enumerate() {
            if model.bus_index(m.bus) == Some(bus_index) {
                i_src += self.network.machine_current(k, em[k], &v_all);
            }
        }
        for (k, inv) in model.inverters.iter().enumerate() {
            if model.bus_index(inv.bus) == Some(bus_index) {
                i_src += self.network.inverter_current(k, ei[k], &v_all);
            }
        }
        v * i_src.conj() - v.norm_sqr() * state.load_y[bus_index].conj()
    }

    /// Active power delivered by each machine and inverter, system-base p.u.
    pub fn source_powers(&self, state: &DynamicState) -> (Vec<f64>, Vec<f64>) {
        let (em, ei) = state.source_emfs(self.model);
        let v: Vec<Complex64> = state.buses.iter().map(|b| b.v).collect();
        let pm = em
            .iter()
            .enumerate()
            .map(|(k, &e)| (e * self.network.machine_current(k, e, &v).conj()).re)
            .collect();
        let pi = ei
            .iter()
            .enumerate()
            .map(|(k, &e)| (e * self.network.inverter_current(k, e, &v).conj()).re)
            .collect();
        (pm, pi)
    }

    fn store_voltages(&self, state: &mut DynamicState, v: &[Complex64], advance_dt: Option<f64>) {
        for (i, bus) in state.buses.iter_mut().enumerate() {
            bus.v = v[i];
            if !self.network.is_alive(i) {
                bus.estimator.invalidate();
            } else {
                match advance_dt {
                    Some(dt) => bus.estimator.advance(v[i].arg(), dt),
                    None => bus.estimator.jump(v[i].arg()),
                }
            }
            bus.f_est = bus.estimator.frequency();
        }
    }

    /// Applies `due_events` at the current boundary, then advances one RK4
    /// step of length `dt`.
    pub fn step(
        &mut self,
        state: &DynamicState,
        dt: f64,
        due_events: &[SimEvent],
    ) -> Result<DynamicState, DynamicsError> {
        if !(dt > 0.0) {
            return Err(DynamicsError::BadStep(dt));
        }
        let mut next = state.clone();
        for ev in due_events {
            self.apply_event(&mut next, ev)?;
        }
        if self.refresh_topology(&next)? {
            let v = self.solve_voltages(&next);
            self.store_voltages(&mut next, &v, None);
        }

        let x0 = Self::pack(&next);
        let mut scratch = next.clone();
        let mut stage = |x: &[f64]| {
            Self::unpack(&mut scratch, x);
            self.evaluate(&scratch).0
        };
        let axpy = |a: f64, k: &[f64]| -> Vec<f64> {
            x0.iter().zip(k).map(|(x, d)| x + a * d).collect()
        };
        let k1 = stage(&x0);
        let k2 = stage(&axpy(0.5 * dt, &k1));
        let k3 = stage(&axpy(0.5 * dt, &k2));
        let k4 = stage(&axpy(dt, &k3));
        let x1: Vec<f64> = (0..x0.len())
            .map(|i| x0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        Self::unpack(&mut next, &x1);
        next.t = state.t + dt;
        next.step = state.step + 1;

        let v = self.solve_voltages(&next);
        self.store_voltages(&mut next, &v, Some(dt));
        self.check_divergence(&next)?;
        Ok(next)
    }

    fn check_divergence(&self, state: &DynamicState) -> Result<(), DynamicsError> {
        for (m, p) in state.machines.iter().zip(&self.model.machines) {
            if !m.omega.is_finite() || (m.omega - 1.0).abs() >= DIVERGENCE_LIMIT {
                return Err(DynamicsError::BlowUp {
                    t: state.t,
                    detail: format!(
                        "machine `{}` speed {:.6} p.u. (delta {:.4} rad, p_mech {:.4})",
                        p.id, m.omega, m.delta, m.p_mech
                    ),
                });
            }
        }
        for (i, p) in state.inverters.iter().zip(&self.model.inverters) {
            if !(i.theta.is_finite() && i.p_filt.is_finite() && i.q_filt.is_finite()) {
                return Err(DynamicsError::BlowUp {
                    t: state.t,
                    detail: format!("inverter `{}` state is non-finite", p.id),
                });
            }
        }
        if state.buses.iter().any(|b| !b.v.norm().is_finite()) {
            return Err(DynamicsError::BlowUp {
                t: state.t,
                detail: "non-finite bus voltage".into(),
            });
        }
        Ok(())
    }
}

/// One-shot step without a cached factorization.
pub fn step(
    state: &DynamicState,
    model: &GridModel,
    dt: f64,
    due_events: &[SimEvent],
) -> Result<DynamicState, DynamicsError> {
    Simulator::new(model, state)?.step(state, dt, due_events)
}
