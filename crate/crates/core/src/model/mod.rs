//! Static grid description: buses, branches, breakers, sources and faults.
//!
//! A [`GridModel`] is built once from a case document (see [`case`]) and is
//! immutable afterwards. Everything that changes during a run (breaker
//! states, active faults, machine angles) lives outside the model and is
//! passed in explicitly, so the functions in this module are pure.

mod admittance;
pub mod case;
mod islands;

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use admittance::{build_admittance, AdmittanceMatrix};
pub use case::{load_case, parse_case, serialize_case, CaseDocument};
pub use islands::{find_islands, IslandPartition};

/// Bus number as used in the case file (1..=40 for the bundled cases).
pub type BusId = u32;
/// Breaker number; this is the id carried on the wire in breaker commands.
pub type BreakerId = u16;

/// Headroom applied to the microgrid synchronous unit rating over its dispatch.
pub const MG_MACHINE_HEADROOM: f64 = 2.0;
/// Headroom applied to the microgrid inverter rating over its set-point.
pub const MG_INVERTER_HEADROOM: f64 = 1.3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("invalid case: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BusKind {
    Slack,
    PV,
    PQ,
}

impl fmt::Display for BusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BusKind::Slack => "Slack",
            BusKind::PV => "PV",
            BusKind::PQ => "PQ",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: BusId,
    pub base_kv: f64,
    pub kind: BusKind,
    /// MW
    pub load_p: f64,
    /// Mvar
    pub load_q: f64,
    /// p.u. susceptance at 1.0 p.u. voltage
    pub shunt_b: f64,
    /// Voltage set-point for PV and slack buses, p.u.
    pub v_set: f64,
}

impl Bus {
    pub fn has_load(&self) -> bool {
        self.load_p != 0.0 || self.load_q != 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Line,
    Transformer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: String,
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance, p.u.
    pub b: f64,
    /// Off-nominal turns ratio on the from side (1.0 for lines).
    pub tap: f64,
    pub kind: BranchKind,
    /// Breaker that switches this branch, resolved from the breaker table.
    pub breaker_id: Option<BreakerId>,
}

impl Branch {
    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(self.r, self.x).inv()
    }

    pub fn other_end(&self, bus: BusId) -> Option<BusId> {
        if bus == self.from_bus {
            Some(self.to_bus)
        } else if bus == self.to_bus {
            Some(self.from_bus)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BreakerState {
    Open,
    Closed,
}

impl BreakerState {
    pub fn is_closed(self) -> bool {
        self == BreakerState::Closed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Breaker {
    pub id: BreakerId,
    pub label: String,
    pub controlled_branches: Vec<String>,
    /// State at the start of a run.
    pub state: BreakerState,
}

/// Breaker positions keyed by breaker id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BreakerStates(BTreeMap<BreakerId, BreakerState>);

impl BreakerStates {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: BreakerId) -> Option<BreakerState> {
        self.0.get(&id).copied()
    }

    pub fn set(&mut self, id: BreakerId, state: BreakerState) {
        self.0.insert(id, state);
    }

    pub fn is_closed(&self, id: BreakerId) -> bool {
        self.get(id).is_some_and(BreakerState::is_closed)
    }

    pub fn iter(&self) -> impl Iterator<Item = (BreakerId, BreakerState)> + '_ {
        self.0.iter().map(|(&k, &v)| (k, v))
    }
}

impl FromIterator<(BreakerId, BreakerState)> for BreakerStates {
    fn from_iter<T: IntoIterator<Item = (BreakerId, BreakerState)>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynchronousMachine {
    pub id: String,
    pub bus: BusId,
    pub rating_mva: f64,
    /// Inertia constant, s on machine base.
    pub h: f64,
    /// Damping, p.u. torque per p.u. speed on machine base.
    pub d: f64,
    /// Transient reactance, p.u. on machine base.
    pub xdp: f64,
    /// p.u. speed change per p.u. power on machine base.
    pub governor_droop: f64,
    pub governor_tc: f64,
    /// MW
    pub p_dispatch: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFormingInverter {
    pub id: String,
    pub bus: BusId,
    pub rating_mva: f64,
    /// MW
    pub p_set: f64,
    /// Mvar
    pub q_set: f64,
    /// Frequency droop, p.u. per p.u. power on the system base.
    pub mp: f64,
    /// Voltage droop, p.u. per p.u. reactive power on the system base.
    pub mq: f64,
    /// Power measurement low-pass time constant, s.
    pub filter_tc: f64,
    pub v_set: f64,
    /// Coupling reactance, p.u. on inverter base.
    pub x_out: f64,
}

/// Positive-sequence shunt fault.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultSpec {
    pub id: String,
    pub bus: BusId,
    /// p.u. on system base.
    pub y_fault: Complex64,
    pub t_on: f64,
    pub t_off: f64,
    /// When set, the fault lies in this breaker's switched zone at `bus`: it
    /// is an ordinary shunt at `bus` while the breaker is closed and is
    /// isolated while it is open.
    pub behind_breaker: Option<BreakerId>,
}

impl FaultSpec {
    /// Whether the breaker owning the fault's zone currently isolates it.
    pub fn is_isolated(&self, states: &BreakerStates) -> bool {
        self.behind_breaker.is_some_and(|b| !states.is_closed(b))
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= self.t_on && t < self.t_off
    }
}

/// Microgrid generation mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MgSystem {
    /// 150 MW PV and 150 MW synchronous.
    I,
    /// 210 MW PV and 90 MW synchronous.
    II,
}

impl MgSystem {
    pub fn pv_mw(self) -> f64 {
        match self {
            MgSystem::I => 150.0,
            MgSystem::II => 210.0,
        }
    }

    pub fn sync_mw(self) -> f64 {
        match self {
            MgSystem::I => 150.0,
            MgSystem::II => 90.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MgSystem::I => "I",
            MgSystem::II => "II",
        }
    }
}

impl std::str::FromStr for MgSystem {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "I" | "i" | "1" => Ok(MgSystem::I),
            "II" | "ii" | "2" => Ok(MgSystem::II),
            other => Err(format!("unknown system `{other}` (expected I or II)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub system: Option<MgSystem>,
    pub mg_bus: BusId,
    /// Fractional increase of the microgrid bus load (0.2 = +20%).
    pub load_increase: f64,
    /// Overlay already folded into the tables.
    pub applied: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            system: None,
            mg_bus: 24,
            load_increase: 0.2,
            applied: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    pub name: String,
    pub f_nominal: f64,
    pub s_base: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub breakers: Vec<Breaker>,
    pub machines: Vec<SynchronousMachine>,
    pub inverters: Vec<GridFormingInverter>,
    pub faults: Vec<FaultSpec>,
    pub scenario: Scenario,
    bus_index: BTreeMap<BusId, usize>,
}

impl GridModel {
    /// Assembles and validates a model. Overlays are not applied here.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        f_nominal: f64,
        s_base: f64,
        buses: Vec<Bus>,
        mut branches: Vec<Branch>,
        breakers: Vec<Breaker>,
        machines: Vec<SynchronousMachine>,
        inverters: Vec<GridFormingInverter>,
        faults: Vec<FaultSpec>,
        scenario: Scenario,
    ) -> Result<Self, ModelError> {
        let mut bus_index = BTreeMap::new();
        for (i, b) in buses.iter().enumerate() {
            if bus_index.insert(b.id, i).is_some() {
                return Err(invalid(format!("duplicate bus id {}", b.id)));
            }
        }
        // Resolve breaker → branch links.
        for br in branches.iter_mut() {
            br.breaker_id = None;
        }
        for brk in &breakers {
            for name in &brk.controlled_branches {
                let Some(br) = branches.iter_mut().find(|b| &b.id == name) else {
                    return Err(invalid(format!(
                        "breaker {} ({}) controls unknown branch `{name}`",
                        brk.id, brk.label
                    )));
                };
                if let Some(other) = br.breaker_id {
                    return Err(invalid(format!(
                        "branch `{name}` is controlled by breakers {other} and {}",
                        brk.id
                    )));
                }
                br.breaker_id = Some(brk.id);
            }
        }
        let model = Self {
            name: name.into(),
            f_nominal,
            s_base,
            buses,
            branches,
            breakers,
            machines,
            inverters,
            faults,
            scenario,
            bus_index,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ModelError> {
        if !(self.f_nominal > 0.0) || !(self.s_base > 0.0) {
            return Err(invalid("f_nominal and s_base must be positive"));
        }
        for b in &self.buses {
            if !(b.base_kv > 0.0) {
                return Err(invalid(format!("bus {}: base_kv must be > 0", b.id)));
            }
            if matches!(b.kind, BusKind::PV | BusKind::Slack) && !(b.v_set > 0.0) {
                return Err(invalid(format!("bus {}: v_set must be > 0", b.id)));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for br in &self.branches {
            if !seen.insert(br.id.as_str()) {
                return Err(invalid(format!("duplicate branch id `{}`", br.id)));
            }
            for end in [br.from_bus, br.to_bus] {
                if !self.bus_index.contains_key(&end) {
                    return Err(invalid(format!(
                        "branch `{}` references unknown bus {end}",
                        br.id
                    )));
                }
            }
            if br.from_bus == br.to_bus {
                return Err(invalid(format!("branch `{}` is a self-loop", br.id)));
            }
            if br.x == 0.0 || !br.x.is_finite() {
                return Err(invalid(format!("branch `{}`: x must be non-zero", br.id)));
            }
            if !(br.tap > 0.0) {
                return Err(invalid(format!("branch `{}`: tap must be > 0", br.id)));
            }
        }
        let mut breaker_ids = std::collections::BTreeSet::new();
        for brk in &self.breakers {
            if !breaker_ids.insert(brk.id) {
                return Err(invalid(format!("duplicate breaker id {}", brk.id)));
            }
            if brk.controlled_branches.is_empty() {
                return Err(invalid(format!("breaker {} controls no branches", brk.id)));
            }
        }
        let mut unit_ids = std::collections::BTreeSet::new();
        for m in &self.machines {
            if !unit_ids.insert(m.id.as_str()) {
                return Err(invalid(format!("duplicate unit id `{}`", m.id)));
            }
            self.require_bus(m.bus, &m.id)?;
            if !(m.h > 0.0) || !(m.xdp > 0.0) {
                return Err(invalid(format!("machine `{}`: h and xdp must be > 0", m.id)));
            }
            if !(m.governor_droop > 0.0 && m.governor_droop <= 0.1) {
                return Err(invalid(format!(
                    "machine `{}`: governor_droop must lie in (0, 0.1]",
                    m.id
                )));
            }
            if !(m.governor_tc > 0.0) {
                return Err(invalid(format!("machine `{}`: governor_tc must be > 0", m.id)));
            }
            if m.rating_mva < m.p_dispatch {
                return Err(invalid(format!(
                    "machine `{}`: dispatch {} MW exceeds rating {} MVA",
                    m.id, m.p_dispatch, m.rating_mva
                )));
            }
        }
        for inv in &self.inverters {
            if !unit_ids.insert(inv.id.as_str()) {
                return Err(invalid(format!("duplicate unit id `{}`", inv.id)));
            }
            self.require_bus(inv.bus, &inv.id)?;
            if inv.rating_mva < inv.p_set {
                return Err(invalid(format!(
                    "inverter `{}`: p_set {} MW exceeds rating {} MVA",
                    inv.id, inv.p_set, inv.rating_mva
                )));
            }
            if !(inv.mp > 0.0) || !(inv.mq >= 0.0) || !(inv.filter_tc > 0.0) {
                return Err(invalid(format!(
                    "inverter `{}`: need mp > 0, mq >= 0, filter_tc > 0",
                    inv.id
                )));
            }
            if !(inv.x_out > 0.0) || !(inv.v_set > 0.0) {
                return Err(invalid(format!(
                    "inverter `{}`: x_out and v_set must be > 0",
                    inv.id
                )));
            }
        }
        for f in &self.faults {
            self.require_bus(f.bus, &f.id)?;
            if !(f.t_off > f.t_on) {
                return Err(invalid(format!("fault `{}`: t_off must exceed t_on", f.id)));
            }
            if !(f.y_fault.norm() > 0.0) {
                return Err(invalid(format!("fault `{}`: |y_fault| must be > 0", f.id)));
            }
            if let Some(bid) = f.behind_breaker {
                let brk = self.breaker(bid).ok_or_else(|| {
                    invalid(format!("fault `{}` references unknown breaker {bid}", f.id))
                })?;
                for name in &brk.controlled_branches {
                    let br = self.branch(name).expect("resolved above");
                    if br.other_end(f.bus).is_none() {
                        return Err(invalid(format!(
                            "fault `{}`: branch `{name}` of breaker {bid} does not touch bus {}",
                            f.id, f.bus
                        )));
                    }
                }
            }
        }
        for b in &self.buses {
            let has_source = self.has_source(b.id);
            if b.kind == BusKind::PV && !has_source {
                return Err(invalid(format!("PV bus {} has no machine or inverter", b.id)));
            }
            if b.kind == BusKind::PQ && has_source {
                return Err(invalid(format!(
                    "bus {} carries a source but is typed PQ",
                    b.id
                )));
            }
        }
        let n_slack = self.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        if n_slack != 1 {
            return Err(invalid(format!("expected exactly one slack bus, found {n_slack}")));
        }
        if self.scenario.system.is_some() && self.bus(self.scenario.mg_bus).is_none() {
            return Err(invalid(format!(
                "scenario mg_bus {} does not exist",
                self.scenario.mg_bus
            )));
        }
        Ok(())
    }

    fn require_bus(&self, bus: BusId, owner: &str) -> Result<(), ModelError> {
        if self.bus_index.contains_key(&bus) {
            Ok(())
        } else {
            Err(invalid(format!("`{owner}` references unknown bus {bus}")))
        }
    }

    /// Folds the microgrid generation mix and the load increase into the
    /// tables. Calling it on an already applied model is a no-op.
    pub fn apply_scenario(mut self) -> Result<Self, ModelError> {
        let Some(system) = self.scenario.system else {
            return Ok(self);
        };
        if self.scenario.applied {
            return Ok(self);
        }
        let mg = self.scenario.mg_bus;
        let n_machines = self.machines.iter().filter(|m| m.bus == mg).count();
        let n_inverters = self.inverters.iter().filter(|i| i.bus == mg).count();
        if n_machines == 0 || n_inverters == 0 {
            return Err(invalid(format!(
                "scenario system {} needs a machine and an inverter at bus {mg}",
                system.label()
            )));
        }
        for m in self.machines.iter_mut().filter(|m| m.bus == mg) {
            m.p_dispatch = system.sync_mw() / n_machines as f64;
            m.rating_mva = MG_MACHINE_HEADROOM * m.p_dispatch;
        }
        for inv in self.inverters.iter_mut().filter(|i| i.bus == mg) {
            inv.p_set = system.pv_mw() / n_inverters as f64;
            inv.rating_mva = MG_INVERTER_HEADROOM * inv.p_set;
        }
        let scale = 1.0 + self.scenario.load_increase;
        let idx = self.bus_index[&mg];
        self.buses[idx].load_p *= scale;
        self.buses[idx].load_q *= scale;
        self.scenario.applied = true;
        self.validate()?;
        Ok(self)
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.bus_index.get(&id).copied()
    }

    pub fn bus(&self, id: BusId) -> Option<&Bus> {
        self.bus_index(id).map(|i| &self.buses[i])
    }

    pub fn branch(&self, id: &str) -> Option<&Branch> {
        self.branches.iter().find(|b| b.id == id)
    }

    pub fn breaker(&self, id: BreakerId) -> Option<&Breaker> {
        self.breakers.iter().find(|b| b.id == id)
    }

    pub fn breaker_by_label(&self, label: &str) -> Option<&Breaker> {
        self.breakers.iter().find(|b| b.label == label)
    }

    pub fn fault(&self, id: &str) -> Option<&FaultSpec> {
        self.faults.iter().find(|f| f.id == id)
    }

    pub fn has_source(&self, bus: BusId) -> bool {
        self.machines.iter().any(|m| m.bus == bus) || self.inverters.iter().any(|i| i.bus == bus)
    }

    pub fn slack_bus(&self) -> BusId {
        self.buses
            .iter()
            .find(|b| b.kind == BusKind::Slack)
            .map(|b| b.id)
            .expect("validated: one slack bus")
    }

    pub fn initial_breaker_states(&self) -> BreakerStates {
        self.breakers.iter().map(|b| (b.id, b.state)).collect()
    }

    pub fn line_count(&self) -> usize {
        self.branches.iter().filter(|b| b.kind == BranchKind::Line).count()
    }

    pub fn transformer_count(&self) -> usize {
        self.branches
            .iter()
            .filter(|b| b.kind == BranchKind::Transformer)
            .count()
    }

    /// Loads at buses that carry no generation.
    pub fn aggregated_load_count(&self) -> usize {
        self.buses
            .iter()
            .filter(|b| b.has_load() && !self.has_source(b.id))
            .count()
    }

    /// Whether a branch conducts under the given breaker positions.
    pub fn branch_closed(&self, branch: &Branch, states: &BreakerStates) -> bool {
        match branch.breaker_id {
            None => true,
            Some(id) => states.is_closed(id),
        }
    }
}

fn invalid(msg: impl Into<String>) -> ModelError {
    ModelError::Validation(msg.into())
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn rejects_self_loop_and_zero_reactance() {
        let mk = |br: Branch| {
            GridModel::new(
                "t",
                60.0,
                100.0,
                vec![bus(1, BusKind::Slack), bus(2, BusKind::PQ)],
                vec![br],
                vec![],
                vec![machine("G1", 1, 0.0)],
                vec![],
                vec![],
                Scenario::default(),
            )
        };
        assert!(matches!(mk(line(1, 1, 0.0, 0.1)), Err(ModelError::Validation(_))));
        assert!(matches!(mk(line(1, 2, 0.0, 0.0)), Err(ModelError::Validation(_))));
        assert!(mk(line(1, 2, 0.0, 0.1)).is_ok());
    }

    #[test]
    fn breaker_links_resolve_onto_branches() {
        let m = two_bus(0.1, true);
        assert_eq!(m.branches[0].breaker_id, Some(1));
        assert_eq!(m.breaker_by_label("B1").unwrap().id, 1);
    }

    #[test]
    fn pv_bus_without_source_is_rejected() {
        let r = GridModel::new(
            "t",
            60.0,
            100.0,
            vec![bus(1, BusKind::Slack), bus(2, BusKind::PV)],
            vec![line(1, 2, 0.0, 0.1)],
            vec![],
            vec![machine("G1", 1, 0.0)],
            vec![],
            vec![],
            Scenario::default(),
        );
        assert!(r.unwrap_err().to_string().contains("PV bus 2"));
    }

    #[test]
    fn governor_droop_bounds() {
        let mut g = machine("G1", 1, 0.0);
        g.governor_droop = 0.2;
        let r = GridModel::new(
            "t",
            60.0,
            100.0,
            vec![bus(1, BusKind::Slack)],
            vec![],
            vec![],
            vec![g],
            vec![],
            vec![],
            Scenario::default(),
        );
        assert!(r.is_err());
    }
}
