use nalgebra::{DMatrix, DVector, Dyn, LU};
use num_complex::Complex64;

use super::{DynamicState, DynamicsError};
use crate::model::{
    build_admittance, find_islands, AdmittanceMatrix, BreakerStates, FaultSpec, GridModel,
    IslandPartition,
};

/// Factorized algebraic network for one topology.
///
/// Sources enter as Norton equivalents (EMF behind reactance), loads as
/// constant admittances. Buses of islands without a source are pinned to 0.
#[derive(Debug, Clone)]
pub struct Network {
    pub partition: IslandPartition,
    pub admittance: AdmittanceMatrix,
    alive: Vec<bool>,
    lu: LU<Complex64, Dyn, Dyn>,
    machine_bus: Vec<usize>,
    machine_y: Vec<Complex64>,
    inverter_bus: Vec<usize>,
    inverter_y: Vec<Complex64>,
}

/// Norton admittance of a source reactance given on the unit's own rating.
pub(crate) fn source_admittance(x_unit_pu: f64, rating_mva: f64, s_base: f64) -> Complex64 {
    Complex64::new(0.0, x_unit_pu * s_base / rating_mva).inv()
}

impl Network {
    pub fn build(
        model: &GridModel,
        breakers: &BreakerStates,
        faults_active: &[bool],
        load_y: &[Complex64],
    ) -> Result<Self, DynamicsError> {
        let active: Vec<&FaultSpec> = model
            .faults
            .iter()
            .zip(faults_active)
            .filter(|(_, &on)| on)
            .map(|(f, _)| f)
            .collect();
        let admittance = build_admittance(model, breakers, &active);
        let partition = find_islands(model, breakers);
        let n = model.bus_count();
        let alive: Vec<bool> = model
            .buses
            .iter()
            .map(|b| partition.is_bus_energized(b.id))
            .collect();

        let machine_bus: Vec<usize> = model
            .machines
            .iter()
            .map(|m| model.bus_index(m.bus).unwrap())
            .collect();
        let machine_y: Vec<Complex64> = model
            .machines
            .iter()
            .map(|m| source_admittance(m.xdp, m.rating_mva, model.s_base))
            .collect();
        let inverter_bus: Vec<usize> = model
            .inverters
            .iter()
            .map(|i| model.bus_index(i.bus).unwrap())
            .collect();
        let inverter_y: Vec<Complex64> = model
            .inverters
            .iter()
            .map(|i| source_admittance(i.x_out, i.rating_mva, model.s_base))
            .collect();

        let mut m: DMatrix<Complex64> = admittance.to_dense();
        for i in 0..n {
            m[(i, i)] += load_y[i];
        }
        for (&b, &y) in machine_bus.iter().zip(&machine_y) {
            m[(b, b)] += y;
        }
        for (&b, &y) in inverter_bus.iter().zip(&inverter_y) {
            m[(b, b)] += y;
        }
        for i in (0..n).filter(|&i| !alive[i]) {
            for j in 0..n {
                m[(i, j)] = Complex64::default();
                m[(j, i)] = Complex64::default();
            }
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        let lu = m.lu();
        if !lu.is_invertible() {
            return Err(DynamicsError::SingularNetwork);
        }
        Ok(Self {
            partition,
            admittance,
            alive,
            lu,
            machine_bus,
            machine_y,
            inverter_bus,
            inverter_y,
        })
    }

    pub fn is_alive(&self, bus_index: usize) -> bool {
        self.alive[bus_index]
    }

    /// Bus voltages for the given source EMFs.
    pub fn solve(&self, machine_emf: &[Complex64], inverter_emf: &[Complex64]) -> Vec<Complex64> {
        let n = self.alive.len();
        let mut rhs = DVector::<Complex64>::zeros(n);
        for ((&b, &y), &e) in self.machine_bus.iter().zip(&self.machine_y).zip(machine_emf) {
            rhs[b] += y * e;
        }
        for ((&b, &y), &e) in self
            .inverter_bus
            .iter()
            .zip(&self.inverter_y)
            .zip(inverter_emf)
        {
            rhs[b] += y * e;
        }
        for i in (0..n).filter(|&i| !self.alive[i]) {
            rhs[i] = Complex64::default();
        }
        let v = self.lu.solve(&rhs).expect("factorization checked invertible");
        v.iter().copied().collect()
    }

    pub fn machine_current(&self, k: usize, e: Complex64, v: &[Complex64]) -> Complex64 {
        self.machine_y[k] * (e - v[self.machine_bus[k]])
    }

    pub fn inverter_current(&self, k: usize, e: Complex64, v: &[Complex64]) -> Complex64 {
        self.inverter_y[k] * (e - v[self.inverter_bus[k]])
    }
}

/// Solves the algebraic network for the sources in `state` under the given
/// admittance (which must match the state's breaker/fault topology).
pub fn network_solve(
    state: &DynamicState,
    model: &GridModel,
    admittance: &AdmittanceMatrix,
) -> Result<Vec<Complex64>, DynamicsError> {
    let net = Network::build(model, &state.breakers, &state.faults_active, &state.load_y)?;
    debug_assert_eq!(&net.admittance, admittance);
    let (em, ei) = state.source_emfs(model);
    Ok(net.solve(&em, &ei))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{InverterState, MachineState};
    use crate::model::test_support::*;
    use crate::model::{BusKind, GridModel, Scenario};

    fn single_machine_open_circuit() -> GridModel {
        let mut g = machine("G1", 1, 0.0);
        g.xdp = 0.3;
        GridModel::new(
            "smib",
            60.0,
            100.0,
            vec![bus(1, BusKind::Slack)],
            vec![],
            vec![],
            vec![g],
            vec![],
            vec![],
            Scenario::default(),
        )
        .unwrap()
    }

    #[test]
    fn open_circuit_terminal_equals_emf() {
        let m = single_machine_open_circuit();
        let net = Network::build(&m, &m.initial_breaker_states(), &[], &[Complex64::default()])
            .unwrap();
        let v = net.solve(&[Complex64::new(1.0, 0.0)], &[]);
        assert!((v[0] - Complex64::new(1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn equal_sources_drive_no_line_flow() {
        let m = GridModel::new(
            "two",
            60.0,
            100.0,
            vec![bus(1, BusKind::Slack), bus(2, BusKind::PV)],
            vec![line(1, 2, 0.01, 0.1)],
            vec![],
            vec![machine("G1", 1, 0.0), machine("G2", 2, 0.0)],
            vec![],
            vec![],
            Scenario::default(),
        )
        .unwrap();
        let net = Network::build(&m, &m.initial_breaker_states(), &[], &[Complex64::default(); 2])
            .unwrap();
        let e = Complex64::from_polar(1.05, 0.2);
        let v = net.solve(&[e, e], &[]);
        assert!((v[0] - v[1]).norm() < 1e-14);
        assert!(net.machine_current(0, e, &v).norm() < 1e-12);
    }

    #[test]
    fn network_solve_wrapper_uses_state_sources() {
        let m = single_machine_open_circuit();
        let state = DynamicState {
            t: 0.0,
            step: 0,
            machines: vec![MachineState {
                delta: 0.4,
                omega: 1.0,
                p_mech: 0.0,
                p_gov_ref: 0.0,
                e_mag: 1.1,
            }],
            inverters: Vec::<InverterState>::new(),
            buses: vec![Default::default()],
            breakers: m.initial_breaker_states(),
            faults_active: vec![],
            load_y: vec![Complex64::default()],
        };
        let y = build_admittance(&m, &state.breakers, &[]);
        let v = network_solve(&state, &m, &y).unwrap();
        assert!((v[0] - Complex64::from_polar(1.1, 0.4)).norm() < 1e-14);
    }
}
