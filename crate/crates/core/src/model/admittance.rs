use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::{BreakerStates, BusId, FaultSpec, GridModel};

/// Nodal admittance matrix in sparse row form, indexed like `model.buses`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    order: Vec<BusId>,
    rows: Vec<BTreeMap<usize, Complex64>>,
}

impl AdmittanceMatrix {
    fn zeros(order: Vec<BusId>) -> Self {
        let n = order.len();
        Self {
            order,
            rows: vec![BTreeMap::new(); n],
        }
    }

    fn add(&mut self, i: usize, j: usize, y: Complex64) {
        *self.rows[i].entry(j).or_default() += y;
    }

    pub fn dim(&self) -> usize {
        self.order.len()
    }

    pub fn bus_ids(&self) -> &[BusId] {
        &self.order
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.rows[i].get(&j).copied().unwrap_or_default()
    }

    /// Entry addressed by bus numbers. Panics on unknown buses.
    pub fn get_by_id(&self, a: BusId, b: BusId) -> Complex64 {
        let pos = |id| {
            self.order
                .iter()
                .position(|&x| x == id)
                .unwrap_or_else(|| panic!("bus {id} not in matrix"))
        };
        self.get(pos(a), pos(b))
    }

    /// Stored entries of row `i` (structurally non-zero).
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        self.rows[i].iter().map(|(&j, &y)| (j, y))
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(BTreeMap::len).sum()
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for (&j, &y) in row {
                m[(i, j)] = y;
            }
        }
        m
    }

    /// Principal submatrix over the given bus indices (one island's block).
    pub fn block(&self, indices: &[usize]) -> DMatrix<Complex64> {
        let n = indices.len();
        DMatrix::from_fn(n, n, |a, b| self.get(indices[a], indices[b]))
    }

    /// Row-major dense complex product `Y·v`.
    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|(&j, &y)| y * v[j]).sum())
            .collect()
    }
}

/// Two-port π stamp of a branch: (y_ff, y_ft, y_tf, y_tt).
fn branch_stamp(r: f64, x: f64, b: f64, tap: f64) -> (Complex64, Complex64, Complex64, Complex64) {
    let ys = Complex64::new(r, x).inv();
    let charging = Complex64::new(0.0, b / 2.0);
    let ytt = ys + charging;
    let yff = ytt / (tap * tap);
    let yft = -ys / tap;
    (yff, yft, yft, ytt)
}

/// Builds the bus admittance matrix for the given breaker positions and
/// active faults.
///
/// Branches behind an open breaker contribute nothing. A fault tied to a
/// breaker sits in that breaker's switched zone and is isolated while the
/// breaker is open.
pub fn build_admittance(
    model: &GridModel,
    states: &BreakerStates,
    active_faults: &[&FaultSpec],
) -> AdmittanceMatrix {
    let mut y = AdmittanceMatrix::zeros(model.buses.iter().map(|b| b.id).collect());
    let idx = |id: BusId| model.bus_index(id).expect("validated bus reference");

    for (i, bus) in model.buses.iter().enumerate() {
        if bus.shunt_b != 0.0 {
            y.add(i, i, Complex64::new(0.0, bus.shunt_b));
        }
    }
    for br in &model.branches {
        if !model.branch_closed(br, states) {
            continue;
        }
        let (f, t) = (idx(br.from_bus), idx(br.to_bus));
        let (yff, yft, ytf, ytt) = branch_stamp(br.r, br.x, br.b, br.tap);
        y.add(f, f, yff);
        y.add(f, t, yft);
        y.add(t, f, ytf);
        y.add(t, t, ytt);
    }
    for fault in active_faults {
        if fault.is_isolated(states) {
            continue;
        }
        let fb = idx(fault.bus);
        y.add(fb, fb, fault.y_fault);
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::case::{load_case, IEEE39_MG_CASE};
    use crate::model::test_support::two_bus;
    use crate::model::BreakerState;
    use proptest::prelude::*;

    const TOL: f64 = 1e-12;

    fn close(a: Complex64, b: Complex64) -> bool {
        (a - b).norm() < TOL
    }

    #[test]
    fn two_bus_hand_substitution() {
        let m = two_bus(0.1, false);
        let y = build_admittance(&m, &m.initial_breaker_states(), &[]);
        let j10 = Complex64::new(0.0, 10.0);
        assert!(close(y.get(0, 0), -j10));
        assert!(close(y.get(0, 1), j10));
        assert!(close(y.get(1, 0), j10));
        assert!(close(y.get(1, 1), -j10));
    }

    #[test]
    fn open_breaker_removes_branch() {
        let m = two_bus(0.1, true);
        let mut st = m.initial_breaker_states();
        st.set(1, BreakerState::Open);
        let y = build_admittance(&m, &st, &[]);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(y.get(i, j), Complex64::default());
            }
        }
    }

    #[test]
    fn fault_adds_exactly_its_admittance() {
        let m = load_case(IEEE39_MG_CASE).unwrap();
        let st = m.initial_breaker_states();
        let fault = &m.faults[0];
        let y0 = build_admittance(&m, &st, &[]);
        let y1 = build_admittance(&m, &st, &[fault]);
        let k = m.bus_index(24).unwrap();
        assert!(close(y1.get(k, k) - y0.get(k, k), fault.y_fault));
        for i in 0..m.bus_count() {
            for j in 0..m.bus_count() {
                if (i, j) != (k, k) {
                    assert_eq!(y1.get(i, j), y0.get(i, j));
                }
            }
        }
    }

    #[test]
    fn fault_in_open_switched_zone_is_isolated() {
        let m = load_case(IEEE39_MG_CASE).unwrap();
        let mut st = m.initial_breaker_states();
        st.set(1, BreakerState::Open);
        let fault = &m.faults[0];
        let y_open = build_admittance(&m, &st, &[]);
        let y_f = build_admittance(&m, &st, &[fault]);
        assert_eq!(y_open, y_f);
        let k24 = m.bus_index(24).unwrap();
        assert_eq!(y_open.get(k24, k24), Complex64::default());
    }

    #[test]
    fn ieee39_is_symmetric() {
        let m = load_case(IEEE39_MG_CASE).unwrap();
        let y = build_admittance(&m, &m.initial_breaker_states(), &[&m.faults[0]]);
        let n = y.dim();
        for i in 0..n {
            for j in 0..n {
                assert!(close(y.get(i, j), y.get(j, i)));
            }
        }
    }

    proptest! {
        #[test]
        fn row_sums_equal_shunts_without_taps(
            r in proptest::collection::vec(0.0f64..0.05, 4),
            x in proptest::collection::vec(0.01f64..0.5, 4),
            b in proptest::collection::vec(0.0f64..0.5, 4),
        ) {
            use crate::model::test_support::*;
            use crate::model::{BusKind, Scenario};
            let edges = [(1, 2), (2, 3), (3, 4), (1, 4)];
            let branches: Vec<_> = edges
                .iter()
                .enumerate()
                .map(|(k, &(f, t))| {
                    let mut br = line(f, t, r[k], x[k]);
                    br.b = b[k];
                    br
                })
                .collect();
            let m = GridModel::new(
                "ring", 60.0, 100.0,
                vec![bus(1, BusKind::Slack), bus(2, BusKind::PQ), bus(3, BusKind::PQ), bus(4, BusKind::PQ)],
                branches, vec![], vec![machine("G1", 1, 0.0)], vec![], vec![], Scenario::default(),
            ).unwrap();
            let y = build_admittance(&m, &m.initial_breaker_states(), &[]);
            for (i, id) in y.bus_ids().iter().enumerate() {
                let sum: Complex64 = y.row(i).map(|(_, v)| v).sum();
                let charging: f64 = edges
                    .iter()
                    .enumerate()
                    .filter(|(_, &(f, t))| f == *id || t == *id)
                    .map(|(k, _)| b[k] / 2.0)
                    .sum();
                prop_assert!((sum - Complex64::new(0.0, charging)).norm() < 1e-9);
            }
        }
    }
}
