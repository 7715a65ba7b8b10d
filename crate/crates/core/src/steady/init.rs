use num_complex::Complex64;

use super::{PowerFlowSolution, SteadyError};
use crate::dynamics::{
    BusState, DynamicState, FrequencyEstimator, InverterState, MachineState, Network,
    ESTIMATOR_TC,
};
use crate::model::GridModel;

/// Apparent power above which a source is rejected at initialization, in
/// p.u. of its own rating.
pub const MAX_INIT_LOADING: f64 = 1.0;

/// Splits each bus's generation among its sources, system-base p.u.
///
/// Active power follows the scheduled dispatch, with the slack machine
/// absorbing the residual; reactive power is shared in proportion to each
/// source's apparent-power headroom at that active power.
/// Returns (machine powers, inverter powers).
pub fn source_dispatch(
    model: &GridModel,
    pf: &PowerFlowSolution,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let sb = model.s_base;
    let slack = model.slack_bus();
    let mut sm = vec![Complex64::default(); model.machines.len()];
    let mut si = vec![Complex64::default(); model.inverters.len()];
    for (i, bus) in model.buses.iter().enumerate() {
        let gen = Complex64::new(
            (pf.p_inj[i] + bus.load_p) / sb,
            (pf.q_inj[i] + bus.load_q) / sb,
        );
        let ms: Vec<usize> = (0..model.machines.len())
            .filter(|&k| model.machines[k].bus == bus.id)
            .collect();
        let is: Vec<usize> = (0..model.inverters.len())
            .filter(|&k| model.inverters[k].bus == bus.id)
            .collect();
        if ms.is_empty() && is.is_empty() {
            continue;
        }
        let mut p_left = gen.re;
        let mut p_inv = vec![0.0; is.len()];
        for (n, &k) in is.iter().enumerate() {
            p_inv[n] = model.inverters[k].p_set / sb;
            p_left -= p_inv[n];
        }
        let mut p_mach = vec![0.0; ms.len()];
        for (n, &k) in ms.iter().enumerate() {
            // Last machine at the bus (and the slack) takes the residual.
            p_mach[n] = if bus.id == slack || n + 1 == ms.len() {
                p_left
            } else {
                model.machines[k].p_dispatch / sb
            };
            p_left -= p_mach[n];
        }
        let room = |rating: f64, p: f64| ((rating / sb).powi(2) - p * p).max(0.0).sqrt();
        let mut w_inv: Vec<f64> = is
            .iter()
            .zip(&p_inv)
            .map(|(&k, &p)| room(model.inverters[k].rating_mva, p))
            .collect();
        let mut w_mach: Vec<f64> = ms
            .iter()
            .zip(&p_mach)
            .map(|(&k, &p)| room(model.machines[k].rating_mva, p))
            .collect();
        if w_inv.iter().chain(&w_mach).sum::<f64>() <= 0.0 {
            w_inv = is.iter().map(|&k| model.inverters[k].rating_mva).collect();
            w_mach = ms.iter().map(|&k| model.machines[k].rating_mva).collect();
        }
        let w_total: f64 = w_inv.iter().chain(&w_mach).sum();
        for (n, &k) in is.iter().enumerate() {
            si[k] = Complex64::new(p_inv[n], gen.im * w_inv[n] / w_total);
        }
        for (n, &k) in ms.iter().enumerate() {
            sm[k] = Complex64::new(p_mach[n], gen.im * w_mach[n] / w_total);
        }
    }
    (sm, si)
}

/// Builds an equilibrium dynamic state from a converged power flow.
///
/// Loads become constant admittances at their solved voltages. Source EMFs
/// are placed behind their reactances so the network reproduces the power
/// flow, and mechanical power and droop set-points are then taken from the
/// resulting network solve so that every derivative is zero.
pub fn init_dynamics(
    model: &GridModel,
    pf: &PowerFlowSolution,
) -> Result<DynamicState, SteadyError> {
    let n = model.bus_count();
    if pf.v_mag.len() != n {
        return Err(SteadyError::Mismatch(format!(
            "{} buses in solution, {n} in model",
            pf.v_mag.len()
        )));
    }
    let sb = model.s_base;
    let v: Vec<Complex64> = (0..n).map(|i| pf.voltage(i)).collect();
    let load_y: Vec<Complex64> = model
        .buses
        .iter()
        .zip(&v)
        .map(|(b, vi)| Complex64::new(b.load_p, -b.load_q) / sb / vi.norm_sqr())
        .collect();

    let (sm, si) = source_dispatch(model, pf);
    let emf = |s: Complex64, bus: u32, x_unit: f64, rating: f64| {
        let vt = v[model.bus_index(bus).unwrap()];
        let i = (s / vt).conj();
        vt + Complex64::new(0.0, x_unit * sb / rating) * i
    };
    let mut machines = Vec::with_capacity(model.machines.len());
    for (m, &s) in model.machines.iter().zip(&sm) {
        check_loading(&m.id, s, m.rating_mva / sb)?;
        let e = emf(s, m.bus, m.xdp, m.rating_mva);
        machines.push(MachineState {
            delta: e.arg(),
            omega: 1.0,
            p_mech: s.re,
            p_gov_ref: s.re,
            e_mag: e.norm(),
        });
    }
    let mut inverters = Vec::with_capacity(model.inverters.len());
    for (p, &s) in model.inverters.iter().zip(&si) {
        check_loading(&p.id, s, p.rating_mva / sb)?;
        let e = emf(s, p.bus, p.x_out, p.rating_mva);
        inverters.push(InverterState {
            theta: e.arg(),
            p_filt: s.re,
            q_filt: s.im,
            p_ref: s.re,
            q_ref: s.im,
            e_ref: e.norm(),
        });
    }

    let breakers = model.initial_breaker_states();
    let faults_active = vec![false; model.faults.len()];
    let mut state = DynamicState {
        t: 0.0,
        step: 0,
        machines,
        inverters,
        buses: vec![BusState::default(); n],
        breakers,
        faults_active,
        load_y,
    };

    // Reconcile with the network actually used by the integrator.
    let net = Network::build(model, &state.breakers, &state.faults_active, &state.load_y)?;
    let (em, ei) = state.source_emfs(model);
    let vn = net.solve(&em, &ei);
    for (k, m) in state.machines.iter_mut().enumerate() {
        let pe = (em[k] * net.machine_current(k, em[k], &vn).conj()).re;
        m.p_mech = pe;
        m.p_gov_ref = pe;
    }
    for (k, (s, p)) in state.inverters.iter_mut().zip(&model.inverters).enumerate() {
        let vt = vn[model.bus_index(p.bus).unwrap()];
        let sm = vt * net.inverter_current(k, ei[k], &vn).conj();
        s.p_filt = sm.re;
        s.p_ref = sm.re;
        s.q_filt = sm.im;
        s.q_ref = sm.im;
    }
    for (i, b) in state.buses.iter_mut().enumerate() {
        b.v = vn[i];
        b.estimator = FrequencyEstimator::new(model.f_nominal, ESTIMATOR_TC);
        if net.is_alive(i) {
            b.estimator.reset(vn[i].arg());
        }
        b.f_est = b.estimator.frequency();
    }
    Ok(state)
}

fn check_loading(id: &str, s: Complex64, k: f64) -> Result<(), SteadyError> {
    let loading = s.norm() / k;
    if loading > MAX_INIT_LOADING {
        return Err(SteadyError::SourceOverloaded {
            id: id.to_string(),
            loading,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Simulator;
    use crate::model::case::{load_case, IEEE39_CASE, IEEE39_MG_CASE};
    use crate::steady::{solve_power_flow, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};

    fn init(text: &str) -> (GridModel, DynamicState) {
        let m = load_case(text).unwrap();
        let pf = solve_power_flow(&m, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER).unwrap();
        let s = init_dynamics(&m, &pf).unwrap();
        (m, s)
    }

    #[test]
    fn initial_state_is_a_fixed_point() {
        for text in [IEEE39_CASE, IEEE39_MG_CASE] {
            let (m, s) = init(text);
            let sim = Simulator::new(&m, &s).unwrap();
            let d = sim.derivatives(&s);
            assert!(d.max_abs() < 1e-12, "{}", d.max_abs());
        }
    }

    #[test]
    fn network_voltages_reproduce_power_flow() {
        let m = load_case(IEEE39_MG_CASE).unwrap();
        let pf = solve_power_flow(&m, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER).unwrap();
        let s = init_dynamics(&m, &pf).unwrap();
        for (i, b) in s.buses.iter().enumerate() {
            assert!((b.v - pf.voltage(i)).norm() < 1e-7, "bus {}", m.buses[i].id);
            assert_eq!(b.f_est, 60.0);
        }
    }

    #[test]
    fn dispatch_sums_to_bus_generation() {
        let m = load_case(IEEE39_MG_CASE).unwrap();
        let pf = solve_power_flow(&m, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER).unwrap();
        let (sm, si) = source_dispatch(&m, &pf);
        let i24 = m.bus_index(24).unwrap();
        let b = &m.buses[i24];
        let total: Complex64 = m
            .machines
            .iter()
            .zip(&sm)
            .filter(|(g, _)| g.bus == 24)
            .map(|(_, s)| *s)
            .chain(si.iter().copied())
            .sum();
        assert!((total.re * 100.0 - (pf.p_inj[i24] + b.load_p)).abs() < 1e-9);
        assert!((total.im * 100.0 - (pf.q_inj[i24] + b.load_q)).abs() < 1e-9);
    }

    #[test]
    fn overloaded_source_is_rejected() {
        let mut m = load_case(IEEE39_CASE).unwrap();
        let pf = solve_power_flow(&m, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER).unwrap();
        m.machines[0].rating_mva = 10.0;
        assert!(matches!(
            init_dynamics(&m, &pf),
            Err(SteadyError::SourceOverloaded { .. })
        ));
    }
}
