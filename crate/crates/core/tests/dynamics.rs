use gridstorm_core::dynamics::{
    DynamicState, EventOrigin, MachineState, SimEvent, SimOptions, Simulator, BusState,
};
use gridstorm_core::model::case::IEEE39_MG_CASE;
use gridstorm_core::model::{
    parse_case, Branch, BranchKind, BreakerState, Bus, BusKind, GridModel, MgSystem, Scenario,
    SynchronousMachine,
};
use gridstorm_core::steady::{init_dynamics, solve_power_flow, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};
use num_complex::Complex64;

fn mg_model(system: MgSystem) -> GridModel {
    let mut doc = parse_case(IEEE39_MG_CASE).unwrap();
    doc.scenario.system = Some(system);
    doc.build().unwrap()
}

fn initial(model: &GridModel) -> DynamicState {
    let pf = solve_power_flow(model, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER).unwrap();
    init_dynamics(model, &pf).unwrap()
}

fn bus(id: u32, kind: BusKind) -> Bus {
    Bus {
        id,
        base_kv: 345.0,
        kind,
        load_p: 0.0,
        load_q: 0.0,
        shunt_b: 0.0,
        v_set: 1.0,
    }
}

fn lossless_line(from: u32, to: u32, x: f64) -> Branch {
    Branch {
        id: format!("{from}-{to}"),
        from_bus: from,
        to_bus: to,
        r: 0.0,
        x,
        b: 0.0,
        tap: 1.0,
        kind: BranchKind::Line,
        breaker_id: None,
    }
}

fn machine(id: &str, at: u32, h: f64, d: f64) -> SynchronousMachine {
    SynchronousMachine {
        id: id.into(),
        bus: at,
        rating_mva: 100.0,
        h,
        d,
        xdp: 0.2,
        governor_droop: 0.05,
        governor_tc: 0.5,
        p_dispatch: 0.0,
    }
}

fn bare_state(model: &GridModel, machines: Vec<MachineState>) -> DynamicState {
    DynamicState {
        t: 0.0,
        step: 0,
        machines,
        inverters: vec![],
        buses: vec![BusState::default(); model.bus_count()],
        breakers: model.initial_breaker_states(),
        faults_active: vec![false; model.faults.len()],
        load_y: vec![Complex64::default(); model.bus_count()],
    }
}

fn packed(s: &DynamicState) -> Vec<f64> {
    let mut x = Vec::new();
    for m in &s.machines {
        x.extend([m.delta, m.omega, m.p_mech]);
    }
    for i in &s.inverters {
        x.extend([i.theta, i.p_filt, i.q_filt]);
    }
    for b in &s.buses {
        x.extend([b.v.re, b.v.im]);
    }
    x
}

#[test]
fn equilibrium_is_held_for_one_thousand_steps() {
    for system in [MgSystem::I, MgSystem::II] {
        let model = mg_model(system);
        let s0 = initial(&model);
        let mut sim = Simulator::new(&model, &s0).unwrap();
        let mut s = s0.clone();
        for _ in 0..1000 {
            s = sim.step(&s, 1e-3, &[]).unwrap();
        }
        let drift = packed(&s0)
            .iter()
            .zip(packed(&s))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-8, "system {system:?}: drift {drift:e}");
        let f = s.buses[model.bus_index(24).unwrap()].f_est;
        assert!((f - 60.0).abs() < 1e-6, "{f}");
    }
}

#[test]
fn swing_equation_substitution() {
    // Open-circuited machine: p_elec = 0, so dω/dt = p_mech / 2H.
    let model = GridModel::new(
        "swing",
        60.0,
        100.0,
        vec![bus(1, BusKind::Slack), bus(2, BusKind::PQ)],
        vec![lossless_line(1, 2, 0.1)],
        vec![],
        vec![machine("G1", 1, 5.0, 0.0)],
        vec![],
        vec![],
        Scenario::default(),
    )
    .unwrap();
    let m = MachineState {
        delta: 0.0,
        omega: 1.0,
        p_mech: 0.1,
        p_gov_ref: 0.1,
        e_mag: 1.0,
    };
    let mut state = bare_state(&model, vec![m]);
    let sim = Simulator::with_options(&model, &state, SimOptions { governors: false }).unwrap();
    let v = sim.solve_voltages(&state);
    for (b, v) in state.buses.iter_mut().zip(v) {
        b.v = v;
    }
    let d = sim.derivatives(&state);
    assert!((d.machines[0][1] - 0.01).abs() < 1e-12, "{:?}", d.machines[0]);
    assert_eq!(d.machines[0][0], 0.0);
}

#[test]
fn lossless_two_machine_energy_is_conserved() {
    let model = GridModel::new(
        "pair",
        60.0,
        100.0,
        vec![bus(1, BusKind::Slack), bus(2, BusKind::PV)],
        vec![lossless_line(1, 2, 0.3)],
        vec![],
        vec![machine("G1", 1, 4.0, 0.0), machine("G2", 2, 6.0, 0.0)],
        vec![],
        vec![],
        Scenario::default(),
    )
    .unwrap();
    let (e1, e2) = (1.05, 1.0);
    let m = |delta: f64, omega: f64, e_mag: f64| MachineState {
        delta,
        omega,
        p_mech: 0.0,
        p_gov_ref: 0.0,
        e_mag,
    };
    let s0 = bare_state(&model, vec![m(0.4, 1.003, e1), m(0.0, 0.999, e2)]);
    let mut sim = Simulator::with_options(&model, &s0, SimOptions { governors: false }).unwrap();

    // Internal-node reactance: two transient reactances plus the line.
    let x_total = 0.2 + 0.3 + 0.2;
    let omega_s = std::f64::consts::TAU * 60.0;
    let energy = |s: &DynamicState| {
        let kinetic: f64 = s
            .machines
            .iter()
            .zip([4.0, 6.0])
            .map(|(m, h)| h * omega_s * (m.omega - 1.0).powi(2))
            .sum();
        let d12 = s.machines[0].delta - s.machines[1].delta;
        kinetic + e1 * e2 / x_total * (1.0 - d12.cos())
    };
    let w0 = energy(&s0);
    let mut s = s0;
    let mut worst = 0.0_f64;
    for _ in 0..5000 {
        s = sim.step(&s, 1e-3, &[]).unwrap();
        worst = worst.max((energy(&s) - w0).abs() / w0);
    }
    assert!(worst < 1e-3, "relative energy drift {worst:e}");
}

/// Branch series losses plus shunt conductance losses, system-base p.u.
fn network_losses(model: &GridModel, s: &DynamicState) -> f64 {
    let v = |id| s.buses[model.bus_index(id).unwrap()].v;
    let mut loss = 0.0;
    for br in &model.branches {
        if !model.branch_closed(br, &s.breakers) {
            continue;
        }
        let dv = v(br.from_bus) / br.tap - v(br.to_bus);
        loss += br.series_admittance().re * dv.norm_sqr();
    }
    for (f, &on) in model.faults.iter().zip(&s.faults_active) {
        if on && !f.is_isolated(&s.breakers) {
            loss += f.y_fault.re * v(f.bus).norm_sqr();
        }
    }
    loss
}

#[test]
fn island_power_balance_through_fault_and_islanding() {
    let model = mg_model(MgSystem::I);
    let mut s = initial(&model);
    let mut sim = Simulator::new(&model, &s).unwrap();
    let mut events = SimEvent::scripted_faults(&model);
    events.push(SimEvent::breaker(1.0, 1, BreakerState::Open, EventOrigin::Scripted));
    events.push(SimEvent::breaker(1.2, 1, BreakerState::Closed, EventOrigin::Scripted));
    let dt = 1e-3;
    for k in 0..1300 {
        let t = k as f64 * dt;
        let due: Vec<SimEvent> = events.iter().copied().filter(|e| e.is_due(t)).collect();
        events.retain(|e| !e.is_due(t));
        s = sim.step(&s, dt, &due).unwrap();
        if k % 25 != 0 && due.is_empty() {
            continue;
        }
        let (pm, pi) = sim.source_powers(&s);
        let generated: f64 = pm.iter().chain(&pi).sum();
        let load: f64 = s
            .buses
            .iter()
            .zip(&s.load_y)
            .map(|(b, y)| b.v.norm_sqr() * y.re)
            .sum();
        let residual = generated - load - network_losses(&model, &s);
        assert!(residual.abs() < 1e-6, "t = {:.3}: residual {residual:e}", s.t);

        // Per island: net injections equal that island's losses.
        let part = &sim.network().partition;
        for (k, island) in part.islands.iter().enumerate() {
            if !part.energized[k] {
                continue;
            }
            let inj: f64 = island
                .iter()
                .map(|&id| sim.bus_injection(&s, model.bus_index(id).unwrap()).re)
                .sum();
            let mut sub = s.clone();
            for (i, b) in model.buses.iter().enumerate() {
                if !island.contains(&b.id) {
                    sub.buses[i].v = Complex64::default();
                }
            }
            let island_loss = network_losses(&model, &sub);
            assert!((inj - island_loss).abs() < 1e-6, "island {k}: {inj} vs {island_loss}");
        }
    }
}

#[test]
fn identical_inputs_give_bitwise_identical_trajectories() {
    let model = mg_model(MgSystem::II);
    let run = || {
        let mut s = initial(&model);
        let mut sim = Simulator::new(&model, &s).unwrap();
        let mut events = SimEvent::scripted_faults(&model);
        events.push(SimEvent::breaker(1.0, 1, BreakerState::Open, EventOrigin::Remote));
        let mut trace = Vec::new();
        for k in 0..1200 {
            let t = k as f64 * 1e-3;
            let due: Vec<SimEvent> = events.iter().copied().filter(|e| e.is_due(t)).collect();
            events.retain(|e| !e.is_due(t));
            s = sim.step(&s, 1e-3, &due).unwrap();
            trace.extend(packed(&s).into_iter().map(f64::to_bits));
            trace.push(s.buses[model.bus_index(24).unwrap()].f_est.to_bits());
        }
        trace
    };
    assert_eq!(run(), run());
}

#[test]
fn partition_matches_admittance_blocks_after_events() {
    let model = mg_model(MgSystem::I);
    let s0 = initial(&model);
    let mut sim = Simulator::new(&model, &s0).unwrap();
    let open = SimEvent::breaker(0.0, 1, BreakerState::Open, EventOrigin::Scripted);
    let s = sim.step(&s0, 1e-3, &[open]).unwrap();
    let part = &sim.network().partition;
    assert_eq!(part.len(), 2);
    let y = &sim.network().admittance;
    for i in 0..model.bus_count() {
        for (j, val) in y.row(i) {
            if val.norm() == 0.0 {
                continue;
            }
            let (a, b) = (model.buses[i].id, model.buses[j].id);
            assert_eq!(part.island_containing(a), part.island_containing(b), "{a}-{b}");
        }
    }
    assert!(s.buses.iter().all(|b| b.v.norm().is_finite()));
}
