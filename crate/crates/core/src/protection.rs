//! Limit monitoring, violation logging and breaker actuation scheduling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dynamics::{EventOrigin, SimEvent};
use crate::model::{BreakerId, BreakerState, BusId, GridModel};
use crate::netio::{BreakerAction, BreakerCommand};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtectionError {
    #[error("unknown breaker {0}")]
    UnknownBreaker(u16),
    #[error("inconsistent limits: {0}")]
    BadLimits(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtectionLimits {
    /// Hz
    pub of1: f64,
    pub uf1: f64,
    /// p.u.
    pub ov: f64,
    pub uv: f64,
}

impl Default for ProtectionLimits {
    fn default() -> Self {
        Self {
            of1: 61.0,
            uf1: 58.5,
            ov: 1.05,
            uv: 0.95,
        }
    }
}

impl ProtectionLimits {
    pub fn validate(&self, f_nominal: f64) -> Result<(), ProtectionError> {
        if !(self.of1 > f_nominal && f_nominal > self.uf1) {
            return Err(ProtectionError::BadLimits(format!(
                "need of1 > {f_nominal} > uf1, got {} / {}",
                self.of1, self.uf1
            )));
        }
        if !(self.ov > 1.0 && 1.0 > self.uv) {
            return Err(ProtectionError::BadLimits(format!(
                "need ov > 1 > uv, got {} / {}",
                self.ov, self.uv
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    OverFreq,
    UnderFreq,
    OverVolt,
    UnderVolt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub bus: BusId,
    pub t_start: f64,
    pub t_end: f64,
    /// Worst value seen: Hz for frequency kinds, p.u. for voltage kinds.
    pub extremum: f64,
}

impl Violation {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusSample {
    pub bus: BusId,
    /// Hz; NaN when the bus is de-energized.
    pub f_est: f64,
    pub v_mag: f64,
}

/// Violation intervals under sample-and-hold: a sample at `t` stands for
/// `[t, t + dt)`, so an interval's length is exactly its sample count × dt.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ViolationLog {
    open: BTreeMap<(ViolationKind, BusId), Violation>,
    closed: Vec<Violation>,
}

impl ViolationLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// All intervals, open ones included, ordered by start time.
    pub fn violations(&self) -> Vec<Violation> {
        let mut all: Vec<Violation> = self.closed.iter().chain(self.open.values()).copied().collect();
        all.sort_by(|a, b| a.t_start.total_cmp(&b.t_start).then(a.kind.cmp(&b.kind)));
        all
    }

    pub fn total_duration(&self, kind: ViolationKind, bus: BusId) -> f64 {
        self.closed
            .iter()
            .chain(self.open.values())
            .filter(|v| v.kind == kind && v.bus == bus)
            .map(Violation::duration)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.open.is_empty() && self.closed.is_empty()
    }
}

fn breaches(s: &BusSample, limits: &ProtectionLimits) -> [(ViolationKind, bool, f64); 4] {
    // NaN comparisons are false, so a dead bus never breaches.
    [
        (ViolationKind::OverFreq, s.f_est > limits.of1, s.f_est),
        (ViolationKind::UnderFreq, s.f_est < limits.uf1, s.f_est),
        (ViolationKind::OverVolt, s.v_mag > limits.ov, s.v_mag),
        (ViolationKind::UnderVolt, s.v_mag < limits.uv && s.f_est.is_finite(), s.v_mag),
    ]
}

/// Folds one sampling instant into the log. Returns the violations opened
/// by this sample.
pub fn check_limits(
    t: f64,
    dt: f64,
    samples: &[BusSample],
    limits: &ProtectionLimits,
    log: &mut ViolationLog,
) -> Vec<Violation> {
    let mut opened = Vec::new();
    for s in samples {
        for (kind, hit, value) in breaches(s, limits) {
            let key = (kind, s.bus);
            if !hit {
                if let Some(v) = log.open.remove(&key) {
                    log.closed.push(v);
                }
                continue;
            }
            let worse = |a: f64, b: f64| match kind {
                ViolationKind::OverFreq | ViolationKind::OverVolt => a.max(b),
                ViolationKind::UnderFreq | ViolationKind::UnderVolt => a.min(b),
            };
            match log.open.get_mut(&key) {
                Some(v) => {
                    v.t_end = t + dt;
                    v.extremum = worse(v.extremum, value);
                }
                None => {
                    let v = Violation {
                        kind,
                        bus: s.bus,
                        t_start: t,
                        t_end: t + dt,
                        extremum: value,
                    };
                    log.open.insert(key, v);
                    opened.push(v);
                }
            }
        }
    }
    opened
}

/// Limit monitor with optional tripping. Tripping is off unless a breaker is
/// configured: the studied attacks rely on the microgrid riding through.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtectionConfig {
    pub limits: ProtectionLimits,
    /// Breaker opened when any violation starts.
    pub trip_breaker: Option<BreakerId>,
}

/// Pending breaker actuations fed by remote commands and local relays.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuationQueue {
    pending: Vec<SimEvent>,
    /// State each breaker will have once every pending event has executed.
    projected: BTreeMap<BreakerId, BreakerState>,
    last_at: BTreeMap<BreakerId, f64>,
}

impl ActuationQueue {
    pub fn new(model: &GridModel) -> Self {
        Self {
            pending: Vec::new(),
            projected: model.breakers.iter().map(|b| (b.id, b.state)).collect(),
            last_at: BTreeMap::new(),
        }
    }

    pub fn pending(&self) -> &[SimEvent] {
        &self.pending
    }

    /// Removes and returns the events due at boundary `t`, in order.
    pub fn take_due(&mut self, t: f64) -> Vec<SimEvent> {
        let (due, rest) = self.pending.iter().partition(|e| e.is_due(t));
        self.pending = rest;
        due
    }

    fn push(&mut self, id: BreakerId, state: BreakerState, at: f64, origin: EventOrigin) -> Option<SimEvent> {
        if self.projected.get(&id) == Some(&state) {
            return None;
        }
        // Later commands on a breaker never overtake earlier ones.
        let at = self.last_at.get(&id).map_or(at, |&prev| at.max(prev));
        let ev = SimEvent::breaker(at, id, state, origin);
        let pos = self.pending.partition_point(|e| e.at <= at);
        self.pending.insert(pos, ev);
        self.projected.insert(id, state);
        self.last_at.insert(id, at);
        Some(ev)
    }

    /// Relay trip: opens `id` at the next boundary.
    pub fn trip(&mut self, id: BreakerId, now: f64) -> Option<SimEvent> {
        self.push(id, BreakerState::Open, now, EventOrigin::Scripted)
    }
}

/// Maps a remote command onto a breaker event at `max(execute_at, now)`.
/// Returns `Ok(None)` when the command would not change the breaker.
pub fn schedule_breaker(
    cmd: &BreakerCommand,
    queue: &mut ActuationQueue,
    now: f64,
) -> Result<Option<SimEvent>, ProtectionError> {
    let id: BreakerId = cmd.breaker_id;
    if !queue.projected.contains_key(&id) {
        return Err(ProtectionError::UnknownBreaker(cmd.breaker_id));
    }
    let state = match cmd.action {
        BreakerAction::Open => BreakerState::Open,
        BreakerAction::Close => BreakerState::Closed,
    };
    let at = cmd.execute_at().map_or(now, |t| t.max(now));
    Ok(queue.push(id, state, at, EventOrigin::Remote))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::EventKind;
    use crate::model::case::{load_case, IEEE39_MG_CASE};
    use proptest::prelude::*;

    fn sample(f: f64, v: f64) -> [BusSample; 1] {
        [BusSample {
            bus: 24,
            f_est: f,
            v_mag: v,
        }]
    }

    #[test]
    fn default_limits_are_consistent() {
        ProtectionLimits::default().validate(60.0).unwrap();
        let bad = ProtectionLimits {
            uf1: 60.5,
            ..Default::default()
        };
        assert!(bad.validate(60.0).is_err());
    }

    #[test]
    fn in_band_sample_is_clean() {
        let mut log = ViolationLog::new();
        check_limits(0.0, 1e-3, &sample(59.0, 1.0), &ProtectionLimits::default(), &mut log);
        assert!(log.is_empty());
    }

    #[test]
    fn over_frequency_opens_a_violation() {
        let mut log = ViolationLog::new();
        let opened = check_limits(0.0, 1e-3, &sample(61.5, 1.0), &ProtectionLimits::default(), &mut log);
        assert_eq!(opened.len(), 1);
        assert_eq!(opened[0].kind, ViolationKind::OverFreq);
    }

    #[test]
    fn under_voltage_opens_extends_and_closes() {
        let lim = ProtectionLimits::default();
        let mut log = ViolationLog::new();
        let dt = 1e-3;
        for (k, v) in [1.0, 0.94, 0.93, 0.96, 0.94].into_iter().enumerate() {
            check_limits(k as f64 * dt, dt, &sample(60.0, v), &lim, &mut log);
        }
        let vs = log.violations();
        assert_eq!(vs.len(), 2);
        assert_eq!(vs[0].kind, ViolationKind::UnderVolt);
        assert!((vs[0].t_start - 1e-3).abs() < 1e-15 && (vs[0].t_end - 3e-3).abs() < 1e-15);
        assert_eq!(vs[0].extremum, 0.93);
        assert!((log.total_duration(ViolationKind::UnderVolt, 24) - 3e-3).abs() < 1e-15);
    }

    #[test]
    fn dead_bus_is_not_a_violation() {
        let mut log = ViolationLog::new();
        check_limits(0.0, 1e-3, &sample(f64::NAN, 0.0), &ProtectionLimits::default(), &mut log);
        assert!(log.is_empty());
    }

    fn cmd(action: BreakerAction, at_us: u64) -> BreakerCommand {
        BreakerCommand {
            seq: 0,
            breaker_id: 1,
            action,
            execute_at_us: at_us,
        }
    }

    #[test]
    fn open_command_schedules_at_requested_time() {
        let m = load_case(IEEE39_MG_CASE).unwrap();
        let mut q = ActuationQueue::new(&m);
        let ev = schedule_breaker(&cmd(BreakerAction::Open, 1_000_000), &mut q, 0.2)
            .unwrap()
            .unwrap();
        assert_eq!(ev.kind, EventKind::BreakerOpen);
        assert_eq!(ev.at, 1.0);
        assert_eq!(ev.origin, EventOrigin::Remote);
        assert!(q.take_due(0.999).is_empty());
        assert_eq!(q.take_due(1.0), vec![ev]);
    }

    #[test]
    fn close_on_closed_breaker_is_a_no_op() {
        let m = load_case(IEEE39_MG_CASE).unwrap();
        let mut q = ActuationQueue::new(&m);
        assert_eq!(schedule_breaker(&cmd(BreakerAction::Close, 0), &mut q, 0.5), Ok(None));
        assert!(q.pending().is_empty());
    }

    #[test]
    fn past_execution_time_clamps_to_now() {
        let m = load_case(IEEE39_MG_CASE).unwrap();
        let mut q = ActuationQueue::new(&m);
        let ev = schedule_breaker(&cmd(BreakerAction::Open, 100_000), &mut q, 0.75)
            .unwrap()
            .unwrap();
        assert_eq!(ev.at, 0.75);
    }

    #[test]
    fn unknown_breaker_is_rejected() {
        let m = load_case(IEEE39_MG_CASE).unwrap();
        let mut q = ActuationQueue::new(&m);
        let mut c = cmd(BreakerAction::Open, 0);
        c.breaker_id = 77;
        assert_eq!(
            schedule_breaker(&c, &mut q, 0.0),
            Err(ProtectionError::UnknownBreaker(77))
        );
    }

    #[test]
    fn relay_trip_respects_projection() {
        let m = load_case(IEEE39_MG_CASE).unwrap();
        let mut q = ActuationQueue::new(&m);
        assert!(q.trip(1, 0.3).is_some());
        assert!(q.trip(1, 0.4).is_none());
    }

    proptest! {
        #[test]
        fn intervals_cover_exactly_the_out_of_limit_samples(
            vs in proptest::collection::vec(0.9f64..1.1, 1..300)
        ) {
            let lim = ProtectionLimits::default();
            let dt = 1e-3;
            let mut log = ViolationLog::new();
            for (k, &v) in vs.iter().enumerate() {
                check_limits(k as f64 * dt, dt, &sample(60.0, v), &lim, &mut log);
            }
            let all = log.violations();
            for kind in [ViolationKind::UnderVolt, ViolationKind::OverVolt] {
                let iv: Vec<_> = all.iter().filter(|v| v.kind == kind).collect();
                for w in iv.windows(2) {
                    prop_assert!(w[0].t_end < w[1].t_start);
                }
                for (k, &v) in vs.iter().enumerate() {
                    let t = k as f64 * dt + 0.5 * dt;
                    let inside = iv.iter().any(|i| i.t_start <= t && t < i.t_end);
                    let out = match kind {
                        ViolationKind::UnderVolt => v < lim.uv,
                        _ => v > lim.ov,
                    };
                    prop_assert_eq!(inside, out);
                }
            }
        }

        #[test]
        fn commands_on_one_breaker_keep_their_order(
            times in proptest::collection::vec(0u64..2_000_000, 1..20)
        ) {
            let m = load_case(IEEE39_MG_CASE).unwrap();
            let mut q = ActuationQueue::new(&m);
            let mut issued = Vec::new();
            for (k, &t) in times.iter().enumerate() {
                let action = if k % 2 == 0 { BreakerAction::Open } else { BreakerAction::Close };
                if let Some(ev) = schedule_breaker(&cmd(action, t), &mut q, 0.0).unwrap() {
                    issued.push(ev);
                }
            }
            let out = q.take_due(10.0);
            prop_assert_eq!(out.len(), issued.len());
            for w in out.windows(2) {
                prop_assert!(w[0].at <= w[1].at);
                prop_assert_ne!(w[0].kind, w[1].kind);
            }
            prop_assert_eq!(out, issued);
        }
    }
}
