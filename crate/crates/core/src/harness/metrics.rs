use serde::{Deserialize, Serialize};

use crate::model::BusId;
use crate::protection::{check_limits, BusSample, ProtectionLimits, Violation, ViolationKind, ViolationLog};

/// Half-width of the settling band, Hz.
pub const SETTLE_BAND: f64 = 0.02;
/// Time the frequency must stay inside the band, s.
pub const SETTLE_HOLD: f64 = 0.2;
/// Metrics window opens this long before the first event, s.
pub const PRE_EVENT_WINDOW: f64 = 0.1;

/// One row per simulation step at the monitored bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t_s: f64,
    pub f_hz: f64,
    pub v_pu: f64,
    pub v_ang_rad: f64,
    pub p_mw: f64,
    pub q_mvar: f64,
    pub breaker: u8,
    pub fault: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub bus: BusId,
    pub dt: f64,
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn write_csv(&self, w: impl std::io::Write) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl std::io::Read, bus: BusId) -> Result<Self, csv::Error> {
        let rows: Vec<TraceRow> = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<Result<_, _>>()?;
        let dt = match rows.as_slice() {
            [a, b, ..] => b.t_s - a.t_s,
            _ => 0.0,
        };
        Ok(Self { bus, dt, rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Stable,
    Marginal,
    Unstable,
}

impl Verdict {
    pub fn label(self) -> &'static str {
        match self {
            Verdict::Stable => "Stable",
            Verdict::Marginal => "Marginal",
            Verdict::Unstable => "Unstable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub f_nadir: f64,
    pub f_peak: f64,
    /// After the final event; `None` if the band was never held.
    pub t_settle: Option<f64>,
    pub v_min: f64,
    pub v_max: f64,
    pub uv_duration: f64,
    pub violations: Vec<Violation>,
    pub verdict: Verdict,
}

impl CaseMetrics {
    /// Largest frequency deviation from nominal inside the window, Hz.
    pub fn max_deviation(&self, f_nominal: f64) -> f64 {
        (self.f_nadir - f_nominal).abs().max((self.f_peak - f_nominal).abs())
    }
}

/// Replays the trace through the limit monitor.
pub fn violation_log(trace: &Trace, limits: &ProtectionLimits) -> ViolationLog {
    let mut log = ViolationLog::new();
    for r in &trace.rows {
        let s = [BusSample {
            bus: trace.bus,
            f_est: r.f_hz,
            v_mag: r.v_pu,
        }];
        check_limits(r.t_s, trace.dt, &s, limits, &mut log);
    }
    log
}

/// First instant at or after `from` from which `|f − f0| ≤ band` holds for
/// `hold` seconds of trace.
pub fn settling_instant(rows: &[TraceRow], from: f64, f0: f64, band: f64, hold: f64) -> Option<f64> {
    let eps = 1e-9;
    let start = rows.partition_point(|r| r.t_s < from - eps);
    let mut run_start: Option<f64> = None;
    for r in &rows[start..] {
        if (r.f_hz - f0).abs() <= band {
            let t0 = *run_start.get_or_insert(r.t_s);
            if r.t_s - t0 >= hold - eps {
                return Some(t0);
            }
        } else {
            run_start = None;
        }
    }
    None
}

/// Frequency and voltage figures of merit for a trace. `event_times` holds
/// every applied event (faults and breaker operations).
pub fn compute_metrics(
    trace: &Trace,
    event_times: &[f64],
    limits: &ProtectionLimits,
    f_nominal: f64,
) -> CaseMetrics {
    let eps = 1e-9;
    let first = event_times.iter().copied().fold(f64::INFINITY, f64::min);
    let last = event_times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let t_begin = trace.rows.first().map_or(0.0, |r| r.t_s);
    let window_start = if first.is_finite() { first - PRE_EVENT_WINDOW } else { t_begin };
    let settle_from = if last.is_finite() { last } else { t_begin };

    let (mut f_nadir, mut f_peak) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut v_min, mut v_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in trace.rows.iter().filter(|r| r.t_s >= window_start - eps) {
        // A dead-bus NaN never wins a min/max.
        f_nadir = f_nadir.min(r.f_hz);
        f_peak = f_peak.max(r.f_hz);
        v_min = v_min.min(r.v_pu);
        v_max = v_max.max(r.v_pu);
    }

    let log = violation_log(trace, limits);
    let uv_duration = log.total_duration(ViolationKind::UnderVolt, trace.bus);
    let violations = log.violations();
    let t_settle = settling_instant(&trace.rows, settle_from, f_nominal, SETTLE_BAND, SETTLE_HOLD)
        .map(|t| (t - settle_from).max(0.0));
    let verdict = match (violations.is_empty(), t_settle.is_some()) {
        (true, true) => Verdict::Stable,
        (false, true) => Verdict::Marginal,
        _ => Verdict::Unstable,
    };
    CaseMetrics {
        f_nadir,
        f_peak,
        t_settle,
        v_min,
        v_max,
        uv_duration,
        violations,
        verdict,
    }
}
