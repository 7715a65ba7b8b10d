use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{CaseRecord, ScenarioNo, Verdict};
use crate::dynamics::EventKind;
use crate::model::MgSystem;
use crate::protection::ViolationKind;

/// Lowest voltage still counted as a slight under-voltage, p.u.
pub const SEVERE_UV_BELOW: f64 = 0.80;
/// Slack on |Δf| comparisons between cases, Hz.
pub const TREND_SLACK_HZ: f64 = 1e-3;

/// Voltage characterization from under-voltage excursions that begin at or
/// after the first breaker operation. `None` for `v_min` means none did.
pub fn voltage_label(attack_v_min: Option<f64>) -> &'static str {
    match attack_v_min {
        None => "Stable",
        Some(v) if v >= SEVERE_UV_BELOW => "Slight UV",
        Some(_) => "Severe UV",
    }
}

fn label_rank(label: &str) -> u8 {
    match label {
        "Stable" => 0,
        "Slight UV" => 1,
        _ => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub system: MgSystem,
    pub scenario: ScenarioNo,
    pub f_nadir: f64,
    pub f_peak: f64,
    pub max_dev_hz: f64,
    pub nadir_dev_hz: f64,
    pub t_settle: Option<f64>,
    pub v_min: f64,
    pub uv_duration: f64,
    /// Under-voltage time that started at or after the first breaker operation, s.
    pub attack_uv_duration: f64,
    pub attack_v_min: Option<f64>,
    pub breaker_ops: usize,
    pub voltage: String,
    pub verdict: Verdict,
    pub most_severe: bool,
}

impl SummaryRow {
    fn from_record(r: &CaseRecord) -> Self {
        let m = &r.metrics;
        let attack_start = r
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::BreakerOpen | EventKind::BreakerClose))
            .map(|e| e.t)
            .fold(f64::INFINITY, f64::min);
        let attack_uv: Vec<_> = m
            .violations
            .iter()
            .filter(|v| v.kind == ViolationKind::UnderVolt && v.t_start >= attack_start - 1e-9)
            .collect();
        let attack_v_min = attack_uv
            .iter()
            .map(|v| v.extremum)
            .reduce(f64::min);
        Self {
            system: r.system,
            scenario: r.scenario,
            f_nadir: m.f_nadir,
            f_peak: m.f_peak,
            max_dev_hz: m.max_deviation(r.f_nominal),
            nadir_dev_hz: (m.f_nadir - r.f_nominal).abs(),
            t_settle: m.t_settle,
            v_min: m.v_min,
            uv_duration: m.uv_duration,
            attack_uv_duration: attack_uv.iter().fold(0.0, |acc, v| acc + v.duration()),
            attack_v_min,
            breaker_ops: r
                .events
                .iter()
                .filter(|e| matches!(e.kind, EventKind::BreakerOpen | EventKind::BreakerClose))
                .count(),
            voltage: voltage_label(attack_v_min).to_owned(),
            verdict: m.verdict,
            most_severe: false,
        }
    }

    /// Larger is worse.
    fn severity_key(&self) -> (Verdict, u8, f64, f64, f64) {
        (
            self.verdict,
            label_rank(&self.voltage),
            self.attack_uv_duration,
            -self.attack_v_min.unwrap_or(self.v_min),
            self.max_dev_hz,
        )
    }
}

/// One cross-case comparison: `worse` is expected to be at least `better`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub worse: f64,
    pub better: f64,
    pub slack: f64,
    pub holds: bool,
}

impl TrendCheck {
    fn new(name: String, worse: f64, better: f64, slack: f64) -> Self {
        Self {
            holds: worse + slack >= better,
            name,
            worse,
            better,
            slack,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub trends: Vec<TrendCheck>,
    /// Cases absent from the input; the summary is partial when non-empty.
    pub missing: Vec<String>,
}

fn case_name(system: MgSystem, scenario: ScenarioNo) -> String {
    format!("System {} Scenario {}", system.label(), scenario)
}

/// Builds the four-case summary. Records are ordered by system then
/// scenario; missing cases are listed rather than treated as errors.
pub fn summarize(records: &[CaseRecord]) -> Summary {
    let mut rows: Vec<SummaryRow> = records.iter().map(SummaryRow::from_record).collect();
    rows.sort_by_key(|r| (r.system, r.scenario));
    rows.dedup_by_key(|r| (r.system, r.scenario));

    let missing = super::standard_cases()
        .into_iter()
        .filter(|&(sys, sc)| !rows.iter().any(|r| r.system == sys && r.scenario == sc))
        .map(|(sys, sc)| case_name(sys, sc))
        .collect();

    if let Some(worst) = rows
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.severity_key().partial_cmp(&b.1.severity_key()).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
    {
        rows[worst].most_severe = true;
    }

    let find = |sys: MgSystem, sc: ScenarioNo| rows.iter().find(|r| r.system == sys && r.scenario == sc);
    let mut trends = Vec::new();
    for sc in [ScenarioNo::One, ScenarioNo::Two] {
        if let (Some(a), Some(b)) = (find(MgSystem::II, sc), find(MgSystem::I, sc)) {
            trends.push(TrendCheck::new(
                format!("Scenario {sc}: |f_nadir - f0| System II >= System I"),
                a.nadir_dev_hz,
                b.nadir_dev_hz,
                TREND_SLACK_HZ,
            ));
            if let (Some(ta), Some(tb)) = (a.t_settle, b.t_settle) {
                trends.push(TrendCheck::new(
                    format!("Scenario {sc}: t_settle System II >= System I"),
                    ta,
                    tb,
                    records.first().map_or(1e-3, |r| r.dt),
                ));
            }
        }
    }
    for sys in [MgSystem::I, MgSystem::II] {
        if let (Some(a), Some(b)) = (find(sys, ScenarioNo::Two), find(sys, ScenarioNo::One)) {
            trends.push(TrendCheck::new(
                format!("System {}: |f_nadir - f0| Scenario 2 >= Scenario 1", sys.label()),
                a.nadir_dev_hz,
                b.nadir_dev_hz,
                TREND_SLACK_HZ,
            ));
            trends.push(TrendCheck::new(
                format!("System {}: UV duration Scenario 2 >= Scenario 1", sys.label()),
                a.uv_duration,
                b.uv_duration,
                records.first().map_or(1e-3, |r| r.dt),
            ));
        }
    }
    Summary { rows, trends, missing }
}

impl Summary {
    pub fn is_partial(&self) -> bool {
        !self.missing.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }

    /// Fixed-width text table followed by the trend checks.
    pub fn to_text(&self) -> String {
        let header = [
            "Case", "f_nadir Hz", "f_peak Hz", "max|df| Hz", "t_settle s", "v_min pu", "UV s",
            "attack UV s", "CB ops", "Voltage", "Verdict",
        ];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let mut name = case_name(r.system, r.scenario);
            if r.most_severe {
                name.push_str(" *");
            }
            cells.push(vec![
                name,
                format!("{:.4}", r.f_nadir),
                format!("{:.4}", r.f_peak),
                format!("{:.4}", r.max_dev_hz),
                r.t_settle.map_or("never".into(), |t| format!("{t:.3}")),
                format!("{:.4}", r.v_min),
                format!("{:.3}", r.uv_duration),
                format!("{:.3}", r.attack_uv_duration),
                r.breaker_ops.to_string(),
                r.voltage.clone(),
                r.verdict.label().to_owned(),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        if self.rows.iter().any(|r| r.most_severe) {
            let _ = writeln!(out, "* most severe case");
        }
        if !self.trends.is_empty() {
            let _ = writeln!(out, "\nTrends:");
            for t in &self.trends {
                let _ = writeln!(
                    out,
                    "  [{}] {}: {:.4} vs {:.4}",
                    if t.holds { "ok" } else { "VIOLATED" },
                    t.name,
                    t.worse,
                    t.better
                );
            }
        }
        if self.is_partial() {
            let _ = writeln!(out, "\nPARTIAL SUMMARY, missing: {}", self.missing.join(", "));
        }
        out
    }
}
