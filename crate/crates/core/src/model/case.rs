//! Case-file reader and writer.
//!
//! The format is line oriented: `[section]` headers, `key = value` pairs in
//! the `[case]` and `[scenario]` sections, and whitespace separated rows in
//! the table sections. `#` starts a comment. See `docs/case-format.md` for
//! the column layout of each table.

use std::fmt::Write as _;
use std::str::FromStr;

use num_complex::Complex64;

use super::{
    Branch, BranchKind, Breaker, BreakerId, BreakerState, Bus, BusId, BusKind, FaultSpec,
    GridFormingInverter, GridModel, MgSystem, ModelError, Scenario, SynchronousMachine,
};

/// The IEEE 39-bus case without the microgrid.
pub const IEEE39_CASE: &str = include_str!("../../cases/ieee39.case");
/// The IEEE 39-bus case with the bus-24 microgrid, PCC breaker and fault.
pub const IEEE39_MG_CASE: &str = include_str!("../../cases/ieee39_mg.case");

const BUS_COLS: &[&str] = &["id", "kind", "base_kv", "load_p", "load_q", "shunt_b", "v_set"];
const BRANCH_COLS: &[&str] = &["id", "from", "to", "r", "x", "b", "tap", "kind"];
const BREAKER_COLS: &[&str] = &["id", "label", "state", "branches"];
const MACHINE_COLS: &[&str] = &[
    "id",
    "bus",
    "rating_mva",
    "h",
    "d",
    "xdp",
    "droop",
    "governor_tc",
    "p_dispatch",
];
const INVERTER_COLS: &[&str] = &[
    "id",
    "bus",
    "rating_mva",
    "p_set",
    "q_set",
    "mp",
    "mq",
    "filter_tc",
    "v_set",
    "x_out",
];
const FAULT_COLS: &[&str] = &["id", "bus", "g", "b", "t_on", "t_off", "behind"];

/// Parsed but not yet validated case document.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseDocument {
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
}

impl CaseDocument {
    /// Validates the tables and applies the scenario overlay.
    pub fn build(self) -> Result<GridModel, ModelError> {
        GridModel::new(
            self.name,
            self.f_nominal,
            self.s_base,
            self.buses,
            self.branches,
            self.breakers,
            self.machines,
            self.inverters,
            self.faults,
            self.scenario,
        )?
        .apply_scenario()
    }
}

pub fn load_case(text: &str) -> Result<GridModel, ModelError> {
    parse_case(text)?.build()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Case,
    Buses,
    Branches,
    Breakers,
    Machines,
    Inverters,
    Faults,
    Scenario,
}

struct Row<'a> {
    line: usize,
    cols: &'static [&'static str],
    fields: Vec<&'a str>,
}

impl<'a> Row<'a> {
    fn err(&self, idx: usize, message: impl Into<String>) -> ModelError {
        ModelError::Parse {
            line: self.line,
            field: self.cols[idx].to_string(),
            message: message.into(),
        }
    }

    fn str(&self, idx: usize) -> &'a str {
        self.fields[idx]
    }

    fn num<T: FromStr>(&self, idx: usize) -> Result<T, ModelError> {
        self.fields[idx]
            .parse()
            .map_err(|_| self.err(idx, format!("cannot parse `{}`", self.fields[idx])))
    }
}

pub fn parse_case(text: &str) -> Result<CaseDocument, ModelError> {
    let mut doc = CaseDocument {
        name: String::new(),
        f_nominal: 60.0,
        s_base: 100.0,
        buses: vec![],
        branches: vec![],
        breakers: vec![],
        machines: vec![],
        inverters: vec![],
        faults: vec![],
        scenario: Scenario::default(),
    };
    let mut section = Section::None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = match name.trim() {
                "case" => Section::Case,
                "buses" => Section::Buses,
                "branches" => Section::Branches,
                "breakers" => Section::Breakers,
                "machines" => Section::Machines,
                "inverters" => Section::Inverters,
                "faults" => Section::Faults,
                "scenario" => Section::Scenario,
                other => {
                    return Err(ModelError::Parse {
                        line,
                        field: "section".into(),
                        message: format!("unknown section `[{other}]`"),
                    })
                }
            };
            continue;
        }
        match section {
            Section::None => {
                return Err(ModelError::Parse {
                    line,
                    field: "section".into(),
                    message: "content before the first section header".into(),
                })
            }
            Section::Case | Section::Scenario => {
                let (key, value) = content.split_once('=').ok_or_else(|| ModelError::Parse {
                    line,
                    field: "key".into(),
                    message: format!("expected `key = value`, got `{content}`"),
                })?;
                let (key, value) = (key.trim(), value.trim());
                if section == Section::Case {
                    parse_case_key(&mut doc, line, key, value)?;
                } else {
                    parse_scenario_key(&mut doc.scenario, line, key, value)?;
                }
            }
            table => {
                let cols = match table {
                    Section::Buses => BUS_COLS,
                    Section::Branches => BRANCH_COLS,
                    Section::Breakers => BREAKER_COLS,
                    Section::Machines => MACHINE_COLS,
                    Section::Inverters => INVERTER_COLS,
                    Section::Faults => FAULT_COLS,
                    _ => unreachable!(),
                };
                let fields: Vec<&str> = content.split_whitespace().collect();
                if fields.len() != cols.len() {
                    let field = cols.get(fields.len()).unwrap_or(&"row");
                    return Err(ModelError::Parse {
                        line,
                        field: field.to_string(),
                        message: format!(
                            "expected {} columns ({}), found {}",
                            cols.len(),
                            cols.join(" "),
                            fields.len()
                        ),
                    });
                }
                let row = Row { line, cols, fields };
                match table {
                    Section::Buses => doc.buses.push(parse_bus(&row)?),
                    Section::Branches => doc.branches.push(parse_branch(&row)?),
                    Section::Breakers => doc.breakers.push(parse_breaker(&row)?),
                    Section::Machines => doc.machines.push(parse_machine(&row)?),
                    Section::Inverters => doc.inverters.push(parse_inverter(&row)?),
                    Section::Faults => doc.faults.push(parse_fault(&row)?),
                    _ => unreachable!(),
                }
            }
        }
    }
    Ok(doc)
}

fn kv_err(line: usize, key: &str, message: impl Into<String>) -> ModelError {
    ModelError::Parse {
        line,
        field: key.to_string(),
        message: message.into(),
    }
}

fn kv_num(line: usize, key: &str, value: &str) -> Result<f64, ModelError> {
    value
        .parse()
        .map_err(|_| kv_err(line, key, format!("cannot parse `{value}`")))
}

fn parse_case_key(
    doc: &mut CaseDocument,
    line: usize,
    key: &str,
    value: &str,
) -> Result<(), ModelError> {
    match key {
        "name" => doc.name = value.to_string(),
        "f_nominal" => doc.f_nominal = kv_num(line, key, value)?,
        "s_base" => doc.s_base = kv_num(line, key, value)?,
        _ => return Err(kv_err(line, key, "unknown key in [case]")),
    }
    Ok(())
}

fn parse_scenario_key(
    sc: &mut Scenario,
    line: usize,
    key: &str,
    value: &str,
) -> Result<(), ModelError> {
    match key {
        "system" => {
            sc.system = if value == "none" {
                None
            } else {
                Some(value.parse::<MgSystem>().map_err(|e| kv_err(line, key, e))?)
            }
        }
        "mg_bus" => {
            sc.mg_bus = value
                .parse()
                .map_err(|_| kv_err(line, key, format!("cannot parse `{value}`")))?
        }
        "load_increase" => sc.load_increase = kv_num(line, key, value)?,
        "applied" => {
            sc.applied = match value {
                "true" => true,
                "false" => false,
                _ => return Err(kv_err(line, key, "expected true or false")),
            }
        }
        _ => return Err(kv_err(line, key, "unknown key in [scenario]")),
    }
    Ok(())
}

fn parse_bus(row: &Row) -> Result<Bus, ModelError> {
    let kind = match row.str(1) {
        "Slack" | "slack" | "REF" => BusKind::Slack,
        "PV" | "pv" => BusKind::PV,
        "PQ" | "pq" => BusKind::PQ,
        other => return Err(row.err(1, format!("unknown bus kind `{other}`"))),
    };
    Ok(Bus {
        id: row.num(0)?,
        kind,
        base_kv: row.num(2)?,
        load_p: row.num(3)?,
        load_q: row.num(4)?,
        shunt_b: row.num(5)?,
        v_set: row.num(6)?,
    })
}

fn parse_branch(row: &Row) -> Result<Branch, ModelError> {
    let kind = match row.str(7) {
        "line" => BranchKind::Line,
        "xfmr" => BranchKind::Transformer,
        other => return Err(row.err(7, format!("unknown branch kind `{other}`"))),
    };
    Ok(Branch {
        id: row.str(0).to_string(),
        from_bus: row.num(1)?,
        to_bus: row.num(2)?,
        r: row.num(3)?,
        x: row.num(4)?,
        b: row.num(5)?,
        tap: row.num(6)?,
        kind,
        breaker_id: None,
    })
}

fn parse_breaker(row: &Row) -> Result<Breaker, ModelError> {
    let state = match row.str(2) {
        "closed" => BreakerState::Closed,
        "open" => BreakerState::Open,
        other => return Err(row.err(2, format!("expected open or closed, got `{other}`"))),
    };
    let controlled_branches: Vec<String> = row
        .str(3)
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if controlled_branches.is_empty() {
        return Err(row.err(3, "breaker controls no branches"));
    }
    Ok(Breaker {
        id: row.num(0)?,
        label: row.str(1).to_string(),
        state,
        controlled_branches,
    })
}

fn parse_machine(row: &Row) -> Result<SynchronousMachine, ModelError> {
    Ok(SynchronousMachine {
        id: row.str(0).to_string(),
        bus: row.num(1)?,
        rating_mva: row.num(2)?,
        h: row.num(3)?,
        d: row.num(4)?,
        xdp: row.num(5)?,
        governor_droop: row.num(6)?,
        governor_tc: row.num(7)?,
        p_dispatch: row.num(8)?,
    })
}

fn parse_inverter(row: &Row) -> Result<GridFormingInverter, ModelError> {
    Ok(GridFormingInverter {
        id: row.str(0).to_string(),
        bus: row.num(1)?,
        rating_mva: row.num(2)?,
        p_set: row.num(3)?,
        q_set: row.num(4)?,
        mp: row.num(5)?,
        mq: row.num(6)?,
        filter_tc: row.num(7)?,
        v_set: row.num(8)?,
        x_out: row.num(9)?,
    })
}

fn parse_fault(row: &Row) -> Result<FaultSpec, ModelError> {
    let behind_breaker = match row.str(6) {
        "-" => None,
        s => Some(
            s.parse::<BreakerId>()
                .map_err(|_| row.err(6, format!("expected breaker id or `-`, got `{s}`")))?,
        ),
    };
    Ok(FaultSpec {
        id: row.str(0).to_string(),
        bus: row.num::<BusId>(1)?,
        y_fault: Complex64::new(row.num(2)?, row.num(3)?),
        t_on: row.num(4)?,
        t_off: row.num(5)?,
        behind_breaker,
    })
}

/// Writes a model back out as a case document. Overlays already folded into
/// the tables are marked `applied = true` so reloading does not repeat them.
pub fn serialize_case(model: &GridModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[case]");
    let _ = writeln!(s, "name = {}", model.name);
    let _ = writeln!(s, "f_nominal = {}", model.f_nominal);
    let _ = writeln!(s, "s_base = {}", model.s_base);

    let _ = writeln!(s, "\n[buses]\n# {}", BUS_COLS.join(" "));
    for b in &model.buses {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            b.id, b.kind, b.base_kv, b.load_p, b.load_q, b.shunt_b, b.v_set
        );
    }
    let _ = writeln!(s, "\n[branches]\n# {}", BRANCH_COLS.join(" "));
    for br in &model.branches {
        let kind = match br.kind {
            BranchKind::Line => "line",
            BranchKind::Transformer => "xfmr",
        };
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            br.id, br.from_bus, br.to_bus, br.r, br.x, br.b, br.tap, kind
        );
    }
    let _ = writeln!(s, "\n[breakers]\n# {}", BREAKER_COLS.join(" "));
    for brk in &model.breakers {
        let state = match brk.state {
            BreakerState::Closed => "closed",
            BreakerState::Open => "open",
        };
        let _ = writeln!(
            s,
            "{} {} {} {}",
            brk.id,
            brk.label,
            state,
            brk.controlled_branches.join(",")
        );
    }
    let _ = writeln!(s, "\n[machines]\n# {}", MACHINE_COLS.join(" "));
    for m in &model.machines {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {} {}",
            m.id,
            m.bus,
            m.rating_mva,
            m.h,
            m.d,
            m.xdp,
            m.governor_droop,
            m.governor_tc,
            m.p_dispatch
        );
    }
    let _ = writeln!(s, "\n[inverters]\n# {}", INVERTER_COLS.join(" "));
    for inv in &model.inverters {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {} {} {}",
            inv.id,
            inv.bus,
            inv.rating_mva,
            inv.p_set,
            inv.q_set,
            inv.mp,
            inv.mq,
            inv.filter_tc,
            inv.v_set,
            inv.x_out
        );
    }
    let _ = writeln!(s, "\n[faults]\n# {}", FAULT_COLS.join(" "));
    for f in &model.faults {
        let behind = f
            .behind_breaker
            .map_or_else(|| "-".to_string(), |b| b.to_string());
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            f.id, f.bus, f.y_fault.re, f.y_fault.im, f.t_on, f.t_off, behind
        );
    }
    let sc = &model.scenario;
    let _ = writeln!(s, "\n[scenario]");
    let _ = writeln!(
        s,
        "system = {}",
        sc.system.map_or("none", MgSystem::label)
    );
    let _ = writeln!(s, "mg_bus = {}", sc.mg_bus);
    let _ = writeln!(s, "load_increase = {}", sc.load_increase);
    let _ = writeln!(s, "applied = {}", sc.applied);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_case_has_published_component_counts() {
        let m = load_case(IEEE39_CASE).unwrap();
        assert_eq!(m.bus_count(), 39);
        assert_eq!(m.machines.len(), 10);
        assert_eq!(m.line_count(), 34);
        assert_eq!(m.transformer_count(), 12);
        assert_eq!(m.aggregated_load_count(), 19);
        assert_eq!(m.slack_bus(), 31);
        assert!(m.inverters.is_empty());
    }

    #[test]
    fn system_one_overlay() {
        let m = load_case(IEEE39_MG_CASE).unwrap();
        let inv = &m.inverters[0];
        let sg = m.machines.iter().find(|g| g.bus == 24).unwrap();
        assert_eq!(inv.p_set, 150.0);
        assert_eq!(sg.p_dispatch, 150.0);
        assert_eq!(sg.rating_mva, 300.0);
        assert!((inv.rating_mva - 195.0).abs() < 1e-12);
        let b24 = m.bus(24).unwrap();
        assert!((b24.load_p - 1.2 * 308.6).abs() < 1e-9);
        assert!((b24.load_q - 1.2 * -92.2).abs() < 1e-9);
    }

    #[test]
    fn system_two_overlay() {
        let mut doc = parse_case(IEEE39_MG_CASE).unwrap();
        doc.scenario.system = Some(MgSystem::II);
        let m = doc.build().unwrap();
        assert_eq!(m.inverters[0].p_set, 210.0);
        let sg = m.machines.iter().find(|g| g.bus == 24).unwrap();
        assert_eq!(sg.p_dispatch, 90.0);
    }

    #[test]
    fn dangling_branch_reference_names_the_branch() {
        let text = IEEE39_CASE.replace("16-24    16    24", "16-99    16    99");
        let err = load_case(&text).unwrap_err();
        match err {
            ModelError::Validation(msg) => {
                assert!(msg.contains("16-99"), "{msg}");
                assert!(msg.contains("99"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_and_field() {
        let text = "[case]\nname = x\n[buses]\n1 PQ 345 abc 0 0 1\n";
        match parse_case(text).unwrap_err() {
            ModelError::Parse { line, field, .. } => {
                assert_eq!(line, 4);
                assert_eq!(field, "load_p");
            }
            other => panic!("unexpected {other:?}"),
        }
        let short = "[buses]\n1 PQ 345\n";
        match parse_case(short).unwrap_err() {
            ModelError::Parse { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "load_p");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_case("[nope]\n").unwrap_err(),
            ModelError::Parse { line: 1, .. }
        ));
    }

    #[test]
    fn round_trip_is_identity_for_bundled_cases() {
        for text in [IEEE39_CASE, IEEE39_MG_CASE] {
            let m = load_case(text).unwrap();
            let again = load_case(&serialize_case(&m)).unwrap();
            assert_eq!(m, again);
        }
    }

    #[test]
    fn applied_overlay_is_not_repeated() {
        let m = load_case(IEEE39_MG_CASE).unwrap();
        let m2 = m.clone().apply_scenario().unwrap();
        assert_eq!(m, m2);
    }
}
