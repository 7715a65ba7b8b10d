use std::collections::BTreeMap;

use super::{BreakerStates, BusId, GridModel};

/// Connected components of the branch graph under a set of breaker positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IslandPartition {
    /// Bus ids per island, ascending. Islands are ordered by their lowest bus.
    pub islands: Vec<Vec<BusId>>,
    pub island_of: BTreeMap<BusId, usize>,
    /// Island contains at least one machine or inverter.
    pub energized: Vec<bool>,
}

impl IslandPartition {
    pub fn len(&self) -> usize {
        self.islands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.islands.is_empty()
    }

    pub fn island_containing(&self, bus: BusId) -> Option<usize> {
        self.island_of.get(&bus).copied()
    }

    pub fn is_bus_energized(&self, bus: BusId) -> bool {
        self.island_containing(bus)
            .is_some_and(|k| self.energized[k])
    }
}

fn root(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

pub fn find_islands(model: &GridModel, states: &BreakerStates) -> IslandPartition {
    let n = model.bus_count();
    let mut parent: Vec<usize> = (0..n).collect();
    for br in &model.branches {
        if !model.branch_closed(br, states) {
            continue;
        }
        let a = root(&mut parent, model.bus_index(br.from_bus).unwrap());
        let b = root(&mut parent, model.bus_index(br.to_bus).unwrap());
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut by_root: BTreeMap<usize, Vec<BusId>> = BTreeMap::new();
    for i in 0..n {
        let r = root(&mut parent, i);
        by_root.entry(r).or_default().push(model.buses[i].id);
    }
    let mut islands: Vec<Vec<BusId>> = by_root.into_values().collect();
    for isl in islands.iter_mut() {
        isl.sort_unstable();
    }
    islands.sort_by_key(|isl| isl[0]);
    let mut island_of = BTreeMap::new();
    for (k, isl) in islands.iter().enumerate() {
        for &b in isl {
            island_of.insert(b, k);
        }
    }
    let energized = islands
        .iter()
        .map(|isl| isl.iter().any(|&b| model.has_source(b)))
        .collect();
    IslandPartition {
        islands,
        island_of,
        energized,
    }
}
