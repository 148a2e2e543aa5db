//! Assignment of factor-matrix rows to machines.
//!
//! Each strategy keeps every machine at no more than ⌈I_n/M⌉ rows per mode.
//! The greedy strategy additionally balances the number of observed entries
//! each machine must process for its rows.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::SparseTensorStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssignStrategy {
    Greedy,
    Sequential,
    Random,
}

impl FromStr for AssignStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" | "gre" => Ok(AssignStrategy::Greedy),
            "sequential" | "seq" => Ok(AssignStrategy::Sequential),
            "random" | "ran" => Ok(AssignStrategy::Random),
            other => Err(Error::param(format!("unknown assignment strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for AssignStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AssignStrategy::Greedy => "greedy",
            AssignStrategy::Sequential => "sequential",
            AssignStrategy::Random => "random",
        })
    }
}

/// Rows of every mode split across `machines` machines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowAssignment {
    machines: usize,
    /// sets[m][n]: sorted rows of mode n owned by machine m
    sets: Vec<Vec<Vec<usize>>>,
    /// owner[n][i]: machine owning row i of mode n
    owner: Vec<Vec<usize>>,
    /// mode_loads[m][n] = |mΩ^(n)|
    mode_loads: Vec<Vec<usize>>,
}

impl RowAssignment {
    /// Builds an assignment from an owner table, recomputing the loads.
    pub fn from_owner(store: &SparseTensorStore, machines: usize, owner: Vec<Vec<usize>>) -> Result<Self> {
        if machines == 0 {
            return Err(Error::param("machine count must be at least 1"));
        }
        if owner.len() != store.order() {
            return Err(Error::param("owner table has the wrong number of modes"));
        }
        let mut sets = vec![vec![Vec::new(); store.order()]; machines];
        let mut mode_loads = vec![vec![0usize; store.order()]; machines];
        for (n, rows) in owner.iter().enumerate() {
            if rows.len() != store.dims()[n] {
                return Err(Error::param(format!("owner table for mode {n} has the wrong length")));
            }
            for (i, &m) in rows.iter().enumerate() {
                if m >= machines {
                    return Err(Error::param(format!("row {i} of mode {n} assigned to machine {m} of {machines}")));
                }
                sets[m][n].push(i);
                mode_loads[m][n] += store.row_count(n, i);
            }
        }
        Ok(RowAssignment {
            machines,
            sets,
            owner,
            mode_loads,
        })
    }

    pub fn machines(&self) -> usize {
        self.machines
    }

    pub fn order(&self) -> usize {
        self.owner.len()
    }

    /// mS_n
    pub fn rows(&self, machine: usize, mode: usize) -> &[usize] {
        &self.sets[machine][mode]
    }

    pub fn owner(&self, mode: usize, row: usize) -> usize {
        self.owner[mode][row]
    }

    /// |mΩ^(n)|
    pub fn mode_load(&self, machine: usize, mode: usize) -> usize {
        self.mode_loads[machine][mode]
    }

    /// Σ_n |mΩ^(n)|, the running total the greedy strategy balances.
    pub fn total_load(&self, machine: usize) -> usize {
        self.mode_loads[machine].iter().sum()
    }

    /// Text form: one line per (machine, mode): `machine mode row row ...`,
    /// all 1-based.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for m in 0..self.machines {
            for n in 0..self.order() {
                let _ = write!(out, "{} {}", m + 1, n + 1);
                for &i in &self.sets[m][n] {
                    let _ = write!(out, " {}", i + 1);
                }
                out.push('\n');
            }
        }
        out
    }

    /// Parses [`RowAssignment::to_text`] output against `store`.
    pub fn from_text(store: &SparseTensorStore, machines: usize, text: &str) -> Result<Self> {
        let mut owner: Vec<Vec<Option<usize>>> = store.dims().iter().map(|&d| vec![None; d]).collect();
        for (lineno, line) in text.lines().enumerate() {
            let fields: Vec<usize> = line
                .split_whitespace()
                .map(|f| f.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::param(format!("assignment line {}: {e}", lineno + 1)))?;
            if fields.len() < 2 || fields.contains(&0) {
                return Err(Error::param(format!("assignment line {}: malformed", lineno + 1)));
            }
            let (m, n) = (fields[0] - 1, fields[1] - 1);
            if n >= owner.len() {
                return Err(Error::param(format!("assignment line {}: bad mode", lineno + 1)));
            }
            for &row in &fields[2..] {
                let slot = owner[n]
                    .get_mut(row - 1)
                    .ok_or_else(|| Error::param(format!("assignment line {}: row {row} out of range", lineno + 1)))?;
                if slot.replace(m).is_some() {
                    return Err(Error::param(format!("row {row} of mode {} assigned twice", n + 1)));
                }
            }
        }
        let owner = owner
            .into_iter()
            .enumerate()
            .map(|(n, rows)| {
                rows.into_iter()
                    .enumerate()
                    .map(|(i, m)| m.ok_or_else(|| Error::param(format!("row {} of mode {} unassigned", i + 1, n + 1))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_owner(store, machines, owner)
    }
}

pub fn assign(store: &SparseTensorStore, machines: usize, strategy: AssignStrategy, seed: u64) -> Result<RowAssignment> {
    match strategy {
        AssignStrategy::Greedy => greedy_assign(store, machines),
        AssignStrategy::Sequential => sequential_assign(store, machines),
        AssignStrategy::Random => random_assign(store, machines, seed),
    }
}

/// Rows in decreasing |Ω^(n)_i| go to the machine that still has room and
/// the smallest |mΩ^(n)|; ties prefer fewer rows, then smaller Σ_n |mΩ^(n)|,
/// then the lower machine id.
pub fn greedy_assign(store: &SparseTensorStore, machines: usize) -> Result<RowAssignment> {
    if machines == 0 {
        return Err(Error::param("machine count must be at least 1"));
    }
    let mut total = vec![0usize; machines];
    let mut owner = Vec::with_capacity(store.order());
    for n in 0..store.order() {
        let len = store.dims()[n];
        let cap = len.div_ceil(machines);
        let mut rows: Vec<usize> = (0..len).collect();
        // stable sort keeps ascending row index among equal counts
        rows.sort_by_key(|&r| std::cmp::Reverse(store.row_count(n, r)));
        let mut count = vec![0usize; machines];
        let mut load = vec![0usize; machines];
        let mut mode_owner = vec![0usize; len];
        for i in rows {
            let m = (0..machines)
                .filter(|&m| count[m] < cap)
                .min_by_key(|&m| (load[m], count[m], total[m], m))
                .expect("row cap always leaves a machine with room");
            let c = store.row_count(n, i);
            mode_owner[i] = m;
            count[m] += 1;
            load[m] += c;
            total[m] += c;
        }
        owner.push(mode_owner);
    }
    RowAssignment::from_owner(store, machines, owner)
}

/// Contiguous ranges: machine m (1-based) takes rows i with
/// I_n(m−1)/M < i ≤ I_n·m/M.
pub fn sequential_assign(store: &SparseTensorStore, machines: usize) -> Result<RowAssignment> {
    if machines == 0 {
        return Err(Error::param("machine count must be at least 1"));
    }
    let owner = store
        .dims()
        .iter()
        .map(|&len| {
            (0..len)
                // 1-based row r belongs to the smallest m with r·M ≤ len·m
                .map(|i| ((i + 1) * machines).div_ceil(len) - 1)
                .collect()
        })
        .collect();
    RowAssignment::from_owner(store, machines, owner)
}

/// Seeded permutation of each mode's rows dealt round-robin.
pub fn random_assign(store: &SparseTensorStore, machines: usize, seed: u64) -> Result<RowAssignment> {
    if machines == 0 {
        return Err(Error::param("machine count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let owner = store
        .dims()
        .iter()
        .map(|&len| {
            let mut rows: Vec<usize> = (0..len).collect();
            rows.shuffle(&mut rng);
            let mut mode_owner = vec![0usize; len];
            for (slot, &i) in rows.iter().enumerate() {
                mode_owner[i] = slot % machines;
            }
            mode_owner
        })
        .collect();
    RowAssignment::from_owner(store, machines, owner)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeLoad {
    pub max_entries: usize,
    pub mean_entries: f64,
    pub max_rows: usize,
    pub mean_rows: f64,
}

impl ModeLoad {
    /// max / mean of |mΩ^(n)|; 1.0 for an empty mode.
    pub fn entry_imbalance(&self) -> f64 {
        if self.mean_entries == 0.0 {
            1.0
        } else {
            self.max_entries as f64 / self.mean_entries
        }
    }

    pub fn row_imbalance(&self) -> f64 {
        if self.mean_rows == 0.0 {
            1.0
        } else {
            self.max_rows as f64 / self.mean_rows
        }
    }
}

/// Per-mode load summary recomputed from the row sets.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadReport {
    pub machines: usize,
    pub modes: Vec<ModeLoad>,
}

pub fn load_stats(store: &SparseTensorStore, assignment: &RowAssignment) -> LoadReport {
    let machines = assignment.machines();
    let modes = (0..assignment.order())
        .map(|n| {
            let entries: Vec<usize> = (0..machines)
                .map(|m| assignment.rows(m, n).iter().map(|&i| store.row_count(n, i)).sum())
                .collect();
            let rows: Vec<usize> = (0..machines).map(|m| assignment.rows(m, n).len()).collect();
            ModeLoad {
                max_entries: entries.iter().copied().max().unwrap_or(0),
                mean_entries: entries.iter().sum::<usize>() as f64 / machines as f64,
                max_rows: rows.iter().copied().max().unwrap_or(0),
                mean_rows: rows.iter().sum::<usize>() as f64 / machines as f64,
            }
        })
        .collect();
    LoadReport { machines, modes }
}
