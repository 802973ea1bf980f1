//! Radial distribution network cases.
//!
//! Everything is stored in per-unit on a 1 MVA base. MATPOWER case files are
//! converted once at parse time (ohms and kW files included), so downstream
//! code never sees physical units.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// System power base used throughout, MVA.
pub const BASE_MVA: f64 = 1.0;

/// Active rating of an inverter-based resource, p.u.
pub const IB_ER_P_RATED: f64 = 1.5;
/// Apparent rating of an inverter-based resource, p.u.
pub const IB_ER_S_RATED: f64 = 2.5;
/// Default static var generator range, p.u.
pub const SVG_Q_RANGE: (f64, f64) = (0.0, 2.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Slack,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// Active consumption, p.u. (positive = load).
    pub p_load: f64,
    /// Reactive consumption, p.u.
    pub q_load: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    /// Inverter-based energy resource (PV and similar): active output plus
    /// controllable reactive power inside its apparent-power headroom.
    IbEr,
    /// Static var generator: reactive power only.
    Svg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub kind: DeviceKind,
    pub bus: usize,
    pub q_min: f64,
    pub q_max: f64,
    /// Active power upper limit; zero for SVGs.
    pub p_rated: f64,
    /// Apparent power rating; zero for SVGs.
    pub s_rated: f64,
}

impl Device {
    /// IB-ER with the given ratings. The reactive box is fixed at the
    /// headroom left when active output sits at its upper limit.
    pub fn ib_er(bus: usize, p_rated: f64, s_rated: f64) -> Result<Self> {
        if !(p_rated >= 0.0 && s_rated > p_rated) {
            return Err(Error::Case(format!(
                "ib_er at bus {bus}: need 0 <= p_rated < s_rated, got p={p_rated}, s={s_rated}"
            )));
        }
        let q = (s_rated * s_rated - p_rated * p_rated).sqrt();
        Ok(Device {
            kind: DeviceKind::IbEr,
            bus,
            q_min: -q,
            q_max: q,
            p_rated,
            s_rated,
        })
    }

    pub fn svg(bus: usize, q_min: f64, q_max: f64) -> Result<Self> {
        if !(q_min < q_max) || !q_min.is_finite() || !q_max.is_finite() {
            return Err(Error::Case(format!(
                "svg at bus {bus}: need q_min < q_max, got [{q_min}, {q_max}]"
            )));
        }
        Ok(Device {
            kind: DeviceKind::Svg,
            bus,
            q_min,
            q_max,
            p_rated: 0.0,
            s_rated: 0.0,
        })
    }

    /// Default-rated device of the given kind.
    pub fn standard(bus: usize, kind: DeviceKind) -> Self {
        match kind {
            DeviceKind::IbEr => Device::ib_er(bus, IB_ER_P_RATED, IB_ER_S_RATED)
                .expect("default ib_er ratings are valid"),
            DeviceKind::Svg => Device::svg(bus, SVG_Q_RANGE.0, SVG_Q_RANGE.1)
                .expect("default svg range is valid"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCase {
    pub name: String,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub devices: Vec<Device>,
    pub base_mva: f64,
}

/// One oriented edge of the feeder tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeEdge {
    pub branch: usize,
    pub parent: usize,
    pub child: usize,
}

/// Parent map and depth-sorted branch list of a radial case.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialOrder {
    pub root: usize,
    pub parent: Vec<Option<usize>>,
    /// Branch index connecting each bus to its parent.
    pub parent_branch: Vec<Option<usize>>,
    pub depth: Vec<usize>,
    /// Edges ordered from the leaves towards the root.
    pub leaf_first: Vec<TreeEdge>,
}

impl RadialOrder {
    /// Edges ordered from the root towards the leaves.
    pub fn root_first(&self) -> impl Iterator<Item = &TreeEdge> {
        self.leaf_first.iter().rev()
    }

    /// Just the (parent, child) pairs, leaves first.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.leaf_first.iter().map(|e| (e.parent, e.child)).collect()
    }
}

/// Debug summary of a case.
#[derive(Debug, Clone, Serialize)]
pub struct CaseSummary {
    pub name: String,
    pub n_buses: usize,
    pub n_branches: usize,
    pub slack: usize,
    pub base_mva: f64,
    pub total_p_load: f64,
    pub total_q_load: f64,
    pub max_depth: usize,
    pub devices: Vec<Device>,
}

impl NetworkCase {
    /// Build and validate a case from already per-unit data.
    pub fn new(
        name: impl Into<String>,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        devices: Vec<Device>,
    ) -> Result<Self> {
        let case = NetworkCase {
            name: name.into(),
            buses,
            branches,
            devices,
            base_mva: BASE_MVA,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn action_dim(&self) -> usize {
        self.devices.len()
    }

    pub fn slack(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    pub fn validate(&self) -> Result<()> {
        if self.buses.is_empty() {
            return Err(Error::Case("case has no buses".into()));
        }
        if (self.base_mva - BASE_MVA).abs() > 0.0 {
            return Err(Error::Case(format!(
                "base_mva must be {BASE_MVA}, got {}",
                self.base_mva
            )));
        }
        for (i, b) in self.buses.iter().enumerate() {
            if b.id != i {
                return Err(Error::Case(format!("bus {i} carries id {}", b.id)));
            }
            if !b.p_load.is_finite() || !b.q_load.is_finite() {
                return Err(Error::Case(format!("bus {i} has a non-finite load")));
            }
        }
        let slacks: Vec<_> = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .collect();
        match slacks.len() {
            0 => return Err(Error::Case("no slack bus".into())),
            1 => {}
            n => return Err(Error::Case(format!("{n} slack buses, expected one"))),
        }
        let slack = slacks[0];
        if slack.p_load != 0.0 || slack.q_load != 0.0 {
            return Err(Error::Case(format!(
                "slack bus {} must carry zero load",
                slack.id
            )));
        }
        let n = self.buses.len();
        for (k, br) in self.branches.iter().enumerate() {
            if br.from_bus >= n || br.to_bus >= n {
                return Err(Error::Case(format!(
                    "branch {k} references unknown bus ({} -> {})",
                    br.from_bus, br.to_bus
                )));
            }
            if br.from_bus == br.to_bus {
                return Err(Error::Topology(format!("branch {k} is a self loop")));
            }
            if !(br.r >= 0.0 && br.x >= 0.0) || !br.r.is_finite() || !br.x.is_finite() {
                return Err(Error::Case(format!(
                    "branch {k} has negative or non-finite impedance (r={}, x={})",
                    br.r, br.x
                )));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(Error::Case(format!("branch {k} has zero impedance")));
            }
        }
        if self.branches.len() + 1 != n {
            return Err(Error::Topology(format!(
                "{} branches for {} buses; a radial feeder needs exactly {}",
                self.branches.len(),
                n,
                n - 1
            )));
        }
        // Connectivity: with |E| = |V| - 1 this also rules out cycles.
        self.bfs()?;
        for d in &self.devices {
            if d.bus >= n {
                return Err(Error::Case(format!("device at unknown bus {}", d.bus)));
            }
            if !(d.q_min < d.q_max) {
                return Err(Error::Case(format!(
                    "device at bus {} has q_min >= q_max",
                    d.bus
                )));
            }
        }
        Ok(())
    }

    fn bfs(&self) -> Result<RadialOrder> {
        let n = self.buses.len();
        let root = self
            .buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .ok_or_else(|| Error::Case("no slack bus".into()))?;
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (k, br) in self.branches.iter().enumerate() {
            adj[br.from_bus].push((br.to_bus, k));
            adj[br.to_bus].push((br.from_bus, k));
        }
        let mut parent = vec![None; n];
        let mut parent_branch = vec![None; n];
        let mut depth = vec![0usize; n];
        let mut seen = vec![false; n];
        let mut visit = Vec::with_capacity(n);
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(u) = queue.pop_front() {
            visit.push(u);
            for &(v, k) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some(u);
                    parent_branch[v] = Some(k);
                    depth[v] = depth[u] + 1;
                    queue.push_back(v);
                } else if parent_branch[u] != Some(k) && parent_branch[v] != Some(k) {
                    return Err(Error::Topology(format!(
                        "branch {k} closes a loop between buses {u} and {v}"
                    )));
                }
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(Error::Topology(format!(
                "bus {orphan} is not connected to the slack bus"
            )));
        }
        // BFS visit order is non-decreasing in depth; reversing it puts the
        // leaves first.
        let leaf_first = visit
            .iter()
            .rev()
            .filter_map(|&c| {
                parent[c].map(|p| TreeEdge {
                    branch: parent_branch[c].unwrap(),
                    parent: p,
                    child: c,
                })
            })
            .collect();
        Ok(RadialOrder {
            root,
            parent,
            parent_branch,
            depth,
            leaf_first,
        })
    }

    /// Tree traversal order rooted at the slack bus.
    pub fn radial_order(&self) -> Result<RadialOrder> {
        self.bfs()
    }

    /// Attach default-rated devices at the given (0-based) buses.
    pub fn attach_devices(&self, placements: &[(usize, DeviceKind)]) -> Result<NetworkCase> {
        let devices = placements
            .iter()
            .map(|&(bus, kind)| {
                if bus >= self.buses.len() {
                    Err(Error::Case(format!(
                        "cannot place {kind:?} at unknown bus {bus} ({} buses)",
                        self.buses.len()
                    )))
                } else {
                    Ok(Device::standard(bus, kind))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_devices(devices)
    }

    /// Append explicitly rated devices.
    pub fn with_devices(&self, devices: Vec<Device>) -> Result<NetworkCase> {
        let mut out = self.clone();
        out.devices.extend(devices);
        out.validate()?;
        Ok(out)
    }

    /// Copy of the case with every branch impedance scaled by `factor`.
    pub fn perturb_impedances(&self, factor: f64) -> Result<NetworkCase> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::Config(format!(
                "impedance factor must be positive and finite, got {factor}"
            )));
        }
        let mut out = self.clone();
        for br in &mut out.branches {
            br.r *= factor;
            br.x *= factor;
        }
        Ok(out)
    }

    pub fn summary(&self) -> CaseSummary {
        let order = self.radial_order().expect("validated case");
        CaseSummary {
            name: self.name.clone(),
            n_buses: self.buses.len(),
            n_branches: self.branches.len(),
            slack: order.root,
            base_mva: self.base_mva,
            total_p_load: self.buses.iter().map(|b| b.p_load).sum(),
            total_q_load: self.buses.iter().map(|b| b.q_load).sum(),
            max_depth: order.depth.iter().copied().max().unwrap_or(0),
            devices: self.devices.clone(),
        }
    }
}

/// Parse MATPOWER case text (version 2 layout).
///
/// Only the `baseMVA`, `bus` and `branch` tables are read. Out-of-service
/// branches are dropped. Files that declare ohm impedances and kW loads via
/// the usual trailing conversion statements are converted accordingly.
pub fn parse_case(name: &str, text: &str) -> Result<NetworkCase> {
    let code: String = text
        .lines()
        .map(|l| l.split('%').next().unwrap_or(""))
        .collect::<Vec<_>>()
        .join("\n");

    let base_mva = scalar_field(&code, "mpc.baseMVA")?;
    if !(base_mva > 0.0) {
        return Err(Error::Case(format!("baseMVA must be positive, got {base_mva}")));
    }
    let bus_rows = matrix_field(&code, "mpc.bus")?;
    let branch_rows = matrix_field(&code, "mpc.branch")?;

    let compact: String = code.chars().filter(|c| !c.is_whitespace()).collect();
    let ohms = compact.contains("/(Vbase^2/Sbase)");
    let kw = compact.contains("mpc.bus(:,[PD,QD])=mpc.bus(:,[PD,QD])/1e3");

    let mut id_map = std::collections::HashMap::new();
    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut base_kv = None;
    for (i, row) in bus_rows.iter().enumerate() {
        if row.len() < 10 {
            return Err(Error::Case(format!("bus row {i} has {} columns", row.len())));
        }
        let ext_id = row[0] as i64;
        if id_map.insert(ext_id, i).is_some() {
            return Err(Error::Case(format!("duplicate bus id {ext_id}")));
        }
        let kind = match row[1] as i64 {
            3 => BusKind::Slack,
            1 => BusKind::Pq,
            2 => {
                return Err(Error::Case(format!(
                    "bus {ext_id} is a PV bus; only PQ buses and one slack are supported"
                )))
            }
            t => return Err(Error::Case(format!("bus {ext_id} has unknown type {t}"))),
        };
        if base_kv.is_none() {
            base_kv = Some(row[9]);
        }
        let load_scale = if kw { 1e-3 } else { 1.0 } / BASE_MVA;
        buses.push(Bus {
            id: i,
            kind,
            p_load: row[2] * load_scale,
            q_load: row[3] * load_scale,
        });
    }

    let z_scale = if ohms {
        let kv = base_kv.unwrap_or(0.0);
        if !(kv > 0.0) {
            return Err(Error::Case("ohmic impedances need a positive baseKV".into()));
        }
        BASE_MVA / (kv * kv)
    } else {
        BASE_MVA / base_mva
    };

    let mut branches = Vec::with_capacity(branch_rows.len());
    for (k, row) in branch_rows.iter().enumerate() {
        if row.len() < 4 {
            return Err(Error::Case(format!("branch row {k} has {} columns", row.len())));
        }
        let in_service = row.get(10).map_or(true, |s| *s != 0.0);
        if !in_service {
            continue;
        }
        let lookup = |v: f64| {
            id_map
                .get(&(v as i64))
                .copied()
                .ok_or_else(|| Error::Case(format!("branch {k} references unknown bus {v}")))
        };
        if row[2] < 0.0 || row[3] < 0.0 {
            return Err(Error::Case(format!(
                "branch {k} has negative impedance (r={}, x={})",
                row[2], row[3]
            )));
        }
        branches.push(Branch {
            from_bus: lookup(row[0])?,
            to_bus: lookup(row[1])?,
            r: row[2] * z_scale,
            x: row[3] * z_scale,
        });
    }

    NetworkCase::new(name, buses, branches, Vec::new())
}

fn scalar_field(code: &str, key: &str) -> Result<f64> {
    let start = code
        .find(key)
        .ok_or_else(|| Error::Case(format!("missing {key}")))?;
    let rest = &code[start + key.len()..];
    let rest = rest
        .trim_start()
        .strip_prefix('=')
        .ok_or_else(|| Error::Case(format!("malformed {key}")))?;
    let end = rest
        .find(';')
        .ok_or_else(|| Error::Case(format!("unterminated {key}")))?;
    rest[..end]
        .trim()
        .parse()
        .map_err(|e| Error::Case(format!("{key}: {e}")))
}

fn matrix_field(code: &str, key: &str) -> Result<Vec<Vec<f64>>> {
    // `mpc.bus` is a prefix of other statements; require `=` right after.
    let mut search = 0;
    let body_start = loop {
        let at = code[search..]
            .find(key)
            .map(|i| i + search)
            .ok_or_else(|| Error::Case(format!("missing {key} table")))?;
        let after = code[at + key.len()..].trim_start();
        if let Some(after_eq) = after.strip_prefix('=') {
            if let Some(open) = after_eq.trim_start().strip_prefix('[') {
                break code.len() - open.len();
            }
        }
        search = at + key.len();
    };
    let body_len = code[body_start..]
        .find(']')
        .ok_or_else(|| Error::Case(format!("unterminated {key} table")))?;
    let body = &code[body_start..body_start + body_len];
    let mut rows = Vec::new();
    for chunk in body.split([';', '\n']) {
        let chunk = chunk.trim();
        if chunk.is_empty() {
            continue;
        }
        let row = chunk
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Case(format!("{key}: bad number {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// The three feeders shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseName {
    Case33,
    Case69,
    Case118,
}

impl CaseName {
    pub fn as_str(&self) -> &'static str {
        match self {
            CaseName::Case33 => "case33",
            CaseName::Case69 => "case69",
            CaseName::Case118 => "case118",
        }
    }

    fn source(&self) -> &'static str {
        match self {
            CaseName::Case33 => include_str!("../data/case33bw.m"),
            CaseName::Case69 => include_str!("../data/case69.m"),
            CaseName::Case118 => include_str!("../data/case118zh.m"),
        }
    }

    /// Bare network without devices.
    pub fn load(&self) -> NetworkCase {
        parse_case(self.as_str(), self.source()).expect("bundled case parses")
    }

    /// Standard device fleet, 0-based bus indices.
    pub fn placements(&self) -> Vec<(usize, DeviceKind)> {
        use DeviceKind::*;
        match self {
            CaseName::Case33 => vec![(17, IbEr), (21, IbEr), (24, IbEr), (32, Svg)],
            CaseName::Case69 => vec![(5, IbEr), (22, IbEr), (44, IbEr), (63, IbEr), (13, Svg)],
            CaseName::Case118 => vec![
                (33, IbEr),
                (50, IbEr),
                (53, IbEr),
                (68, IbEr),
                (74, IbEr),
                (97, IbEr),
                (107, IbEr),
                (111, IbEr),
                (44, Svg),
                (104, Svg),
            ],
        }
    }

    /// Network with its standard device fleet attached.
    pub fn with_devices(&self) -> NetworkCase {
        self.load()
            .attach_devices(&self.placements())
            .expect("standard placements are valid")
    }

    /// Impedance error used for the approximate model.
    pub fn default_perturbation(&self) -> f64 {
        match self {
            CaseName::Case118 => 1.3,
            _ => 1.5,
        }
    }
}

impl std::str::FromStr for CaseName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "case33" => Ok(CaseName::Case33),
            "case69" => Ok(CaseName::Case69),
            "case118" => Ok(CaseName::Case118),
            other => Err(Error::Config(format!("unknown case {other:?}"))),
        }
    }
}

/// Slack bus plus one PQ bus on a single branch; handy for tests.
pub fn two_bus(r: f64, x: f64, p_load: f64, q_load: f64) -> Result<NetworkCase> {
    NetworkCase::new(
        "two_bus",
        vec![
            Bus {
                id: 0,
                kind: BusKind::Slack,
                p_load: 0.0,
                q_load: 0.0,
            },
            Bus {
                id: 1,
                kind: BusKind::Pq,
                p_load,
                q_load,
            },
        ],
        vec![Branch {
            from_bus: 0,
            to_bus: 1,
            r,
            x,
        }],
        Vec::new(),
    )
}
