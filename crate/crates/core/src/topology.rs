//! Node names of the form `x<rack>c<chassis>s<slot>b<blade>n<node>` and
//! localization of outlier nodes to racks and chassis.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TopoCoord {
    pub rack: u32,
    pub chassis: u32,
    pub slot: u32,
    pub blade: u32,
    pub node: u32,
}

impl fmt::Display for TopoCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "x{}c{}s{}b{}n{}",
            self.rack, self.chassis, self.slot, self.blade, self.node
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad node name {name:?} at byte {offset}: {message}")]
pub struct TopoParseError {
    pub name: String,
    pub offset: usize,
    pub message: String,
}

/// Parses decimal coordinates; anything else is rejected.
pub fn parse_node_name(name: &str) -> Result<TopoCoord, TopoParseError> {
    let err = |offset: usize, message: &str| TopoParseError {
        name: name.to_string(),
        offset,
        message: message.to_string(),
    };
    let bytes = name.as_bytes();
    let mut pos = 0;
    let mut vals = [0u32; 5];
    for (slot, tag) in b"xcsbn".iter().enumerate() {
        if bytes.get(pos) != Some(tag) {
            return Err(err(pos, &format!("expected '{}'", *tag as char)));
        }
        pos += 1;
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if pos == start {
            return Err(err(start, "expected decimal digits"));
        }
        vals[slot] = name[start..pos]
            .parse()
            .map_err(|_| err(start, "number out of range"))?;
    }
    if pos != bytes.len() {
        return Err(err(pos, "unexpected trailing text"));
    }
    let [rack, chassis, slot, blade, node] = vals;
    Ok(TopoCoord {
        rack,
        chassis,
        slot,
        blade,
        node,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RackEntry {
    pub rack: u32,
    pub nodes: usize,
    pub chassis: Vec<u32>,
    pub full_chassis: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CongestionReport {
    pub outliers: usize,
    pub racks: Vec<RackEntry>,
}

impl CongestionReport {
    pub fn n_racks(&self) -> usize {
        self.racks.len()
    }
}

/// Groups outliers by rack and chassis. A chassis is fully affected when
/// every node of it among `all` (plus the outliers) is an outlier.
/// Duplicate names count once.
pub fn localize_outliers(outliers: &[String], all: &[String]) -> Result<CongestionReport, TopoParseError> {
    let out: BTreeSet<TopoCoord> = outliers
        .iter()
        .map(|n| parse_node_name(n))
        .collect::<Result<_, _>>()?;
    let mut universe: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let all: BTreeSet<TopoCoord> = all
        .iter()
        .map(|n| parse_node_name(n))
        .collect::<Result<_, _>>()?;
    for c in all.union(&out) {
        *universe.entry((c.rack, c.chassis)).or_default() += 1;
    }
    let mut per_chassis: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for c in &out {
        *per_chassis.entry((c.rack, c.chassis)).or_default() += 1;
    }
    let mut racks: BTreeMap<u32, RackEntry> = BTreeMap::new();
    for (&(rack, ch), &n) in &per_chassis {
        let e = racks.entry(rack).or_insert_with(|| RackEntry {
            rack,
            nodes: 0,
            chassis: Vec::new(),
            full_chassis: Vec::new(),
        });
        e.nodes += n;
        e.chassis.push(ch);
        if universe[&(rack, ch)] == n {
            e.full_chassis.push(ch);
        }
    }
    Ok(CongestionReport {
        outliers: out.len(),
        racks: racks.into_values().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

fn list(v: &[u32]) -> String {
    v.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

pub fn render_report(r: &CongestionReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut v = serde_json::to_vec_pretty(r).expect("plain data serializes");
            v.push(b'\n');
            v
        }
        ReportFormat::Text => {
            let mut s = format!(
                "{} outlier nodes across {} racks\n",
                r.outliers,
                r.racks.len()
            );
            for e in &r.racks {
                s.push_str(&format!(
                    "x{}: {} nodes; chassis [{}]; fully affected [{}]\n",
                    e.rack,
                    e.nodes,
                    list(&e.chassis),
                    list(&e.full_chassis)
                ));
            }
            s.into_bytes()
        }
    }
}
