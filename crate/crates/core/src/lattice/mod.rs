//! The scale-time lattice: key frame selection, path planning and execution
//! of propagation units over a (time x scale) graph, with per-edge costs.

mod exec;
mod interp;
mod keyframes;
mod plan;

use std::collections::{BTreeMap, HashMap};

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Detection;
pub use crate::pru::{DetRef, Link, NodePos};

pub use exec::{execute, ExecContext, Execution};
pub use interp::{interpolate, interpolate_pairs, InterpBox};
pub use keyframes::{
    detect_keyframes, easiness, pair_easiness, percentile, select_adaptive, select_uniform,
    select_uniform_count, insertion_threshold, EasinessParams, KeyframeSelection,
};
pub use plan::{plan_paths, InterpSpan, PlannedPaths, UnitSpec};

/// Milliseconds charged per executed edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub detect_ms: f64,
    /// Per propagation edge; a unit has two.
    pub propagate_ms: f64,
    pub refine_ms: f64,
    pub rescale_ms: f64,
    /// Per interpolated frame.
    pub interpolate_ms: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            detect_ms: 143.0,
            propagate_ms: 6.0,
            refine_ms: 9.0,
            rescale_ms: 0.0,
            interpolate_ms: 0.5,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.detect_ms,
            self.propagate_ms,
            self.refine_ms,
            self.rescale_ms,
            self.interpolate_ms,
        ];
        if all.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::config("edge costs must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn cost(&self, kind: EdgeKind) -> f64 {
        match kind {
            EdgeKind::Detect => self.detect_ms,
            EdgeKind::Propagate => self.propagate_ms,
            EdgeKind::Refine => self.refine_ms,
            EdgeKind::Rescale => self.rescale_ms,
            EdgeKind::Interpolate => self.interpolate_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Detect,
    Propagate,
    Refine,
    Rescale,
    Interpolate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeEdge {
    pub kind: EdgeKind,
    /// Empty for detection, two nodes for interpolation, one otherwise.
    pub sources: Vec<NodePos>,
    pub target: NodePos,
    pub cost_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeNode {
    pub pos: NodePos,
    /// In the coordinates of the node's scale level.
    pub dets: Vec<Detection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatticeGraph {
    pub nodes: BTreeMap<NodePos, LatticeNode>,
    pub edges: Vec<LatticeEdge>,
    /// "Same object" relations between detections of different nodes.
    pub links: Vec<Link>,
}

impl LatticeGraph {
    pub fn total_cost_ms(&self) -> f64 {
        self.edges.iter().map(|e| e.cost_ms).sum()
    }

    pub fn count(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    /// Checks the edge taxonomy: propagation stays on a row and changes time,
    /// refinement and rescaling keep the time and go one row down,
    /// interpolation stays on a row.
    pub fn check_edges(&self) -> Result<()> {
        for e in &self.edges {
            let t = e.target;
            let ok = match e.kind {
                EdgeKind::Detect => e.sources.is_empty(),
                EdgeKind::Propagate => {
                    e.sources.len() == 1 && e.sources[0].level == t.level && e.sources[0].time != t.time
                }
                EdgeKind::Refine | EdgeKind::Rescale => {
                    e.sources.len() == 1
                        && e.sources[0].time == t.time
                        && e.sources[0].level + 1 == t.level
                }
                EdgeKind::Interpolate => {
                    e.sources.len() == 2
                        && e.sources.iter().all(|s| s.level == t.level)
                        && e.sources[0].time < t.time
                        && t.time < e.sources[1].time
                }
            };
            if !ok {
                return Err(Error::invalid(format!("illegal {:?} edge into {t:?}", e.kind)));
            }
            if let Some(s) = e.sources.iter().find(|s| !self.nodes.contains_key(s)) {
                return Err(Error::invalid(format!("edge source {s:?} has no node")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct NodeOut<'a> {
            time: u32,
            level: u8,
            dets: &'a [Detection],
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            nodes: Vec<NodeOut<'a>>,
            edges: &'a [LatticeEdge],
            links: &'a [Link],
            total_cost_ms: f64,
        }
        let doc = Doc {
            nodes: self
                .nodes
                .values()
                .map(|n| NodeOut {
                    time: n.pos.time,
                    level: n.pos.level,
                    dets: &n.dets,
                })
                .collect(),
            edges: &self.edges,
            links: &self.links,
            total_cost_ms: self.total_cost_ms(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serializes")
    }
}

/// Connected components of the link relation over detection references.
pub struct LinkComponents {
    index: HashMap<DetRef, usize>,
    uf: UnionFind<usize>,
}

impl LinkComponents {
    pub fn new(links: &[Link]) -> Self {
        let mut refs: Vec<DetRef> = links.iter().flat_map(|&(a, b)| [a, b]).collect();
        refs.sort_unstable();
        refs.dedup();
        let index: HashMap<DetRef, usize> = refs.iter().enumerate().map(|(i, r)| (*r, i)).collect();
        let mut uf = UnionFind::new(refs.len());
        for (a, b) in links {
            uf.union(index[a], index[b]);
        }
        LinkComponents { index, uf }
    }

    pub fn same(&self, a: &DetRef, b: &DetRef) -> bool {
        match (self.index.get(a), self.index.get(b)) {
            (Some(&i), Some(&j)) => self.uf.equiv(i, j),
            _ => a == b,
        }
    }

    /// Component label, or `None` for references without any link.
    pub fn label(&self, r: &DetRef) -> Option<usize> {
        self.index.get(r).map(|&i| self.uf.find(i))
    }
}
