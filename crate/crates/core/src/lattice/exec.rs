use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{
    interpolate_pairs, CostModel, EdgeKind, LatticeEdge, LatticeGraph, LatticeNode, LinkComponents,
    PlannedPaths,
};
use crate::error::{Error, Result};
use crate::geom::{greedy_match, iou, Detection, MATCH_IOU_FLOOR};
use crate::pru::{
    rescale, run_unit, DetRef, NodePos, PropagationMethod, PruConfig, Regressor, ScalePyramid,
    UnitInput, UnitMode, UnitOutput,
};

/// Everything execution needs besides the key frame detections and the plan.
pub struct ExecContext<'a> {
    pub pyramid: &'a ScalePyramid,
    pub cfg: &'a PruConfig,
    pub method: PropagationMethod,
    pub mode: UnitMode,
    pub reg_t: &'a dyn Regressor,
    pub reg_s: &'a dyn Regressor,
    pub costs: CostModel,
    /// Pair interpolation endpoints that share propagation history before
    /// falling back to IoU matching.
    pub linked_interpolation: bool,
}

#[derive(Debug, Clone)]
pub struct Execution {
    pub graph: LatticeGraph,
    /// Bottom-row detections for every frame, in native coordinates.
    pub dense: Vec<Vec<Detection>>,
    pub bottom: u8,
    pub total_cost_ms: f64,
}

impl Execution {
    /// Reference of `dense[t][i]` inside the graph.
    pub fn dense_ref(&self, t: u32, i: usize) -> DetRef {
        DetRef {
            node: NodePos {
                time: t,
                level: self.bottom,
            },
            index: i,
        }
    }
}

struct Builder {
    graph: LatticeGraph,
    costs: CostModel,
}

impl Builder {
    fn node(&mut self, pos: NodePos, dets: Vec<Detection>) {
        self.graph.nodes.insert(pos, LatticeNode { pos, dets });
    }

    fn edge(&mut self, kind: EdgeKind, sources: Vec<NodePos>, target: NodePos) {
        self.graph.edges.push(LatticeEdge {
            kind,
            sources,
            target,
            cost_ms: self.costs.cost(kind),
        });
    }

    /// Links every detection of `to` with the same index in `from`.
    fn identity_links(&mut self, from: NodePos, to: NodePos, n: usize) {
        self.graph.links.extend((0..n).map(|index| {
            (
                DetRef { node: from, index },
                DetRef { node: to, index },
            )
        }));
    }
}

/// Pairs of `(a, b)` indices: first same-class boxes whose histories are
/// linked (highest IoU first), then greedy IoU matching on the rest.
fn endpoint_pairs(
    a: &[Detection],
    b: &[Detection],
    a_node: NodePos,
    b_node: NodePos,
    comps: Option<&LinkComponents>,
) -> Vec<(usize, usize)> {
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    if let Some(comps) = comps {
        let mut cand = Vec::new();
        for (i, da) in a.iter().enumerate() {
            let ra = DetRef { node: a_node, index: i };
            for (j, db) in b.iter().enumerate() {
                let rb = DetRef { node: b_node, index: j };
                if da.class_id == db.class_id && comps.same(&ra, &rb) {
                    cand.push((iou(&da.bbox, &db.bbox), i, j));
                }
            }
        }
        cand.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        for (_, i, j) in cand {
            if !used_a[i] && !used_b[j] {
                used_a[i] = true;
                used_b[j] = true;
                pairs.push((i, j));
            }
        }
    }
    let rest_a: Vec<usize> = (0..a.len()).filter(|&i| !used_a[i]).collect();
    let rest_b: Vec<usize> = (0..b.len()).filter(|&j| !used_b[j]).collect();
    let sub_a: Vec<Detection> = rest_a.iter().map(|&i| a[i]).collect();
    let sub_b: Vec<Detection> = rest_b.iter().map(|&j| b[j]).collect();
    pairs.extend(
        greedy_match(&sub_a, &sub_b, 0.0, MATCH_IOU_FLOOR)
            .into_iter()
            .map(|(i, j)| (rest_a[i], rest_b[j])),
    );
    pairs
}

/// Runs the plan: detection nodes on row 0, one row per stage, rescaling of
/// every node to the next row, then interpolation on the bottom row.
pub fn execute(
    ctx: &ExecContext,
    keyframe_dets: &BTreeMap<u32, Vec<Detection>>,
    plan: &PlannedPaths,
) -> Result<Execution> {
    let cfg = ctx.cfg;
    cfg.validate()?;
    ctx.costs.validate()?;
    let n_frames = ctx.pyramid.n_frames();
    let levels = &cfg.scale_levels;
    let bottom = levels.len() - 1;
    if ctx.pyramid.levels != *levels {
        return Err(Error::invalid("pyramid levels differ from the configured scale levels"));
    }
    if plan.stages.len() > bottom {
        return Err(Error::invalid(format!(
            "{} stages need {} scale levels, only {} configured",
            plan.stages.len(),
            plan.stages.len() + 1,
            levels.len()
        )));
    }
    if ctx.method == PropagationMethod::Interp && !plan.stages.is_empty() {
        return Err(Error::invalid("interpolation-only runs must be planned without stages"));
    }
    let keys: Vec<u32> = keyframe_dets.keys().copied().collect();
    if keys != plan.keyframes {
        return Err(Error::invalid("key frame detections do not match the plan"));
    }
    if keys.first() != Some(&0) || keys.last() != Some(&(n_frames.saturating_sub(1))) {
        return Err(Error::invalid(format!(
            "key frames must include the first and last frame of {n_frames}"
        )));
    }

    let mut b = Builder {
        graph: LatticeGraph::default(),
        costs: ctx.costs,
    };
    let mut row: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    for (&t, dets) in keyframe_dets {
        let pos = NodePos::new(t, 0);
        let scaled = rescale(dets, 1.0, levels[0]);
        b.node(pos, scaled.clone());
        b.edge(EdgeKind::Detect, Vec::new(), pos);
        row.insert(t, scaled);
    }

    let rescale_row = |b: &mut Builder, row: &BTreeMap<u32, Vec<Detection>>, level: usize| {
        let mut next = BTreeMap::new();
        for (&t, dets) in row {
            let (from, to) = (NodePos::new(t, level), NodePos::new(t, level + 1));
            let up = rescale(dets, levels[level], levels[level + 1]);
            b.identity_links(from, to, up.len());
            b.node(to, up.clone());
            b.edge(EdgeKind::Rescale, vec![from], to);
            next.insert(t, up);
        }
        next
    };

    for (level, units) in plan.stages.iter().enumerate() {
        let outs: Vec<UnitOutput> = units
            .par_iter()
            .map(|u| {
                let input = UnitInput {
                    left: &row[&u.left],
                    right: &row[&u.right],
                    t_left: u.left,
                    t_right: u.right,
                    level,
                };
                run_unit(&input, ctx.pyramid, cfg, ctx.method, ctx.reg_t, ctx.reg_s, ctx.mode)
            })
            .collect::<Result<_>>()?;
        let mut next = rescale_row(&mut b, &row, level);
        for (u, out) in units.iter().zip(outs) {
            let coarse = NodePos::new(u.mid, level);
            let fine = NodePos::new(u.mid, level + 1);
            for (index, p) in out.merged.iter().enumerate() {
                b.graph.links.push((DetRef { node: coarse, index }, p.source()));
            }
            b.graph.links.extend(out.links);
            b.node(coarse, out.merged.iter().map(|p| p.det).collect());
            b.edge(EdgeKind::Propagate, vec![NodePos::new(u.left, level)], coarse);
            b.edge(EdgeKind::Propagate, vec![NodePos::new(u.right, level)], coarse);

            let fine_dets: Vec<Detection> = out.mid_out.iter().map(|p| p.det).collect();
            b.identity_links(coarse, fine, fine_dets.len());
            b.node(fine, fine_dets.clone());
            let kind = match ctx.mode {
                UnitMode::TwoStep => EdgeKind::Refine,
                UnitMode::SingleStep => EdgeKind::Rescale,
            };
            b.edge(kind, vec![coarse], fine);
            next.insert(u.mid, fine_dets);
        }
        row = next;
    }
    for level in plan.stages.len()..bottom {
        row = rescale_row(&mut b, &row, level);
    }

    let comps = ctx
        .linked_interpolation
        .then(|| LinkComponents::new(&b.graph.links));
    for span in &plan.spans {
        let (ln, rn) = (NodePos::new(span.left, bottom), NodePos::new(span.right, bottom));
        let (a, c) = (&row[&span.left], &row[&span.right]);
        let pairs = endpoint_pairs(a, c, ln, rn, comps.as_ref());
        for t in span.frames() {
            let pos = NodePos::new(t, bottom);
            let boxes = interpolate_pairs(a, c, &pairs, span.left, span.right, t)?;
            for (index, x) in boxes.iter().enumerate() {
                let me = DetRef { node: pos, index };
                if let Some(i) = x.left {
                    b.graph.links.push((me, DetRef { node: ln, index: i }));
                }
                if let Some(j) = x.right {
                    b.graph.links.push((me, DetRef { node: rn, index: j }));
                }
            }
            b.node(pos, boxes.into_iter().map(|x| x.det).collect());
            b.edge(EdgeKind::Interpolate, vec![ln, rn], pos);
        }
    }

    let dense = (0..n_frames)
        .map(|t| {
            b.graph
                .nodes
                .get(&NodePos::new(t, bottom))
                .map(|n| n.dets.clone())
                .ok_or_else(|| Error::invalid(format!("plan leaves frame {t} without a result")))
        })
        .collect::<Result<Vec<_>>>()?;
    let total_cost_ms = b.graph.total_cost_ms();
    Ok(Execution {
        graph: b.graph,
        dense,
        bottom: bottom as u8,
        total_cost_ms,
    })
}
