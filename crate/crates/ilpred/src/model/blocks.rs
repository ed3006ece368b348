//! Shared building blocks: grouped pre-norm attention layers, small MLPs,
//! and the precomputed scene index used by every attention stage.
//!
//! A "stage" updates a query tensor in place: rows that belong to some group
//! get attention plus a feed-forward residual, rows outside every group pass
//! through bit-identically.

use crate::error::Result;
use crate::geometry::{relative_edge, to_local_polar, Pose};
use crate::numerics::{DenseArray, NodeId, ParamStore, Tape};
use crate::scene::Scenario;

use super::params::ModelConfig;

/// One destination group inside an attention stage.
///
/// `q_rows` index the query tensor; the key/value rows are the contiguous
/// range `kv_start .. kv_start + kv_len` of the stage's pooled KV matrix.
/// `mask` (len q*kv) restricts source visibility per query; `edge_start`
/// points at the group's `q*kv` rows inside the stage's per-pair edge matrix.
pub struct AttnGroup {
    pub q_rows: Vec<usize>,
    pub kv_start: usize,
    pub kv_len: usize,
    pub mask: Option<Vec<bool>>,
    pub edge_start: Option<usize>,
}

/// Fetch a parameter node by dotted name.
pub fn p(t: &mut Tape, ps: &ParamStore, name: &str) -> Result<NodeId> {
    t.param_named(ps, name)
}

/// x @ W + b with weights `prefix.w` / `prefix.b`.
pub fn linear_p(t: &mut Tape, ps: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = p(t, ps, &format!("{prefix}.w"))?;
    let b = p(t, ps, &format!("{prefix}.b"))?;
    t.linear(x, w, b)
}

/// Layer norm with gain/bias `prefix.g` / `prefix.b`.
pub fn ln_p(t: &mut Tape, ps: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let g = p(t, ps, &format!("{prefix}.g"))?;
    let b = p(t, ps, &format!("{prefix}.b"))?;
    t.layer_norm(x, g, b)
}

/// Two-layer MLP `prefix.l1` -> SiLU -> `prefix.l2`.
pub fn mlp2_p(t: &mut Tape, ps: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = linear_p(t, ps, &format!("{prefix}.l1"), x)?;
    let h = t.silu(h);
    linear_p(t, ps, &format!("{prefix}.l2"), h)
}

/// One pre-norm attention stage over `q_big` ([rows, D]).
///
/// `kv_pool` holds the raw key/value inputs of all groups back to back
/// (already summed with any destination-shared edge embeddings).
/// `pair_edges`, when present, holds per-(query, source) edge embeddings;
/// they are projected once and added to keys and values inside attention.
/// Rows not covered by any group are returned unchanged.
pub fn attn_stage(
    t: &mut Tape,
    ps: &ParamStore,
    prefix: &str,
    heads: usize,
    q_big: NodeId,
    groups: &[AttnGroup],
    kv_pool: NodeId,
    pair_edges: Option<NodeId>,
) -> Result<NodeId> {
    let groups: Vec<&AttnGroup> = groups.iter().filter(|g| !g.q_rows.is_empty()).collect();
    if groups.is_empty() {
        return Ok(q_big);
    }
    let active: Vec<usize> = groups.iter().flat_map(|g| g.q_rows.iter().copied()).collect();
    let xa = t.gather_rows(q_big, active.clone())?;
    let qn = ln_p(t, ps, &format!("{prefix}.ln_q"), xa)?;
    let qp = linear_p(t, ps, &format!("{prefix}.wq"), qn)?;
    let kn = ln_p(t, ps, &format!("{prefix}.ln_kv"), kv_pool)?;
    let kp = linear_p(t, ps, &format!("{prefix}.wk"), kn)?;
    let vp = linear_p(t, ps, &format!("{prefix}.wv"), kn)?;
    let ep = match pair_edges {
        Some(e) => Some(linear_p(t, ps, &format!("{prefix}.we"), e)?),
        None => None,
    };

    let mut outs = Vec::with_capacity(groups.len());
    let mut qpos = 0usize;
    for g in &groups {
        let nq = g.q_rows.len();
        let q_g = t.gather_rows(qp, (qpos..qpos + nq).collect())?;
        qpos += nq;
        let kv_rows: Vec<usize> = (g.kv_start..g.kv_start + g.kv_len).collect();
        let k_g = t.gather_rows(kp, kv_rows.clone())?;
        let v_g = t.gather_rows(vp, kv_rows)?;
        let e_g = match (ep, g.edge_start) {
            (Some(e), Some(start)) => {
                Some(t.gather_rows(e, (start..start + nq * g.kv_len).collect())?)
            }
            _ => None,
        };
        outs.push(t.attention(q_g, k_g, v_g, e_g, g.mask.clone(), heads)?);
    }
    let out = t.concat_rows(&outs)?;
    let proj = linear_p(t, ps, &format!("{prefix}.wo"), out)?;
    let y = t.add(xa, proj)?;
    let yn = ln_p(t, ps, &format!("{prefix}.ln_f"), y)?;
    let h = linear_p(t, ps, &format!("{prefix}.f1"), yn)?;
    let h = t.silu(h);
    let f = linear_p(t, ps, &format!("{prefix}.f2"), h)?;
    let y2 = t.add(y, f)?;
    t.overwrite_rows(q_big, y2, active)
}

/// Raw agent-to-agent edge descriptor: distance, direction (sin/cos),
/// relative heading (sin/cos), signed time gap (destination minus source).
pub fn agent_edge_feats(src: &Pose, dst: &Pose, gap: f64) -> [f64; 6] {
    let e = relative_edge(src, dst, 0, 0);
    [
        e.dist,
        e.edge_dir.sin(),
        e.edge_dir.cos(),
        e.rel_heading.sin(),
        e.rel_heading.cos(),
        gap,
    ]
}

/// Raw lane-to-agent edge descriptor.
pub fn lane_edge_feats(seg: &Pose, agent: &Pose) -> [f64; 5] {
    let e = relative_edge(seg, agent, 0, 0);
    [
        e.dist,
        e.edge_dir.sin(),
        e.edge_dir.cos(),
        e.rel_heading.sin(),
        e.rel_heading.cos(),
    ]
}

/// Precomputed per-scenario geometry shared by all attention stages.
pub struct SceneIndex {
    pub n: usize,
    pub h: usize,
    /// History poses, [agent][t].
    pub poses: Vec<Vec<Pose>>,
    /// Observation flags over history, [agent][t].
    pub observed: Vec<Vec<bool>>,
    /// Lane segment reference poses (centerline midpoint).
    pub seg_poses: Vec<Pose>,
    /// Lane segments within r_m of each observed agent state, [agent][t].
    pub am_sources: Vec<Vec<Vec<usize>>>,
    /// Focal agent pose at the last observed history step (scene center).
    pub focal_pose: Pose,
}

impl SceneIndex {
    pub fn build(s: &Scenario, cfg: &ModelConfig) -> Self {
        let n = s.agents.len();
        let h = s.h;
        let poses: Vec<Vec<Pose>> = s
            .agents
            .iter()
            .map(|a| a.states[..h].iter().map(|st| st.pose()).collect())
            .collect();
        let observed: Vec<Vec<bool>> = s
            .agents
            .iter()
            .map(|a| a.states[..h].iter().map(|st| st.observed).collect())
            .collect();
        let seg_poses: Vec<Pose> = s
            .map
            .segments
            .iter()
            .map(|seg| crate::geometry::polyline_midpoint_pose(&seg.centerline().points))
            .collect();
        let seg_pts: Vec<(f64, f64)> = seg_poses.iter().map(|p| (p.x, p.y)).collect();
        let am_sources: Vec<Vec<Vec<usize>>> = (0..n)
            .map(|a| {
                (0..h)
                    .map(|ti| {
                        if !observed[a][ti] {
                            return Vec::new();
                        }
                        let c = (poses[a][ti].x, poses[a][ti].y);
                        crate::geometry::radius_neighbors(&seg_pts, c, cfg.r_m)
                    })
                    .collect()
            })
            .collect();
        let focal = s.agent_by_id(s.focal_ids[0]).expect("validated focal id");
        let focal_pose = focal.states[h - 1].pose();
        Self {
            n,
            h,
            poses,
            observed,
            seg_poses,
            am_sources,
            focal_pose,
        }
    }

    /// Row of (agent, t) in an [N*H, D] tensor.
    pub fn row_nt(&self, a: usize, ti: usize) -> usize {
        a * self.h + ti
    }

    /// Row of (agent, t, mode) in an [N*H*K, D] tensor.
    pub fn row_ntk(&self, a: usize, ti: usize, k: usize, modes: usize) -> usize {
        (a * self.h + ti) * modes + k
    }

    /// Local-to-global affine coefficients for the frame of pose(a, t).
    pub fn local_to_global(&self, a: usize, ti: usize) -> [f64; 6] {
        let p = &self.poses[a][ti];
        let (s, c) = p.heading.sin_cos();
        [c, -s, s, c, p.x, p.y]
    }

    /// Global-to-local affine coefficients for an arbitrary pose.
    pub fn global_to_frame(p: &Pose) -> [f64; 6] {
        let (s, c) = p.heading.sin_cos();
        // Inverse of rotate(heading) then translate: x' = R^T (x - t).
        [c, s, -s, c, -(c * p.x + s * p.y), -(-s * p.x + c * p.y)]
    }

    /// A point expressed in the frame of pose(a, t).
    pub fn to_frame(&self, a: usize, ti: usize, pt: (f64, f64)) -> (f64, f64) {
        let p = &self.poses[a][ti];
        let (s, c) = p.heading.sin_cos();
        let (dx, dy) = (pt.0 - p.x, pt.1 - p.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Build a leaf from raw feature rows.
pub fn feat_leaf(t: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
    Ok(t.leaf(DenseArray::new(vec![rows, cols], data)?))
}

/// Scene-centric polar coordinates of a constant point.
pub fn scene_polar(pt: (f64, f64), center: &Pose) -> (f64, f64) {
    to_local_polar(pt, center)
}
