//! Query-centric scene encoding: lane-graph encoder, agent-state encoder,
//! mode queries, and the agent-map attention stage.

use crate::error::Result;
use crate::geometry::{normalize_angle, relative_edge};
use crate::numerics::{NodeId, ParamStore, Tape};
use crate::scene::Scenario;

use super::blocks::*;
use super::params::ModelConfig;

/// Encode the lane graph into per-segment embeddings [G, D].
///
/// Stage 1 seeds each segment from its centerline arc length and lets it
/// attend over its own polyline points. Stage 2 is attention over the
/// connectivity graph; segments without connections pass through.
pub fn encode_map(
    t: &mut Tape,
    ps: &ParamStore,
    cfg: &ModelConfig,
    s: &Scenario,
    idx: &SceneIndex,
) -> Result<NodeId> {
    let segs = &s.map.segments;
    let g_count = segs.len();
    if g_count == 0 {
        return feat_leaf(t, 0, cfg.d, Vec::new());
    }

    // Stage 0: arc-length seed.
    let mut lens = Vec::with_capacity(g_count);
    for seg in segs {
        let pts = &seg.centerline().points;
        let arc: f64 = pts
            .windows(2)
            .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
            .sum();
        lens.push(arc);
    }
    let len_leaf = feat_leaf(t, g_count, 1, lens)?;
    let em = mlp2_p(t, ps, "enc.map.len", len_leaf)?;

    // Stage 1: each segment attends over its own polyline points.
    let mut feats = Vec::new();
    let mut groups = Vec::new();
    let mut kv_start = 0usize;
    for (gi, seg) in segs.iter().enumerate() {
        let pose = &idx.seg_poses[gi];
        let mut kv_len = 0usize;
        for pl in &seg.polylines {
            let pts = &pl.points;
            for (i, &pt) in pts.iter().enumerate() {
                let (dist, dir) = scene_polar(pt, pose);
                let tangent = if pts.len() < 2 {
                    pose.heading
                } else if i + 1 < pts.len() {
                    (pts[i + 1].1 - pt.1).atan2(pts[i + 1].0 - pt.0)
                } else {
                    (pt.1 - pts[i - 1].1).atan2(pt.0 - pts[i - 1].0)
                };
                let rel = normalize_angle(tangent - pose.heading);
                let mut row = vec![dist, dir.sin(), dir.cos(), rel.sin(), rel.cos(), 0.0, 0.0, 0.0];
                row[5 + pl.kind.index()] = 1.0;
                feats.extend(row);
                kv_len += 1;
            }
        }
        groups.push(AttnGroup {
            q_rows: vec![gi],
            kv_start,
            kv_len,
            mask: None,
            edge_start: None,
        });
        kv_start += kv_len;
    }
    let point_leaf = feat_leaf(t, kv_start, 8, feats)?;
    let kv_pool = mlp2_p(t, ps, "enc.map.point", point_leaf)?;
    let em = attn_stage(t, ps, "enc.map.cross", cfg.heads, em, &groups, kv_pool, None)?;

    // Stage 2: attention over the connectivity graph.
    let id_to_idx: std::collections::HashMap<u32, usize> =
        segs.iter().enumerate().map(|(i, seg)| (seg.id, i)).collect();
    let mut feats = Vec::new();
    let mut src_rows = Vec::new();
    let mut groups = Vec::new();
    let mut kv_start = 0usize;
    for (gi, seg) in segs.iter().enumerate() {
        let mut kv_len = 0usize;
        for conn in &s.map.connections {
            if conn.from != seg.id {
                continue;
            }
            let si = id_to_idx[&conn.to];
            let e = relative_edge(&idx.seg_poses[si], &idx.seg_poses[gi], 0, 0);
            let mut row = vec![
                e.dist,
                e.edge_dir.sin(),
                e.edge_dir.cos(),
                e.rel_heading.sin(),
                e.rel_heading.cos(),
                0.0,
                0.0,
                0.0,
                conn.hops as f64,
            ];
            row[5 + conn.kind.index()] = 1.0;
            feats.extend(row);
            src_rows.push(si);
            kv_len += 1;
        }
        if kv_len > 0 {
            groups.push(AttnGroup {
                q_rows: vec![gi],
                kv_start,
                kv_len,
                mask: None,
                edge_start: None,
            });
            kv_start += kv_len;
        }
    }
    if groups.is_empty() {
        return Ok(em);
    }
    let conn_leaf = feat_leaf(t, kv_start, 9, feats)?;
    let edge = mlp2_p(t, ps, "enc.map.conn", conn_leaf)?;
    let base = t.gather_rows(em, src_rows)?;
    let kv_pool = t.add(base, edge)?;
    attn_stage(t, ps, "enc.map.self", cfg.heads, em, &groups, kv_pool, None)
}

/// Encode agent states into [N*H, D]; masked steps get a learned embedding.
pub fn encode_agents(
    t: &mut Tape,
    ps: &ParamStore,
    cfg: &ModelConfig,
    s: &Scenario,
    idx: &SceneIndex,
) -> Result<NodeId> {
    let (n, h) = (idx.n, idx.h);
    let mut feats = Vec::with_capacity(n * h * 8);
    let mut masked_rows = Vec::new();
    for (a, track) in s.agents.iter().enumerate() {
        for (ti, st) in track.states[..h].iter().enumerate() {
            if !st.observed {
                masked_rows.push(idx.row_nt(a, ti));
            }
            let off = normalize_angle(st.vel_dir - st.heading);
            let mut row = vec![st.speed, off.sin(), off.cos(), track.length, track.width, 0.0, 0.0, 0.0];
            row[5 + track.category.index()] = 1.0;
            feats.extend(row);
        }
    }
    let leaf = feat_leaf(t, n * h, 8, feats)?;
    let mut ea = mlp2_p(t, ps, "enc.agent.mlp", leaf)?;
    if !masked_rows.is_empty() {
        let m = p(t, ps, "enc.agent.mask")?;
        let m = t.reshape(m, vec![1, cfg.d])?;
        let rep = t.gather_rows(m, vec![0; masked_rows.len()])?;
        ea = t.overwrite_rows(ea, rep, masked_rows)?;
    }
    Ok(ea)
}

/// Initial mode queries [N*H*K, D]: learned mode tokens added to a
/// projection of the agent embedding, row layout (agent, t, mode).
pub fn mode_queries(t: &mut Tape, ps: &ParamStore, ea: NodeId) -> Result<NodeId> {
    let proj = linear_p(t, ps, "enc.mode.proj", ea)?;
    let modes = p(t, ps, "enc.mode.queries")?;
    t.cross_add(proj, modes)
}

/// Agent-Map attention: mode queries of each observed (agent, t) attend over
/// lane segments within the local radius, with lane-to-agent edges.
pub fn agent_map_stage(
    t: &mut Tape,
    ps: &ParamStore,
    cfg: &ModelConfig,
    idx: &SceneIndex,
    q: NodeId,
    em: NodeId,
) -> Result<NodeId> {
    let k = cfg.k;
    let mut feats = Vec::new();
    let mut src_rows = Vec::new();
    let mut groups = Vec::new();
    let mut kv_start = 0usize;
    for a in 0..idx.n {
        for ti in 0..idx.h {
            let srcs = &idx.am_sources[a][ti];
            if srcs.is_empty() {
                continue;
            }
            for &gi in srcs {
                feats.extend(lane_edge_feats(&idx.seg_poses[gi], &idx.poses[a][ti]));
                src_rows.push(gi);
            }
            groups.push(AttnGroup {
                q_rows: (0..k).map(|m| idx.row_ntk(a, ti, m, k)).collect(),
                kv_start,
                kv_len: srcs.len(),
                mask: None,
                edge_start: None,
            });
            kv_start += srcs.len();
        }
    }
    if groups.is_empty() {
        return Ok(q);
    }
    let leaf = feat_leaf(t, kv_start, 5, feats)?;
    let edge = mlp2_p(t, ps, "enc.am.edge", leaf)?;
    let base = t.gather_rows(em, src_rows)?;
    let kv_pool = t.add(base, edge)?;
    attn_stage(t, ps, "enc.am", cfg.heads, q, &groups, kv_pool, None)
}
