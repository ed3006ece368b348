//! Dynamic anchor selection and the anchor-conditioned refinement stage.

use crate::error::{Error, Result};
use crate::geometry::normalize_angle;
use crate::numerics::{DenseArray, NodeId, ParamStore, Tape};

use super::blocks::*;
use super::params::{DasMode, ModelConfig};

/// Fractional anchor index per (agent, t, mode), in [0, F-1].
///
/// Dynamic mode scores each proposal against scene-centric polar views of
/// the agent history and the proposal itself through two small convolution
/// paths; midpoint mode returns the constant (F-1)/2.
pub fn das_frac(
    t: &mut Tape,
    ps: &ParamStore,
    cfg: &ModelConfig,
    idx: &SceneIndex,
    p_pro: NodeId,
) -> Result<NodeId> {
    let (n, h, k, f) = (idx.n, idx.h, cfg.k, cfg.f);
    let b = n * h * k;
    if cfg.das_mode == DasMode::Midpoint {
        let v = DenseArray::full(&[b], (f as f64 - 1.0) / 2.0);
        return Ok(t.leaf(v));
    }
    if f < h {
        return Err(Error::Config(format!(
            "dynamic anchor selection needs future length {f} >= history length {h}"
        )));
    }

    // Proposals in scene-centric polar coordinates (differentiable).
    let pts = t.reshape(p_pro, vec![b * f, 2])?;
    let mats: Vec<[f64; 6]> = (0..n)
        .flat_map(|a| (0..h).map(move |ti| (a, ti)))
        .map(|(a, ti)| idx.local_to_global(a, ti))
        .collect();
    let glob = t.affine2(pts, mats, k * f)?;
    let to_focal = SceneIndex::global_to_frame(&idx.focal_pose);
    let cen = t.affine2(glob, vec![to_focal], b * f)?;
    let pol = t.polar(cen)?;

    let wa = p(t, ps, "das.convh.w")?;
    let ba = p(t, ps, "das.convh.b")?;
    let wb = p(t, ps, "das.convk.w")?;
    let bb = p(t, ps, "das.convk.b")?;
    let mut fracs = Vec::with_capacity(n);
    for a in 0..n {
        // Observed history in scene-centric polar (sin/cos direction keeps
        // the feature continuous across the +-pi wrap); masked steps are
        // zeroed.
        let mut hisf = Vec::with_capacity(h * 3);
        for ti in 0..h {
            if idx.observed[a][ti] {
                let pose = &idx.poses[a][ti];
                let (d, ang) = scene_polar((pose.x, pose.y), &idx.focal_pose);
                hisf.extend([d, ang.sin(), ang.cos()]);
            } else {
                hisf.extend([0.0, 0.0, 0.0]);
            }
        }
        let his_leaf = feat_leaf(t, h, 3, hisf)?;
        let his_x = mlp2_p(t, ps, "das.his", his_leaf)?;
        let his_x = t.reshape(his_x, vec![h])?;

        let rows: Vec<usize> = (a * h * k * f..(a + 1) * h * k * f).collect();
        let pro = t.gather_rows(pol, rows)?;
        let pro_x = mlp2_p(t, ps, "das.pro", pro)?;
        let pro_x = t.reshape(pro_x, vec![h, k, f])?;
        let x = t.add_row_bcast(pro_x, his_x)?;

        // Path A: history steps as channels over a (future, mode) plane.
        let xa = t.permute3(x, [0, 2, 1])?;
        let ca = t.conv2d(xa, wa, ba)?;
        let ca = t.permute3(ca, [0, 2, 1])?;
        // Path B: modes as channels over a (future, history) plane.
        let xb = t.permute3(x, [1, 2, 0])?;
        let cb = t.conv2d(xb, wb, bb)?;
        let cb = t.permute3(cb, [2, 0, 1])?;

        let cat = t.concat_last(&[ca, cb])?;
        let sc = mlp2_p(t, ps, "das.out", cat)?;
        let sc = t.sigmoid(sc);
        let fr = t.scale(sc, f as f64 - 1.0);
        fracs.push(t.reshape(fr, vec![h * k])?);
    }
    let frac = t.concat_rows(&fracs)?;
    t.reshape(frac, vec![b])
}

/// Interpolate each proposal polyline at its fractional index.
pub fn select_anchors(t: &mut Tape, cfg: &ModelConfig, idx: &SceneIndex, p_pro: NodeId, frac: NodeId) -> Result<NodeId> {
    let b = idx.n * idx.h * cfg.k;
    let pts = t.reshape(p_pro, vec![b, cfg.f, 2])?;
    t.interp(pts, frac)
}

/// Refinement: anchor-relative queries, anchor-aware map attention, one
/// factorized round, then the trajectory delta and mode logits.
///
/// Returns (p_fin [N*H*K, F*2], logits [N*H, K]).
pub fn refine(
    t: &mut Tape,
    ps: &ParamStore,
    cfg: &ModelConfig,
    idx: &SceneIndex,
    em: NodeId,
    p_pro: NodeId,
    anchor: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (n, h, k, f) = (idx.n, idx.h, cfg.k, cfg.f);
    let b = n * h * k;

    // Queries from the anchor-relative polar shape of each proposal.
    let pts = t.reshape(p_pro, vec![b * f, 2])?;
    let rel = t.repeat_sub(pts, anchor, f)?;
    let pol = t.polar(rel)?;
    let flat = t.reshape(pol, vec![b, 3 * f])?;
    let mut qr = mlp2_p(t, ps, "ref.query", flat)?;

    // Anchor-aware agent-map attention: edges depend on the (differentiable)
    // anchor position relative to each nearby lane segment.
    let mut groups = Vec::new();
    let mut edge_parts = Vec::new();
    let mut src_rows = Vec::new();
    let mut kv_start = 0usize;
    let mut edge_start = 0usize;
    for a in 0..n {
        for ti in 0..h {
            let srcs = &idx.am_sources[a][ti];
            if srcs.is_empty() {
                continue;
            }
            let s = srcs.len();
            let mut lane_locals = Vec::with_capacity(s * 2);
            let mut extras = Vec::with_capacity(k * s * 2);
            for &gi in srcs {
                let sp = &idx.seg_poses[gi];
                let loc = idx.to_frame(a, ti, (sp.x, sp.y));
                lane_locals.extend([loc.0, loc.1]);
            }
            for _ in 0..k {
                for &gi in srcs {
                    let relh = normalize_angle(idx.seg_poses[gi].heading - idx.poses[a][ti].heading);
                    extras.extend([relh.sin(), relh.cos()]);
                }
            }
            let anchor_rows: Vec<usize> = (0..k).map(|km| idx.row_ntk(a, ti, km, k)).collect();
            let ag = t.gather_rows(anchor, anchor_rows.clone())?;
            let nag = t.scale(ag, -1.0);
            let lane_leaf = feat_leaf(t, s, 2, lane_locals)?;
            let diff = t.cross_add(nag, lane_leaf)?;
            let dpol = t.polar(diff)?;
            let extra = feat_leaf(t, k * s, 2, extras)?;
            edge_parts.push(t.concat_last(&[dpol, extra])?);
            src_rows.extend(srcs.iter().copied());
            groups.push(AttnGroup {
                q_rows: anchor_rows,
                kv_start,
                kv_len: s,
                mask: None,
                edge_start: Some(edge_start),
            });
            kv_start += s;
            edge_start += k * s;
        }
    }
    if !groups.is_empty() {
        let feats = t.concat_rows(&edge_parts)?;
        let edges = mlp2_p(t, ps, "ref.am.edge", feats)?;
        let kv_pool = t.gather_rows(em, src_rows)?;
        qr = attn_stage(t, ps, "ref.am", cfg.heads, qr, &groups, kv_pool, Some(edges))?;
    }

    let qr = super::interaction::factorized_round(t, ps, cfg, idx, qr, "ref.fact")?;

    let delta = mlp2_p(t, ps, "ref.dec.delta", qr)?;
    let p_fin = t.add(p_pro, delta)?;
    let logits = mlp2_p(t, ps, "ref.dec.logit", qr)?;
    let logits = t.reshape(logits, vec![n * h, k])?;
    Ok((p_fin, logits))
}
