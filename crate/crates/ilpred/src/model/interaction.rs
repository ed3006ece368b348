//! Inverse-learning attention (temporal, future, historical) and the
//! factorized attention rounds over the query tensor.

use crate::error::Result;
use crate::numerics::{NodeId, ParamStore, Tape};

use super::blocks::*;
use super::params::{IlOrder, ModelConfig};

/// Source states feeding one destination (agent, t): (row in E_a, signed
/// time gap destination minus source, source agent, source timestamp).
type Sources = Vec<(usize, f64, usize, usize)>;

/// Cross-attention from agent embeddings with destination-shared edges.
///
/// `sources(a, t)` enumerates the E_a rows visible to destination (a, t);
/// destinations with no sources (including masked ones) pass through.
fn ea_stage(
    t: &mut Tape,
    ps: &ParamStore,
    cfg: &ModelConfig,
    idx: &SceneIndex,
    q: NodeId,
    ea: NodeId,
    prefix: &str,
    sources: impl Fn(usize, usize) -> Sources,
) -> Result<NodeId> {
    let k = cfg.k;
    let mut feats = Vec::new();
    let mut src_rows = Vec::new();
    let mut groups = Vec::new();
    let mut kv_start = 0usize;
    for a in 0..idx.n {
        for ti in 0..idx.h {
            if !idx.observed[a][ti] {
                continue;
            }
            let srcs = sources(a, ti);
            if srcs.is_empty() {
                continue;
            }
            for &(row, gap, sa, st) in &srcs {
                feats.extend(agent_edge_feats(&idx.poses[sa][st], &idx.poses[a][ti], gap));
                src_rows.push(row);
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
    let leaf = feat_leaf(t, kv_start, 6, feats)?;
    let edge = mlp2_p(t, ps, &format!("{prefix}.edge"), leaf)?;
    let base = t.gather_rows(ea, src_rows)?;
    let kv_pool = t.add(base, edge)?;
    attn_stage(t, ps, prefix, cfg.heads, q, &groups, kv_pool, None)
}

/// Temporal attention: each (agent, t) attends over the same agent's
/// strictly earlier observed states.
pub fn ta_stage(
    t: &mut Tape,
    ps: &ParamStore,
    cfg: &ModelConfig,
    idx: &SceneIndex,
    q: NodeId,
    ea: NodeId,
) -> Result<NodeId> {
    ea_stage(t, ps, cfg, idx, q, ea, "il.ta", |a, ti| {
        (0..ti)
            .filter(|&tp| idx.observed[a][tp])
            .map(|tp| (idx.row_nt(a, tp), (ti - tp) as f64, a, tp))
            .collect()
    })
}

/// Cross-agent attention at a fixed step offset: `dt` = +1 looks at other
/// agents one step ahead (future attention), `dt` = -1 one step behind
/// (historical attention), within the given radius.
fn cross_agent_stage(
    t: &mut Tape,
    ps: &ParamStore,
    cfg: &ModelConfig,
    idx: &SceneIndex,
    q: NodeId,
    ea: NodeId,
    prefix: &str,
    dt: isize,
    radius: f64,
) -> Result<NodeId> {
    ea_stage(t, ps, cfg, idx, q, ea, prefix, |a, ti| {
        let tp = ti as isize + dt;
        if tp < 0 || tp >= idx.h as isize {
            return Vec::new();
        }
        let tp = tp as usize;
        let here = &idx.poses[a][ti];
        (0..idx.n)
            .filter(|&m| m != a && idx.observed[m][tp])
            .filter(|&m| {
                let p = &idx.poses[m][tp];
                ((p.x - here.x).powi(2) + (p.y - here.y).powi(2)).sqrt() <= radius
            })
            .map(|m| (idx.row_nt(m, tp), -dt as f64, m, tp))
            .collect()
    })
}

/// The inverse-learning block: TA from the raw mode queries, then the
/// FA/HA chain in the configured order. Returns (q_ta, q_chain).
pub fn il_block(
    t: &mut Tape,
    ps: &ParamStore,
    cfg: &ModelConfig,
    idx: &SceneIndex,
    q0: NodeId,
    ea: NodeId,
) -> Result<(NodeId, NodeId)> {
    let q_ta = ta_stage(t, ps, cfg, idx, q0, ea)?;
    let fa = |t: &mut Tape, q| cross_agent_stage(t, ps, cfg, idx, q, ea, "il.fa", 1, cfg.r_f);
    let ha = |t: &mut Tape, q| cross_agent_stage(t, ps, cfg, idx, q, ea, "il.ha", -1, cfg.r_h);
    let mut chain = q0;
    let order: [(bool, bool); 2] = match cfg.il_order {
        IlOrder::Inverse => [(true, false), (false, true)],
        IlOrder::Forward => [(false, true), (true, false)],
    };
    for (is_fa, is_ha) in order {
        if is_fa && !cfg.disable_fa {
            chain = fa(t, chain)?;
        }
        if is_ha && !cfg.disable_ha {
            chain = ha(t, chain)?;
        }
    }
    Ok((q_ta, chain))
}

/// One factorized attention round: agent attention per (t, mode),
/// causal historical-prediction attention per (agent, mode), and mode
/// attention per (agent, t). `prefix` selects the round's parameters.
pub fn factorized_round(
    t: &mut Tape,
    ps: &ParamStore,
    cfg: &ModelConfig,
    idx: &SceneIndex,
    q: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let k = cfg.k;
    let (n, h) = (idx.n, idx.h);

    // Agent attention: other observed agents at the same timestamp within
    // the local radius, with relative-pose edges per pair.
    let mut feats = Vec::new();
    let mut src_rows = Vec::new();
    let mut groups = Vec::new();
    let mut kv_start = 0usize;
    let mut edge_start = 0usize;
    for ti in 0..h {
        let obs: Vec<usize> = (0..n).filter(|&a| idx.observed[a][ti]).collect();
        if obs.len() < 2 {
            continue;
        }
        let allowed: Vec<Vec<bool>> = obs
            .iter()
            .map(|&a| {
                obs.iter()
                    .map(|&m| {
                        m != a && {
                            let (pa, pm) = (&idx.poses[a][ti], &idx.poses[m][ti]);
                            ((pa.x - pm.x).powi(2) + (pa.y - pm.y).powi(2)).sqrt() <= cfg.r_m
                        }
                    })
                    .collect()
            })
            .collect();
        let dsts: Vec<usize> = (0..obs.len()).filter(|&i| allowed[i].iter().any(|&x| x)).collect();
        if dsts.is_empty() {
            continue;
        }
        for km in 0..k {
            let mut mask = Vec::with_capacity(dsts.len() * obs.len());
            for &di in &dsts {
                let a = obs[di];
                for (mi, &m) in obs.iter().enumerate() {
                    mask.push(allowed[di][mi]);
                    if allowed[di][mi] {
                        feats.extend(agent_edge_feats(&idx.poses[m][ti], &idx.poses[a][ti], 0.0));
                    } else {
                        feats.extend([0.0; 6]);
                    }
                }
            }
            for &m in &obs {
                src_rows.push(idx.row_ntk(m, ti, km, k));
            }
            groups.push(AttnGroup {
                q_rows: dsts.iter().map(|&di| idx.row_ntk(obs[di], ti, km, k)).collect(),
                kv_start,
                kv_len: obs.len(),
                mask: Some(mask),
                edge_start: Some(edge_start),
            });
            kv_start += obs.len();
            edge_start += dsts.len() * obs.len();
        }
    }
    let q = if groups.is_empty() {
        q
    } else {
        let leaf = feat_leaf(t, edge_start, 6, feats)?;
        let edges = mlp2_p(t, ps, &format!("{prefix}.agent.edge"), leaf)?;
        let kv_pool = t.gather_rows(q, src_rows)?;
        attn_stage(
            t,
            ps,
            &format!("{prefix}.agent"),
            cfg.heads,
            q,
            &groups,
            kv_pool,
            Some(edges),
        )?
    };

    // Historical-prediction attention: causal over the agent's own history
    // rows of the same mode, with time-interval edges.
    let mut feats = Vec::new();
    let mut src_rows = Vec::new();
    let mut groups = Vec::new();
    let mut kv_start = 0usize;
    let mut edge_start = 0usize;
    for a in 0..n {
        let obs: Vec<usize> = (0..h).filter(|&ti| idx.observed[a][ti]).collect();
        let dsts: Vec<usize> = obs
            .iter()
            .enumerate()
            .filter(|&(_, &ti)| obs.iter().any(|&tp| tp < ti))
            .map(|(i, _)| i)
            .collect();
        if dsts.is_empty() {
            continue;
        }
        for km in 0..k {
            let mut mask = Vec::with_capacity(dsts.len() * obs.len());
            for &di in &dsts {
                let ti = obs[di];
                for &tp in &obs {
                    mask.push(tp < ti);
                    if tp < ti {
                        feats.extend(agent_edge_feats(
                            &idx.poses[a][tp],
                            &idx.poses[a][ti],
                            (ti - tp) as f64,
                        ));
                    } else {
                        feats.extend([0.0; 6]);
                    }
                }
            }
            for &tp in &obs {
                src_rows.push(idx.row_ntk(a, tp, km, k));
            }
            groups.push(AttnGroup {
                q_rows: dsts.iter().map(|&di| idx.row_ntk(a, obs[di], km, k)).collect(),
                kv_start,
                kv_len: obs.len(),
                mask: Some(mask),
                edge_start: Some(edge_start),
            });
            kv_start += obs.len();
            edge_start += dsts.len() * obs.len();
        }
    }
    let q = if groups.is_empty() {
        q
    } else {
        let leaf = feat_leaf(t, edge_start, 6, feats)?;
        let edges = mlp2_p(t, ps, &format!("{prefix}.hist.edge"), leaf)?;
        let kv_pool = t.gather_rows(q, src_rows)?;
        attn_stage(
            t,
            ps,
            &format!("{prefix}.hist"),
            cfg.heads,
            q,
            &groups,
            kv_pool,
            Some(edges),
        )?
    };

    // Mode attention: the K modes of each (agent, t) exchange information;
    // with a single mode there is nothing to attend to.
    if k < 2 {
        return Ok(q);
    }
    let mut groups = Vec::new();
    let mut src_rows = Vec::new();
    let mut kv_start = 0usize;
    for a in 0..n {
        for ti in 0..h {
            let rows: Vec<usize> = (0..k).map(|km| idx.row_ntk(a, ti, km, k)).collect();
            let mask: Vec<bool> = (0..k * k).map(|i| i / k != i % k).collect();
            src_rows.extend(rows.iter().copied());
            groups.push(AttnGroup {
                q_rows: rows,
                kv_start,
                kv_len: k,
                mask: Some(mask),
                edge_start: None,
            });
            kv_start += k;
        }
    }
    let kv_pool = t.gather_rows(q, src_rows)?;
    attn_stage(t, ps, &format!("{prefix}.mode"), cfg.heads, q, &groups, kv_pool, None)
}

/// Decode proposal trajectories from the query tensor:
/// [N*H*K, F*2] position offsets in each (agent, t) local frame.
pub fn decode_proposals(t: &mut Tape, ps: &ParamStore, q: NodeId) -> Result<NodeId> {
    mlp2_p(t, ps, "dec.pro", q)
}
