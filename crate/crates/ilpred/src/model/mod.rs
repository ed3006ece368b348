//! The two-stage trajectory prediction model.
//!
//! A forward pass builds the whole computation on one tape: scene encoding,
//! inverse-learning attention, factorized attention, proposal decoding,
//! dynamic anchor selection, and refinement. All trajectory outputs are
//! position sequences in the local frame of their (agent, t) query pose.

pub mod blocks;
pub mod encoder;
pub mod interaction;
pub mod params;
pub mod refine;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, ParamStore, Tape};
use crate::scene::Scenario;

pub use blocks::SceneIndex;
pub use params::{init_params, DasMode, IlOrder, ModelConfig};

/// Node ids of the model outputs on the forward tape.
pub struct ForwardOut {
    /// Proposal trajectories, [N*H*K, F*2], local frames.
    pub p_pro: NodeId,
    /// Refined trajectories, [N*H*K, F*2], local frames.
    pub p_fin: NodeId,
    /// Mode logits, [N*H, K].
    pub logits: NodeId,
    /// Fractional anchor indices, [N*H*K].
    pub frac: NodeId,
    /// Anchor points, [N*H*K, 2], local frames.
    pub anchors: NodeId,
}

/// Run the full model on one scenario, appending to the given tape.
pub fn forward(
    t: &mut Tape,
    ps: &ParamStore,
    cfg: &ModelConfig,
    s: &Scenario,
) -> Result<(SceneIndex, ForwardOut)> {
    if s.h != cfg.h || s.f != cfg.f {
        return Err(Error::Config(format!(
            "scenario horizon ({}, {}) does not match model ({}, {})",
            s.h, s.f, cfg.h, cfg.f
        )));
    }
    let idx = SceneIndex::build(s, cfg);

    let em = encoder::encode_map(t, ps, cfg, s, &idx)?;
    let ea = encoder::encode_agents(t, ps, cfg, s, &idx)?;
    let q0 = encoder::mode_queries(t, ps, ea)?;

    let q_sa = encoder::agent_map_stage(t, ps, cfg, &idx, q0, em)?;
    let (q_ta, q_chain) = interaction::il_block(t, ps, cfg, &idx, q0, ea)?;
    let sum = t.add(q_sa, q_ta)?;
    let mut q = t.add(sum, q_chain)?;

    for r in 0..cfg.n_rec {
        q = interaction::factorized_round(t, ps, cfg, &idx, q, &format!("fact{r}"))?;
    }

    let p_pro = interaction::decode_proposals(t, ps, q)?;
    let frac = refine::das_frac(t, ps, cfg, &idx, p_pro)?;
    let anchors = refine::select_anchors(t, cfg, &idx, p_pro, frac)?;
    let (p_fin, logits) = refine::refine(t, ps, cfg, &idx, em, p_pro, anchors)?;

    Ok((
        idx,
        ForwardOut {
            p_pro,
            p_fin,
            logits,
            frac,
            anchors,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::blocks::*;
    use super::*;
    use crate::numerics::DenseArray;
    use crate::scene::{generate_scenario, Kind};

    fn micro_cfg(h: usize, f: usize) -> ModelConfig {
        let mut cfg = ModelConfig::desk(h, f);
        cfg.d = 8;
        cfg.heads = 2;
        cfg.k = 2;
        cfg.n_rec = 1;
        cfg
    }

    fn scenario(seed: u64) -> Scenario {
        generate_scenario(Kind::Intersection, seed, 6, 8, 10.0)
    }

    fn run(cfg: &ModelConfig, ps: &ParamStore, s: &Scenario) -> (Tape, ForwardOut) {
        let mut t = Tape::new();
        let (_, out) = forward(&mut t, ps, cfg, s).unwrap();
        (t, out)
    }

    #[test]
    fn attn_stage_passes_uncovered_rows_through() {
        let cfg = micro_cfg(6, 8);
        let ps = init_params(&cfg, 0).unwrap();
        let mut t = Tape::new();
        let q = t.leaf(DenseArray::new(vec![4, 8], (0..32).map(|i| i as f64 * 0.1).collect()).unwrap());
        let kv = t.leaf(DenseArray::new(vec![3, 8], (0..24).map(|i| (i as f64).sin()).collect()).unwrap());
        let groups = [AttnGroup {
            q_rows: vec![1, 2],
            kv_start: 0,
            kv_len: 3,
            mask: None,
            edge_start: None,
        }];
        let before = t.value(q).clone();
        let out = attn_stage(&mut t, &ps, "il.ta", cfg.heads, q, &groups, kv, None).unwrap();
        let after = t.value(out);
        assert_eq!(before.data()[0..8], after.data()[0..8]);
        assert_eq!(before.data()[24..32], after.data()[24..32]);
        assert!(before.data()[8..16] != after.data()[8..16]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = micro_cfg(6, 8);
        let ps = init_params(&cfg, 1).unwrap();
        let s = scenario(3);
        let (ta, oa) = run(&cfg, &ps, &s);
        let (tb, ob) = run(&cfg, &ps, &s);
        assert_eq!(ta.value(oa.p_fin).data(), tb.value(ob.p_fin).data());
        assert_eq!(ta.value(oa.logits).data(), tb.value(ob.logits).data());
    }

    #[test]
    fn proposals_ignore_states_far_in_the_future() {
        // Perturbing an agent state at timestamp tp must leave proposals at
        // all timestamps t with t + 1 < tp unchanged.
        let cfg = micro_cfg(6, 8);
        let ps = init_params(&cfg, 2).unwrap();
        let s = scenario(5);
        let (ta, oa) = run(&cfg, &ps, &s);

        let mut s2 = s.clone();
        let tp = s.h - 1;
        s2.agents[1].states[tp].x += 0.5;
        s2.agents[1].states[tp].speed += 0.3;
        let (tb, ob) = run(&cfg, &ps, &s2);

        let (k, f) = (cfg.k, cfg.f);
        let (pa, pb) = (ta.value(oa.p_pro).data(), tb.value(ob.p_pro).data());
        for a in 0..s.agents.len() {
            for ti in 0..tp - 1 {
                let start = (a * s.h + ti) * k * f * 2;
                let end = start + k * f * 2;
                assert_eq!(pa[start..end], pb[start..end], "agent {a} t {ti}");
            }
        }
        // The perturbed timestamp itself must see a change somewhere.
        assert!(pa != pb);
    }

    #[test]
    fn temporal_attention_is_causal() {
        // Perturbing a state at tp leaves the TA output at strictly earlier
        // timestamps bit-identical.
        let cfg = micro_cfg(6, 8);
        let ps = init_params(&cfg, 3).unwrap();
        let s = scenario(7);
        let ta_out = |s: &Scenario| {
            let mut t = Tape::new();
            let idx = SceneIndex::build(s, &cfg);
            let ea = encoder::encode_agents(&mut t, &ps, &cfg, s, &idx).unwrap();
            let q0 = encoder::mode_queries(&mut t, &ps, ea).unwrap();
            let q = interaction::ta_stage(&mut t, &ps, &cfg, &idx, q0, ea).unwrap();
            t.value(q).clone()
        };
        let base = ta_out(&s);
        let mut s2 = s.clone();
        let tp = 3;
        s2.agents[0].states[tp].x += 1.0;
        let pert = ta_out(&s2);
        let row_len = cfg.k * cfg.d;
        for a in 0..s.agents.len() {
            for ti in 0..tp {
                let start = (a * s.h + ti) * row_len;
                assert_eq!(
                    base.data()[start..start + row_len],
                    pert.data()[start..start + row_len],
                    "agent {a} t {ti}"
                );
            }
        }
        assert!(base.data() != pert.data());
    }

    #[test]
    fn single_mode_skips_mode_attention() {
        let mut cfg = micro_cfg(6, 8);
        cfg.k = 1;
        let ps = init_params(&cfg, 4).unwrap();
        let s = scenario(2);
        let (t, out) = run(&cfg, &ps, &s);
        assert_eq!(t.shape(out.logits), [s.agents.len() * s.h, 1]);
    }

    #[test]
    fn anchors_lie_on_the_proposal_polyline() {
        let cfg = micro_cfg(6, 8);
        let ps = init_params(&cfg, 5).unwrap();
        let s = scenario(9);
        let (t, out) = run(&cfg, &ps, &s);
        let frac = t.value(out.frac).data();
        let pro = t.value(out.p_pro).data();
        let anc = t.value(out.anchors).data();
        let f = cfg.f;
        for (i, &x) in frac.iter().enumerate() {
            assert!((0.0..=(f as f64 - 1.0)).contains(&x), "frac {x}");
            let lo = (x.floor() as usize).min(f - 2);
            let u = x - lo as f64;
            for c in 0..2 {
                let p0 = pro[(i * f + lo) * 2 + c];
                let p1 = pro[(i * f + lo + 1) * 2 + c];
                let want = (1.0 - u) * p0 + u * p1;
                assert!((anc[i * 2 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dynamic_frac_starts_at_the_midpoint() {
        // The DAS output layer is zero-initialized, so an untrained model
        // must place every anchor exactly at the midpoint.
        let cfg = micro_cfg(6, 8);
        let ps = init_params(&cfg, 12).unwrap();
        let s = scenario(8);
        let (t, out) = run(&cfg, &ps, &s);
        let mid = (cfg.f as f64 - 1.0) / 2.0;
        assert!(t.value(out.frac).data().iter().all(|&x| x == mid));
    }

    #[test]
    fn midpoint_mode_uses_constant_frac() {
        let mut cfg = micro_cfg(6, 8);
        cfg.das_mode = DasMode::Midpoint;
        let ps = init_params(&cfg, 6).unwrap();
        let s = scenario(4);
        let (t, out) = run(&cfg, &ps, &s);
        let mid = (cfg.f as f64 - 1.0) / 2.0;
        assert!(t.value(out.frac).data().iter().all(|&x| x == mid));
    }

    #[test]
    fn masked_history_changes_only_inputs_not_shapes() {
        let cfg = micro_cfg(6, 8);
        let ps = init_params(&cfg, 7).unwrap();
        let mut s = scenario(11);
        s.agents[1].states[2].observed = false;
        s.agents[0].states[0].observed = false;
        let (t, out) = run(&cfg, &ps, &s);
        let rows = s.agents.len() * s.h * cfg.k;
        assert_eq!(t.shape(out.p_fin), [rows, cfg.f * 2]);
        assert!(t.value(out.p_fin).all_finite());
    }

    #[test]
    fn disabling_fa_and_ha_matches_reordered_chain() {
        // With FA disabled, inverse and forward order run HA only, so both
        // orders must agree bit for bit.
        let mut cfg = micro_cfg(6, 8);
        cfg.disable_fa = true;
        let ps = init_params(&cfg, 8).unwrap();
        let s = scenario(6);
        let (ta, oa) = run(&cfg, &ps, &s);
        cfg.il_order = IlOrder::Forward;
        let (tb, ob) = run(&cfg, &ps, &s);
        assert_eq!(ta.value(oa.p_fin).data(), tb.value(ob.p_fin).data());
    }
}
