//! Parameter creation and initialization for the full model.
//!
//! Every learnable array lives in one ParamStore under a dotted name whose
//! prefix identifies the submodule (enc., il., fact{r}., dec., das., ref.).
//! Linear weights use uniform fan-in scaling U(+-1/sqrt(fan_in)).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{DenseArray, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DasMode {
    Dynamic,
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IlOrder {
    /// FA before HA (the inverse-learning paradigm).
    Inverse,
    /// HA before FA.
    Forward,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub n_rec: usize,
    pub k: usize,
    pub h: usize,
    pub f: usize,
    pub r_m: f64,
    pub r_f: f64,
    pub r_h: f64,
    pub das_mode: DasMode,
    pub il_order: IlOrder,
    pub disable_fa: bool,
    pub disable_ha: bool,
}

impl ModelConfig {
    pub fn desk(h: usize, f: usize) -> Self {
        Self {
            d: 32,
            heads: 4,
            n_rec: 2,
            k: 6,
            h,
            f,
            r_m: 50.0,
            r_f: 50.0,
            r_h: 50.0,
            das_mode: DasMode::Dynamic,
            il_order: IlOrder::Inverse,
            disable_fa: false,
            disable_ha: false,
        }
    }
}

/// Feature widths of the hand-built edge descriptors.
pub const AGENT_EDGE_FEATS: usize = 6; // dist, sin/cos dir, sin/cos rel heading, time gap
pub const LANE_EDGE_FEATS: usize = 5; // dist, sin/cos dir, sin/cos rel heading
pub const MAP_POINT_FEATS: usize = 8; // dist, sin/cos dir, sin/cos tangent, kind one-hot
pub const MAP_CONN_FEATS: usize = 9; // dist, sin/cos dir, sin/cos rel heading, kind one-hot, hops
pub const REFINE_EDGE_FEATS: usize = 5; // dist + sin/cos to anchor, sin/cos lane heading
pub const AGENT_NODE_FEATS: usize = 8; // speed, sin/cos vel dir offset, length, width, category

/// Stable FNV-1a hash of a parameter name, mixed with the model seed.
///
/// Each parameter draws from its own RNG keyed by (seed, name) so that
/// enabling or disabling a submodule (DAS, FA, HA) cannot shift the
/// initialization of any other parameter: ablation rows start from
/// identical weights wherever their parameter sets overlap, which turns
/// the directional comparisons into paired experiments.
fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn uniform(seed: u64, name: &str, shape: &[usize], bound: f64) -> DenseArray {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    DenseArray::new(shape.to_vec(), data).unwrap()
}

fn create_uniform(ps: &mut ParamStore, seed: u64, name: &str, shape: &[usize], bound: f64) -> Result<()> {
    ps.create(name, uniform(seed, name, shape, bound))?;
    Ok(())
}

fn linear(ps: &mut ParamStore, seed: u64, prefix: &str, din: usize, dout: usize) -> Result<()> {
    let bound = 1.0 / (din as f64).sqrt();
    create_uniform(ps, seed, &format!("{prefix}.w"), &[din, dout], bound)?;
    create_uniform(ps, seed, &format!("{prefix}.b"), &[dout], bound)?;
    Ok(())
}

fn layer_norm(ps: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    ps.create(&format!("{prefix}.g"), DenseArray::full(&[d], 1.0))?;
    ps.create(&format!("{prefix}.b"), DenseArray::zeros(&[d]))?;
    Ok(())
}

/// Two-layer MLP: din -> hidden -> dout with SiLU in between.
fn mlp2(ps: &mut ParamStore, seed: u64, prefix: &str, din: usize, hidden: usize, dout: usize) -> Result<()> {
    linear(ps, seed, &format!("{prefix}.l1"), din, hidden)?;
    linear(ps, seed, &format!("{prefix}.l2"), hidden, dout)?;
    Ok(())
}

/// One pre-norm attention block: projections, per-pair edge projection,
/// layer norms, and a feed-forward with hidden size 2D.
fn attn_block(ps: &mut ParamStore, seed: u64, prefix: &str, d: usize) -> Result<()> {
    for proj in ["wq", "wk", "wv", "wo", "we"] {
        linear(ps, seed, &format!("{prefix}.{proj}"), d, d)?;
    }
    layer_norm(ps, &format!("{prefix}.ln_q"), d)?;
    layer_norm(ps, &format!("{prefix}.ln_kv"), d)?;
    layer_norm(ps, &format!("{prefix}.ln_f"), d)?;
    linear(ps, seed, &format!("{prefix}.f1"), d, 2 * d)?;
    linear(ps, seed, &format!("{prefix}.f2"), 2 * d, d)?;
    Ok(())
}

fn factorized_round(ps: &mut ParamStore, seed: u64, prefix: &str, d: usize) -> Result<()> {
    mlp2(ps, seed, &format!("{prefix}.agent.edge"), AGENT_EDGE_FEATS, d, d)?;
    attn_block(ps, seed, &format!("{prefix}.agent"), d)?;
    mlp2(ps, seed, &format!("{prefix}.hist.edge"), AGENT_EDGE_FEATS, d, d)?;
    attn_block(ps, seed, &format!("{prefix}.hist"), d)?;
    attn_block(ps, seed, &format!("{prefix}.mode"), d)?;
    Ok(())
}

/// Build the complete parameter store for a model configuration.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut ps = ParamStore::new();
    let d = cfg.d;

    // Map encoder: segment seeding from arc length, point cross-attention,
    // connectivity self-attention.
    mlp2(&mut ps, seed, "enc.map.len", 1, d, d)?;
    mlp2(&mut ps, seed, "enc.map.point", MAP_POINT_FEATS, d, d)?;
    attn_block(&mut ps, seed, "enc.map.cross", d)?;
    mlp2(&mut ps, seed, "enc.map.conn", MAP_CONN_FEATS, d, d)?;
    attn_block(&mut ps, seed, "enc.map.self", d)?;

    // Agent encoder and mode queries.
    mlp2(&mut ps, seed, "enc.agent.mlp", AGENT_NODE_FEATS, d, d)?;
    create_uniform(&mut ps, seed, "enc.agent.mask", &[d], 1.0 / (d as f64).sqrt())?;
    create_uniform(&mut ps, seed, "enc.mode.queries", &[cfg.k, d], 1.0 / (d as f64).sqrt())?;
    linear(&mut ps, seed, "enc.mode.proj", d, d)?;

    // Agent-Map attention.
    mlp2(&mut ps, seed, "enc.am.edge", LANE_EDGE_FEATS, d, d)?;
    attn_block(&mut ps, seed, "enc.am", d)?;

    // Inverse-learning attention.
    mlp2(&mut ps, seed, "il.ta.edge", AGENT_EDGE_FEATS, d, d)?;
    attn_block(&mut ps, seed, "il.ta", d)?;
    mlp2(&mut ps, seed, "il.fa.edge", AGENT_EDGE_FEATS, d, d)?;
    attn_block(&mut ps, seed, "il.fa", d)?;
    mlp2(&mut ps, seed, "il.ha.edge", AGENT_EDGE_FEATS, d, d)?;
    attn_block(&mut ps, seed, "il.ha", d)?;

    // Factorized attention rounds (independent weights per round).
    for r in 0..cfg.n_rec {
        factorized_round(&mut ps, seed, &format!("fact{r}"), d)?;
    }

    // Proposal decoder.
    mlp2(&mut ps, seed, "dec.pro", d, 2 * d, cfg.f * 2)?;

    // Dynamic anchor selection.
    if cfg.das_mode == DasMode::Dynamic {
        let (h, k, f) = (cfg.h, cfg.k, cfg.f);
        mlp2(&mut ps, seed, "das.his", 3, 4, 1)?;
        mlp2(&mut ps, seed, "das.pro", 3, 4, 1)?;
        let bound_h = 1.0 / (h as f64 * h as f64).sqrt();
        create_uniform(&mut ps, seed, "das.convh.w", &[h, h, h, 1], bound_h)?;
        create_uniform(&mut ps, seed, "das.convh.b", &[h], bound_h)?;
        let bound_k = 1.0 / (k as f64 * h as f64).sqrt();
        create_uniform(&mut ps, seed, "das.convk.w", &[k, k, h, 1], bound_k)?;
        create_uniform(&mut ps, seed, "das.convk.b", &[k], bound_k)?;
        // Zero output layer: sigmoid(0) = 0.5, so dynamic selection starts
        // exactly at the midpoint anchor and learns deviations from there.
        // A random start scatters anchors and destabilizes early refinement.
        linear(&mut ps, seed, "das.out.l1", 2 * (f - h + 1), 4)?;
        ps.create("das.out.l2.w", DenseArray::zeros(&[4, 1]))?;
        ps.create("das.out.l2.b", DenseArray::zeros(&[1]))?;
    }

    // Refinement stage.
    mlp2(&mut ps, seed, "ref.query", 3 * cfg.f, d, d)?;
    mlp2(&mut ps, seed, "ref.am.edge", REFINE_EDGE_FEATS, d, d)?;
    attn_block(&mut ps, seed, "ref.am", d)?;
    factorized_round(&mut ps, seed, "ref.fact", d)?;
    mlp2(&mut ps, seed, "ref.dec.delta", d, 2 * d, cfg.f * 2)?;
    mlp2(&mut ps, seed, "ref.dec.logit", d, d, 1)?;

    Ok(ps)
}
