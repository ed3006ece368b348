//! Training objective: winner-take-all mode selection, the two-stage
//! regression + classification loss, and the AdamW optimizer with a cosine
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::{ForwardOut, ModelConfig, SceneIndex};
use crate::numerics::{DenseArray, NodeId, ParamStore, Tape};
use crate::scene::Scenario;

/// Which prediction task the loss (and evaluation) scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// One winner mode per timestamp shared by all agents.
    Joint,
    /// An independent winner mode per (agent, timestamp).
    Marginal,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Joint => "joint",
            Task::Marginal => "marginal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "joint" => Some(Task::Joint),
            "marginal" => Some(Task::Marginal),
            _ => None,
        }
    }
}

/// Ground-truth futures in each (agent, t) local frame.
pub struct Targets {
    /// [N*H, F*2] positions; row (agent*H + t).
    pub pos: Vec<f64>,
    /// Supervised flags per (agent, t): the state must be observed.
    pub supervised: Vec<bool>,
}

pub fn build_targets(s: &Scenario, idx: &SceneIndex) -> Targets {
    let (n, h, f) = (idx.n, idx.h, s.f);
    let mut pos = vec![0.0; n * h * f * 2];
    let mut supervised = vec![false; n * h];
    for (a, track) in s.agents.iter().enumerate() {
        for ti in 0..h {
            supervised[idx.row_nt(a, ti)] = track.states[ti].observed;
            for step in 0..f {
                let st = &track.states[ti + 1 + step];
                let local = idx.to_frame(a, ti, (st.x, st.y));
                let o = (idx.row_nt(a, ti) * f + step) * 2;
                pos[o] = local.0;
                pos[o + 1] = local.1;
            }
        }
    }
    Targets { pos, supervised }
}

/// Winner modes from refined endpoint errors: `winners[row_nt]` is the mode
/// whose endpoint lies closest to the ground-truth endpoint. Joint selection
/// shares one winner per timestamp (minimum summed error over supervised
/// agents); ties resolve to the lowest mode index.
pub fn wta_select(
    p_fin: &[f64],
    targets: &Targets,
    idx: &SceneIndex,
    cfg: &ModelConfig,
    task: Task,
) -> Vec<usize> {
    let (n, h, k, f) = (idx.n, idx.h, cfg.k, cfg.f);
    let err = |a: usize, ti: usize, km: usize| -> f64 {
        let row = idx.row_ntk(a, ti, km, k);
        let o = (row * f + f - 1) * 2;
        let g = (idx.row_nt(a, ti) * f + f - 1) * 2;
        let dx = p_fin[o] - targets.pos[g];
        let dy = p_fin[o + 1] - targets.pos[g + 1];
        (dx * dx + dy * dy).sqrt()
    };
    let mut winners = vec![0usize; n * h];
    match task {
        Task::Marginal => {
            for a in 0..n {
                for ti in 0..h {
                    if !targets.supervised[idx.row_nt(a, ti)] {
                        continue;
                    }
                    let mut best = (f64::INFINITY, 0usize);
                    for km in 0..k {
                        let e = err(a, ti, km);
                        if e < best.0 {
                            best = (e, km);
                        }
                    }
                    winners[idx.row_nt(a, ti)] = best.1;
                }
            }
        }
        Task::Joint => {
            for ti in 0..h {
                let agents: Vec<usize> = (0..n)
                    .filter(|&a| targets.supervised[idx.row_nt(a, ti)])
                    .collect();
                if agents.is_empty() {
                    continue;
                }
                let mut best = (f64::INFINITY, 0usize);
                for km in 0..k {
                    let e: f64 = agents.iter().map(|&a| err(a, ti, km)).sum();
                    if e < best.0 {
                        best = (e, km);
                    }
                }
                for &a in &agents {
                    winners[idx.row_nt(a, ti)] = best.1;
                }
            }
        }
    }
    winners
}

/// Scalar components of one loss evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub reg_pro: f64,
    pub reg_fin: f64,
    pub cls: f64,
    pub total: f64,
}

/// Build the loss graph on the forward tape and return the total-loss node.
pub fn compute_loss(
    t: &mut Tape,
    idx: &SceneIndex,
    cfg: &ModelConfig,
    s: &Scenario,
    out: &ForwardOut,
    task: Task,
) -> Result<(NodeId, LossParts)> {
    let (n, h, k, f) = (idx.n, idx.h, cfg.k, cfg.f);
    let targets = build_targets(s, idx);
    let winners = wta_select(t.value(out.p_fin).data(), &targets, idx, cfg, task);

    let mut rows = Vec::new();
    let mut tgt = Vec::new();
    let mut sup = Vec::new();
    for a in 0..n {
        for ti in 0..h {
            let nt = idx.row_nt(a, ti);
            if !targets.supervised[nt] {
                continue;
            }
            rows.push(idx.row_ntk(a, ti, winners[nt], k));
            tgt.extend_from_slice(&targets.pos[nt * f * 2..(nt + 1) * f * 2]);
            sup.push(nt);
        }
    }
    if rows.is_empty() {
        return Err(Error::Data("no supervised (agent, t) pairs".into()));
    }
    let count = rows.len();
    let tgt_leaf = t.leaf(DenseArray::new(vec![count, f * 2], tgt)?);
    let ones = t.leaf(DenseArray::full(&[count, f * 2], 1.0));

    let pro = t.gather_rows(out.p_pro, rows.clone())?;
    let reg_pro = t.huber(pro, tgt_leaf, ones, 1.0)?;
    let fin = t.gather_rows(out.p_fin, rows)?;
    let reg_fin = t.huber(fin, tgt_leaf, ones, 1.0)?;

    let mut ces = Vec::with_capacity(count);
    for &nt in &sup {
        let logit_row = t.gather_rows(out.logits, vec![nt])?;
        ces.push(t.cross_entropy(logit_row, winners[nt])?);
    }
    let ce_all = t.concat_rows(&ces)?;
    let cls = t.mean_all(ce_all);

    let sum = t.add(reg_pro, reg_fin)?;
    let total = t.add(sum, cls)?;
    let parts = LossParts {
        reg_pro: t.value(reg_pro).item(),
        reg_fin: t.value(reg_fin).item(),
        cls: t.value(cls).item(),
        total: t.value(total).item(),
    };
    Ok((total, parts))
}

/// Cosine learning-rate schedule over whole epochs.
pub fn cosine_lr(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    let e = epoch.min(total_epochs) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * e / total_epochs as f64).cos())
}

/// AdamW with decoupled weight decay. Moment buffers follow the parameter
/// store's creation order.
pub struct AdamW {
    m: Vec<DenseArray>,
    v: Vec<DenseArray>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(ps: &ParamStore, weight_decay: f64) -> Self {
        Self {
            m: ps.iter().map(|p| DenseArray::zeros(p.value.shape())).collect(),
            v: ps.iter().map(|p| DenseArray::zeros(p.value.shape())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// Moment buffers and step counter, for checkpointing.
    pub fn state(&self) -> (&[DenseArray], &[DenseArray], u64) {
        (&self.m, &self.v, self.step)
    }

    /// Restore moments and step counter from flattened checkpoint extras
    /// ("opt.m", "opt.v", "opt.step"); missing extras leave the state fresh.
    pub fn load_state(
        &mut self,
        ps: &ParamStore,
        extras: &[(String, DenseArray)],
    ) -> Result<()> {
        let find = |name: &str| extras.iter().find(|(n, _)| n == name).map(|(_, a)| a);
        let unflatten = |flat: &DenseArray| -> Result<Vec<DenseArray>> {
            let total: usize = ps.iter().map(|p| p.value.len()).sum();
            if flat.len() != total {
                return Err(Error::Data(format!(
                    "optimizer state has {} values, parameters need {total}",
                    flat.len()
                )));
            }
            let mut out = Vec::with_capacity(ps.len());
            let mut off = 0usize;
            for p in ps.iter() {
                let n = p.value.len();
                let data = flat.data()[off..off + n].to_vec();
                out.push(DenseArray::new(p.value.shape().to_vec(), data)?);
                off += n;
            }
            Ok(out)
        };
        if let (Some(m), Some(v)) = (find("opt.m"), find("opt.v")) {
            self.m = unflatten(m)?;
            self.v = unflatten(v)?;
        }
        if let Some(s) = find("opt.step") {
            self.step = s.item() as u64;
        }
        Ok(())
    }

    /// Apply one update from the gradients currently held in the store.
    pub fn step(&mut self, ps: &mut ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..ps.len() {
            let p = ps.get_mut(i);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * w[j]);
            }
        }
    }
}
