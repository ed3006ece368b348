//! Drivers shared by the CLI and the acceptance tests: dataset generation,
//! prediction, scoring, evaluation, and the training loop.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{accuracy_metrics, diversity_metrics, joint_metrics, DrivableRaster, MetricReport};
use crate::model::{forward, init_params, ModelConfig};
use crate::numerics::{checkpoint, DenseArray, ParamStore, Tape};
use crate::objective::{compute_loss, cosine_lr, AdamW, LossParts, Task};
use crate::scene::format::{load_scenario, load_split, save_scenario, save_split};
use crate::scene::{generate_scenario, Kind, Scenario, SplitManifest};

/// Generate the train/val dataset described by the config into `out_dir`
/// and write the split manifest. Deterministic in the config seed.
pub fn generate_dataset(cfg: &RunConfig, out_dir: &Path) -> Result<SplitManifest> {
    let kinds: Vec<Kind> = cfg.kinds.iter().map(|k| Kind::parse(k).unwrap()).collect();
    std::fs::create_dir_all(out_dir.join("train"))?;
    std::fs::create_dir_all(out_dir.join("val"))?;
    let emit = |split: &str, count: usize, offset: u64| -> Result<Vec<String>> {
        let mut files = Vec::with_capacity(count);
        for i in 0..count {
            let kind = kinds[i % kinds.len()];
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(offset + i as u64);
            let s = generate_scenario(kind, seed, cfg.h, cfg.f, cfg.sample_rate_hz);
            let rel = format!("{split}/{i:05}.scn");
            save_scenario(&out_dir.join(&rel), &s)?;
            files.push(rel);
        }
        Ok(files)
    };
    let train = emit("train", cfg.train_scenarios, 0)?;
    let val = emit("val", cfg.val_scenarios, cfg.train_scenarios as u64)?;
    let manifest = SplitManifest {
        seed: cfg.seed,
        kind_mix: cfg
            .kinds
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let per = |total: usize| (total + cfg.kinds.len() - 1 - i) / cfg.kinds.len();
                (k.clone(), per(cfg.train_scenarios) + per(cfg.val_scenarios))
            })
            .collect(),
        train,
        val,
    };
    save_split(&out_dir.join("split.txt"), &manifest)?;
    Ok(manifest)
}

/// Load both splits listed in a dataset directory's manifest.
pub fn load_dataset(data_dir: &Path) -> Result<(Vec<Scenario>, Vec<Scenario>)> {
    let manifest = load_split(&data_dir.join("split.txt"))?;
    let load_all = |files: &[String]| -> Result<Vec<Scenario>> {
        files.iter().map(|rel| load_scenario(&data_dir.join(rel))).collect()
    };
    Ok((load_all(&manifest.train)?, load_all(&manifest.val)?))
}

/// Drop a fraction of each agent's history states (never the last one).
pub fn apply_mask(s: &mut Scenario, ratio: f64, rng: &mut ChaCha8Rng) {
    let h = s.h;
    for a in &mut s.agents {
        let eligible = h - 1;
        let count = (ratio * eligible as f64).round() as usize;
        let picked = rand::seq::index::sample(rng, eligible, count.min(eligible));
        for t in picked {
            a.states[t].observed = false;
        }
    }
}

/// Global-frame predictions for one scenario at the evaluation timestamp
/// (the last history step).
pub struct AgentPrediction {
    pub agent_id: u32,
    /// Softmax mode probabilities, [K].
    pub probs: Vec<f64>,
    /// Refined trajectories, [K*F*2], global frame.
    pub finals: Vec<f64>,
    /// Proposal trajectories, [K*F*2], global frame.
    pub proposals: Vec<f64>,
    /// Anchor points, [K*2], global frame.
    pub anchors: Vec<f64>,
    /// Fractional anchor indices, [K].
    pub frac: Vec<f64>,
    /// Ground-truth future, [F*2], global frame.
    pub gt: Vec<f64>,
}

pub struct ScenarioPrediction {
    pub scenario_id: String,
    pub agents: Vec<AgentPrediction>,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Run the model and convert the last-timestamp outputs to global frames.
pub fn predict(ps: &ParamStore, mcfg: &ModelConfig, s: &Scenario) -> Result<ScenarioPrediction> {
    let mut t = Tape::new();
    let (idx, out) = forward(&mut t, ps, mcfg, s)?;
    if let Some((node, label)) = t.first_non_finite() {
        return Err(Error::Numeric(format!("non-finite value in {label} (node {node})")));
    }
    let (k, f, h) = (mcfg.k, mcfg.f, s.h);
    let p_fin = t.value(out.p_fin).data();
    let p_pro = t.value(out.p_pro).data();
    let logits = t.value(out.logits).data();
    let anchors = t.value(out.anchors).data();
    let frac = t.value(out.frac).data();
    let ti = h - 1;
    let mut agents = Vec::with_capacity(s.agents.len());
    for (a, track) in s.agents.iter().enumerate() {
        let m = idx.local_to_global(a, ti);
        let to_global = |pts: &[f64], out: &mut Vec<f64>| {
            for p in pts.chunks_exact(2) {
                out.push(m[0] * p[0] + m[1] * p[1] + m[4]);
                out.push(m[2] * p[0] + m[3] * p[1] + m[5]);
            }
        };
        let mut finals = Vec::with_capacity(k * f * 2);
        let mut proposals = Vec::with_capacity(k * f * 2);
        let mut anc = Vec::with_capacity(k * 2);
        let mut fr = Vec::with_capacity(k);
        for km in 0..k {
            let row = idx.row_ntk(a, ti, km, k);
            to_global(&p_fin[row * f * 2..(row + 1) * f * 2], &mut finals);
            to_global(&p_pro[row * f * 2..(row + 1) * f * 2], &mut proposals);
            to_global(&anchors[row * 2..row * 2 + 2], &mut anc);
            fr.push(frac[row]);
        }
        let nt = idx.row_nt(a, ti);
        let probs = softmax(&logits[nt * k..(nt + 1) * k]);
        let gt: Vec<f64> = track.states[h..h + f]
            .iter()
            .flat_map(|st| [st.x, st.y])
            .collect();
        agents.push(AgentPrediction {
            agent_id: track.id,
            probs,
            finals,
            proposals,
            anchors: anc,
            frac: fr,
            gt,
        });
    }
    Ok(ScenarioPrediction {
        scenario_id: s.id.clone(),
        agents,
    })
}

const PRED_VERSION: &str = "ilpred-pred v1";

/// Serialize a scenario prediction: line-oriented text, 17 significant
/// digits, bit-exact round trips.
pub fn prediction_to_string(p: &ScenarioPrediction) -> String {
    let mut out = format!("{PRED_VERSION}\nscenario {}\n", p.scenario_id);
    let nums = |vals: &[f64]| {
        vals.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(" ")
    };
    for a in &p.agents {
        let k = a.probs.len();
        let f = a.gt.len() / 2;
        out.push_str(&format!("agent {} {k} {f}\n", a.agent_id));
        out.push_str(&format!("prob {}\n", nums(&a.probs)));
        out.push_str(&format!("frac {}\n", nums(&a.frac)));
        out.push_str(&format!("anchor {}\n", nums(&a.anchors)));
        for m in 0..k {
            out.push_str(&format!("final {}\n", nums(&a.finals[m * f * 2..(m + 1) * f * 2])));
            out.push_str(&format!("proposal {}\n", nums(&a.proposals[m * f * 2..(m + 1) * f * 2])));
        }
        out.push_str(&format!("gt {}\n", nums(&a.gt)));
    }
    out.push_str("end\n");
    out
}

pub fn prediction_from_string(text: &str) -> Result<ScenarioPrediction> {
    let mut lines = text.lines().enumerate();
    let perr = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
    let (i, header) = lines
        .next()
        .ok_or_else(|| perr(0, "empty prediction file".into()))?;
    if header != PRED_VERSION {
        return Err(Error::Version(format!("expected {PRED_VERSION:?}, found {header:?}")));
    }
    let _ = i;
    let mut scenario_id = None;
    let mut agents: Vec<AgentPrediction> = Vec::new();
    let mut saw_end = false;
    for (i, line) in lines {
        if saw_end && !line.trim().is_empty() {
            return Err(perr(i, "content after end record".into()));
        }
        let mut fields = line.split_whitespace();
        let Some(tag) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        let floats = |rest: &[&str]| -> Result<Vec<f64>> {
            rest.iter()
                .map(|s| s.parse().map_err(|_| perr(i, format!("bad float {s:?}"))))
                .collect()
        };
        match tag {
            "scenario" => scenario_id = rest.first().map(|s| s.to_string()),
            "agent" => {
                if rest.len() != 3 {
                    return Err(perr(i, "agent record needs id, k, f".into()));
                }
                let id = rest[0].parse().map_err(|_| perr(i, "bad agent id".into()))?;
                agents.push(AgentPrediction {
                    agent_id: id,
                    probs: Vec::new(),
                    finals: Vec::new(),
                    proposals: Vec::new(),
                    anchors: Vec::new(),
                    frac: Vec::new(),
                    gt: Vec::new(),
                });
            }
            "prob" | "frac" | "anchor" | "final" | "proposal" | "gt" => {
                let a = agents
                    .last_mut()
                    .ok_or_else(|| perr(i, format!("{tag} record before agent")))?;
                let vals = floats(&rest)?;
                match tag {
                    "prob" => a.probs = vals,
                    "frac" => a.frac = vals,
                    "anchor" => a.anchors = vals,
                    "final" => a.finals.extend(vals),
                    "proposal" => a.proposals.extend(vals),
                    _ => a.gt = vals,
                }
            }
            "end" => saw_end = true,
            other => return Err(perr(i, format!("unknown record {other:?}"))),
        }
    }
    if !saw_end {
        return Err(Error::Data("prediction file missing end record".into()));
    }
    Ok(ScenarioPrediction {
        scenario_id: scenario_id.ok_or_else(|| Error::Data("missing scenario record".into()))?,
        agents,
    })
}

pub fn save_prediction(path: &Path, p: &ScenarioPrediction) -> Result<()> {
    std::fs::write(path, prediction_to_string(p))?;
    Ok(())
}

pub fn load_prediction(path: &Path) -> Result<ScenarioPrediction> {
    prediction_from_string(&std::fs::read_to_string(path)?)
}

/// Score one scenario: joint metrics over all agents, marginal accuracy and
/// diversity metrics over the focal agents.
pub fn score_prediction(
    s: &Scenario,
    pred: &ScenarioPrediction,
    k: usize,
    mr_threshold: f64,
) -> Result<MetricReport> {
    let f = s.f;
    let mut report = MetricReport::default();
    let preds: Vec<&[f64]> = pred.agents.iter().map(|a| a.finals.as_slice()).collect();
    let gts: Vec<&[f64]> = pred.agents.iter().map(|a| a.gt.as_slice()).collect();
    let (jade, jfde) = joint_metrics(&preds, &gts, k, f);
    report.min_joint_ade.push(jade);
    report.min_joint_fde.push(jfde);

    let raster = DrivableRaster::build(s);
    for (a, track) in s.agents.iter().enumerate() {
        if !s.focal_ids.contains(&track.id) {
            continue;
        }
        let ap = &pred.agents[a];
        let acc = accuracy_metrics(&ap.finals, &ap.probs, &ap.gt, k, f, mr_threshold)?;
        report.min_ade.push(acc.min_ade);
        report.min_fde.push(acc.min_fde);
        report.mr.push(acc.mr);
        report.brier_min_fde.push(acc.brier_min_fde);
        let (rf, dao, dac, aae) = diversity_metrics(&ap.finals, &ap.gt, k, f, &raster);
        report.rf.push(rf);
        report.dao.push(dao);
        report.dac.push(dac);
        report.aae.push(aae);
    }
    Ok(report)
}

/// Evaluate a parameter snapshot over a scenario set. Parallel across
/// scenarios; the reduction order is fixed by scenario index. `mask_ratio`
/// > 0 drops history states deterministically per scenario before running.
pub fn evaluate(
    ps: &ParamStore,
    cfg: &RunConfig,
    scenarios: &[Scenario],
    mask_ratio: f64,
) -> Result<MetricReport> {
    if scenarios.is_empty() {
        return Err(Error::Data("no scenarios to evaluate".into()));
    }
    let mcfg = cfg.model_config()?;
    let parts: Vec<Result<MetricReport>> = scenarios
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut s = s.clone();
            if mask_ratio > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
                apply_mask(&mut s, mask_ratio, &mut rng);
            }
            let pred = predict(ps, &mcfg, &s)?;
            score_prediction(&s, &pred, mcfg.k, cfg.mr_threshold)
        })
        .collect();
    let mut report = MetricReport::default();
    for p in parts {
        report.merge(&p?);
    }
    Ok(report)
}

/// The validation metric used for checkpoint selection.
pub fn selection_metric(report: &MetricReport, task: Task) -> f64 {
    match task {
        Task::Joint => report.min_joint_fde.mean(),
        Task::Marginal => report.min_fde.mean(),
    }
}

/// One gradient step over a batch of scenarios. Forwards (and backwards)
/// run in parallel per scenario; gradients are summed in scenario order.
fn batch_grads(
    ps: &ParamStore,
    mcfg: &ModelConfig,
    task: Task,
    batch: &[&Scenario],
) -> Result<(Vec<DenseArray>, LossParts)> {
    let results: Vec<Result<(Vec<DenseArray>, LossParts)>> = batch
        .par_iter()
        .map(|s| {
            let mut t = Tape::new();
            let (idx, out) = forward(&mut t, ps, mcfg, s)?;
            let (total, parts) = compute_loss(&mut t, &idx, mcfg, s, &out, task)?;
            if let Some((node, label)) = t.first_non_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value in {label} (node {node}) on scenario {}",
                    s.id
                )));
            }
            let mut local = ps.clone();
            local.zero_grads();
            t.backward(total, &mut local)?;
            Ok((local.iter().map(|p| p.grad.clone()).collect(), parts))
        })
        .collect();
    let mut grads: Vec<DenseArray> = ps.iter().map(|p| DenseArray::zeros(p.value.shape())).collect();
    let mut parts = LossParts::default();
    let n = batch.len() as f64;
    for r in results {
        let (g, p) = r?;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
        parts.reg_pro += p.reg_pro / n;
        parts.reg_fin += p.reg_fin / n;
        parts.cls += p.cls / n;
        parts.total += p.total / n;
    }
    // Mean gradient over the batch.
    for g in &mut grads {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    Ok((grads, parts))
}

pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub parts: LossParts,
    pub val_metric: f64,
}

pub struct TrainOutcome {
    pub best_metric: f64,
    pub best_epoch: usize,
    pub logs: Vec<EpochLog>,
}

fn optimizer_extras(opt_m: &[DenseArray], opt_v: &[DenseArray], step: u64, epoch: usize) -> Vec<(String, DenseArray)> {
    let flat = |arrs: &[DenseArray]| {
        let data: Vec<f64> = arrs.iter().flat_map(|a| a.data().iter().copied()).collect();
        DenseArray::new(vec![data.len()], data).unwrap()
    };
    vec![
        ("opt.m".into(), flat(opt_m)),
        ("opt.v".into(), flat(opt_v)),
        ("opt.step".into(), DenseArray::scalar(step as f64)),
        ("epoch".into(), DenseArray::scalar(epoch as f64)),
    ]
}

/// Train per the config, writing `best/` and `last/` checkpoints, a loss log,
/// and the echoed config into `out_dir`. Resumes from `last/` if present.
/// `mask_ratio > 0` randomly hides that share of history steps in each
/// training scenario (fresh draw per epoch); validation stays unmasked.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = cfg.model_config()?;
    let task = cfg.task()?;
    let (train_set, val_set) = load_dataset(Path::new(&cfg.data_dir))?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("empty train or val split".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    cfg.save(&out_dir.join("config.toml"))?;

    let mut ps = init_params(&mcfg, cfg.seed)?;
    let mut opt = AdamW::new(&ps, cfg.weight_decay);
    let mut start_epoch = 0usize;
    let last_dir = out_dir.join("last");
    if last_dir.join("manifest.txt").exists() {
        let extras = checkpoint::load(&last_dir, &mut ps)?;
        opt.load_state(&ps, &extras)?;
        for (name, arr) in &extras {
            if name == "epoch" {
                start_epoch = arr.item() as usize;
            }
        }
    }

    let mut best_metric = f64::INFINITY;
    let mut best_epoch = 0usize;
    let best_dir = out_dir.join("best");
    if best_dir.join("metric.txt").exists() {
        let text = std::fs::read_to_string(best_dir.join("metric.txt"))?;
        let mut it = text.split_whitespace();
        best_metric = it.next().unwrap_or("inf").parse().unwrap_or(f64::INFINITY);
        best_epoch = it.next().unwrap_or("0").parse().unwrap_or(0);
    }

    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("loss.log"))?;
    use std::io::Write;

    let mut logs = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        let mut parts = LossParts::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // Train-time history-mask augmentation, deterministic per
            // (seed, epoch, scenario).
            let masked: Vec<Scenario> = if cfg.mask_ratio > 0.0 {
                chunk
                    .iter()
                    .map(|&i| {
                        let mut s = train_set[i].clone();
                        let salt = cfg
                            .seed
                            .wrapping_mul(131_071)
                            .wrapping_add(epoch as u64 * train_set.len() as u64 + i as u64);
                        apply_mask(&mut s, cfg.mask_ratio, &mut ChaCha8Rng::seed_from_u64(salt));
                        s
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let batch: Vec<&Scenario> = if cfg.mask_ratio > 0.0 {
                masked.iter().collect()
            } else {
                chunk.iter().map(|&i| &train_set[i]).collect()
            };
            let (mut grads, bp) = batch_grads(&ps, &mcfg, task, &batch)?;
            if cfg.clip_norm > 0.0 {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > cfg.clip_norm {
                    let scale = cfg.clip_norm / norm;
                    for g in &mut grads {
                        for v in g.data_mut() {
                            *v *= scale;
                        }
                    }
                }
            }
            for (i, g) in grads.into_iter().enumerate() {
                ps.get_mut(i).grad = g;
            }
            opt.step(&mut ps, lr);
            parts.reg_pro += bp.reg_pro;
            parts.reg_fin += bp.reg_fin;
            parts.cls += bp.cls;
            parts.total += bp.total;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        parts.reg_pro /= nb;
        parts.reg_fin /= nb;
        parts.cls /= nb;
        parts.total /= nb;

        let report = evaluate(&ps, cfg, &val_set, 0.0)?;
        let val_metric = selection_metric(&report, task);
        writeln!(
            log_file,
            "epoch {epoch} lr {lr:.8e} reg_pro {:.8e} reg_fin {:.8e} cls {:.8e} total {:.8e} val {val_metric:.8e}",
            parts.reg_pro, parts.reg_fin, parts.cls, parts.total
        )?;

        if val_metric < best_metric {
            best_metric = val_metric;
            best_epoch = epoch;
            checkpoint::save(&best_dir, &ps, &vec![("epoch".into(), DenseArray::scalar(epoch as f64))])?;
            std::fs::write(best_dir.join("metric.txt"), format!("{best_metric:.16e} {best_epoch}\n"))?;
        }
        let (m, v, step) = opt.state();
        checkpoint::save(&last_dir, &ps, &optimizer_extras(m, v, step, epoch + 1))?;
        logs.push(EpochLog {
            epoch,
            lr,
            parts,
            val_metric,
        });
    }
    Ok(TrainOutcome {
        best_metric,
        best_epoch,
        logs,
    })
}
