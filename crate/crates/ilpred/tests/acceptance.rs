//! Acceptance gate: every release criterion in one integration test,
//! printing one PASS/FAIL line per criterion and failing at the end if any
//! criterion failed.
//!
//! The training block (criteria 6-9) trains 12 models at full dataset scale
//! (2000 train / 400 val, 3 seeds); on a single CPU core this takes a few
//! minutes per run. `ILPRED_ACCEPTANCE_EPOCHS` overrides the per-run epoch
//! count (default 3) for faster local iteration.

use std::path::Path;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use ilpred::config::RunConfig;
use ilpred::metrics::{accuracy_metrics, diversity_metrics, joint_metrics, DrivableRaster};
use ilpred::model::{forward, init_params, DasMode, IlOrder, ModelConfig, SceneIndex};
use ilpred::numerics::{checkpoint, ParamStore, Tape};
use ilpred::objective::{compute_loss, wta_select, Targets, Task};
use ilpred::plot::render_svg;
use ilpred::runner::{evaluate, generate_dataset, load_dataset, predict, score_prediction, train};
use ilpred::scene::format::{scenario_from_string, scenario_to_string};
use ilpred::scene::{
    generate_scenario, AgentState, AgentTrack, Category, Connection, ConnectionKind, Kind,
    LaneGraph, LaneSegment, Polyline, PolylineKind, Scenario,
};

// ---------------------------------------------------------------------------
// Harness

#[derive(Default)]
struct Gate {
    failed: Vec<String>,
}

impl Gate {
    fn report(&mut self, num: u32, name: &str, pass: bool, detail: &str) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {num:2} [{name}]: {detail}");
        if !pass {
            self.failed.push(format!("criterion {num} ({name}): {detail}"));
        }
    }
}

fn desk_cfg() -> ModelConfig {
    RunConfig::default().model_config().unwrap()
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient fidelity against central finite differences.

/// Hand-built micro scene: `n` vehicles on a two-segment straight road,
/// H = 4 history and F = 5 future steps.
fn micro_scenario(n: usize) -> Scenario {
    let (h, f) = (4usize, 5usize);
    let agent = |id: u32, x0: f64, y: f64, speed: f64, turn: f64| AgentTrack {
        id,
        category: Category::Vehicle,
        length: 4.5,
        width: 1.8,
        states: (0..h + f)
            .map(|t| {
                let heading = turn * t as f64;
                AgentState {
                    x: x0 + speed * 0.1 * t as f64,
                    y: y + 0.05 * turn * (t * t) as f64,
                    heading,
                    speed,
                    vel_dir: heading,
                    observed: true,
                }
            })
            .collect(),
    };
    let all = [
        agent(0, 0.0, 0.0, 8.0, 0.0),
        agent(1, -8.0, 3.5, 6.0, 0.0),
        agent(2, 6.0, -3.5, 7.0, 0.04),
    ];
    let line = |y: f64, xa: f64, xb: f64| -> Vec<(f64, f64)> {
        (0..=6)
            .map(|i| (xa + (xb - xa) * i as f64 / 6.0, y))
            .collect()
    };
    let seg = |id: u32, xa: f64, xb: f64| LaneSegment {
        id,
        polylines: vec![
            Polyline { kind: PolylineKind::Centerline, points: line(0.0, xa, xb) },
            Polyline { kind: PolylineKind::LeftBoundary, points: line(1.75, xa, xb) },
            Polyline { kind: PolylineKind::RightBoundary, points: line(-1.75, xa, xb) },
        ],
    };
    let s = Scenario {
        id: "micro".into(),
        sample_rate_hz: 10.0,
        h,
        f,
        agents: all[..n].to_vec(),
        map: LaneGraph {
            segments: vec![seg(0, -20.0, 10.0), seg(1, 10.0, 40.0)],
            connections: vec![
                Connection { from: 0, to: 1, kind: ConnectionKind::Successor, hops: 1 },
                Connection { from: 1, to: 0, kind: ConnectionKind::Predecessor, hops: 1 },
            ],
        },
        focal_ids: vec![0],
    };
    s.validate().unwrap();
    s
}

fn micro_model_cfg(k: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        n_rec: 1,
        k,
        h: 4,
        f: 5,
        r_m: 50.0,
        r_f: 50.0,
        r_h: 50.0,
        das_mode: DasMode::Dynamic,
        il_order: IlOrder::Inverse,
        disable_fa: false,
        disable_ha: false,
    }
}

fn criterion_1(gate: &mut Gate) {
    let start = Instant::now();
    let s = micro_scenario(3);
    let mcfg = micro_model_cfg(2);
    let mut ps = init_params(&mcfg, 7).unwrap();

    let loss_of = |ps: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let (idx, out) = forward(&mut t, ps, &mcfg, &s).unwrap();
        let (total, _) = compute_loss(&mut t, &idx, &mcfg, &s, &out, Task::Joint).unwrap();
        t.value(total).item()
    };

    // Analytic gradients.
    {
        let mut t = Tape::new();
        let (idx, out) = forward(&mut t, &ps, &mcfg, &s).unwrap();
        let (total, _) = compute_loss(&mut t, &idx, &mcfg, &s, &out, Task::Joint).unwrap();
        let snapshot = ps.clone();
        let mut grad_store = snapshot;
        t.backward(total, &mut grad_store).unwrap();
        let eps = 1e-5;
        let mut max_rel = 0.0f64;
        let mut worst = String::new();
        let mut checked = 0usize;
        for pi in 0..ps.len() {
            let count = ps.get(pi).value.len();
            for ci in 0..count {
                let orig = ps.get(pi).value.data()[ci];
                ps.get_mut(pi).value.data_mut()[ci] = orig + eps;
                let up = loss_of(&ps);
                ps.get_mut(pi).value.data_mut()[ci] = orig - eps;
                let down = loss_of(&ps);
                ps.get_mut(pi).value.data_mut()[ci] = orig;
                let fd = (up - down) / (2.0 * eps);
                let ad = grad_store.get(pi).grad.data()[ci];
                let abs = (ad - fd).abs();
                // Near-zero gradients sit at the FD noise floor; absolute
                // agreement there is the meaningful check.
                let rel = if abs < 1e-8 { 0.0 } else { abs / ad.abs().max(fd.abs()) };
                if rel > max_rel {
                    max_rel = rel;
                    worst = format!("{}[{ci}] ad={ad:.3e} fd={fd:.3e}", ps.get(pi).name);
                }
                checked += 1;
            }
        }
        let secs = start.elapsed().as_secs_f64();
        let pass = max_rel < 1e-5 && secs < 120.0;
        gate.report(
            1,
            "gradient fidelity",
            pass,
            &format!(
                "{checked} parameter scalars, max rel err {max_rel:.3e} (worst {worst}), {secs:.1}s"
            ),
        );
    }
}

// ---------------------------------------------------------------------------
// Criterion 2: SE(2) invariance.

fn transform_scenario(s: &Scenario, th: f64, tx: f64, ty: f64) -> Scenario {
    let (c, sn) = (th.cos(), th.sin());
    let rot = |x: f64, y: f64| (c * x - sn * y + tx, sn * x + c * y + ty);
    let mut out = s.clone();
    for a in &mut out.agents {
        for st in &mut a.states {
            let (x, y) = rot(st.x, st.y);
            st.x = x;
            st.y = y;
            st.heading += th;
            st.vel_dir += th;
        }
    }
    for seg in &mut out.map.segments {
        for pl in &mut seg.polylines {
            for p in &mut pl.points {
                *p = rot(p.0, p.1);
            }
        }
    }
    out
}

fn criterion_2(gate: &mut Gate) {
    let mcfg = desk_cfg();
    let ps = init_params(&mcfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut max_traj = 0.0f64;
    let mut max_metric = 0.0f64;
    for i in 0..50u64 {
        let kind = Kind::ALL[i as usize % Kind::ALL.len()];
        let s = generate_scenario(kind, 1000 + i, mcfg.h, mcfg.f, 10.0);
        let th = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let (tx, ty) = (rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0));
        let s2 = transform_scenario(&s, th, tx, ty);

        let locals = |sc: &Scenario| {
            let mut t = Tape::new();
            let (_, out) = forward(&mut t, &ps, &mcfg, sc).unwrap();
            (
                t.value(out.p_pro).data().to_vec(),
                t.value(out.p_fin).data().to_vec(),
            )
        };
        let (pro_a, fin_a) = locals(&s);
        let (pro_b, fin_b) = locals(&s2);
        for (a, b) in pro_a.iter().zip(&pro_b).chain(fin_a.iter().zip(&fin_b)) {
            max_traj = max_traj.max((a - b).abs());
        }

        let metric6 = |sc: &Scenario| {
            let pred = predict(&ps, &mcfg, sc).unwrap();
            let r = score_prediction(sc, &pred, mcfg.k, 2.0).unwrap();
            [
                r.min_ade.mean(),
                r.min_fde.mean(),
                r.mr.mean(),
                r.brier_min_fde.mean(),
                r.min_joint_ade.mean(),
                r.min_joint_fde.mean(),
            ]
        };
        for (a, b) in metric6(&s).iter().zip(metric6(&s2).iter()) {
            max_metric = max_metric.max((a - b).abs());
        }
    }
    let pass = max_traj <= 1e-9 && max_metric <= 1e-9;
    gate.report(
        2,
        "SE(2) invariance",
        pass,
        &format!("50 scenarios, max local-frame drift {max_traj:.3e}, max accuracy-metric drift {max_metric:.3e}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: permutation equivariance.

fn criterion_3(gate: &mut Gate) {
    let mcfg = desk_cfg();
    let ps = init_params(&mcfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut max_diff = 0.0f64;
    for i in 0..20u64 {
        let kind = Kind::ALL[i as usize % Kind::ALL.len()];
        let s = generate_scenario(kind, 2000 + i, mcfg.h, mcfg.f, 10.0);
        let n = s.agents.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut s2 = s.clone();
        s2.agents = perm.iter().map(|&a| s.agents[a].clone()).collect();

        let run = |sc: &Scenario| {
            let mut t = Tape::new();
            let (_, out) = forward(&mut t, &ps, &mcfg, sc).unwrap();
            (
                t.value(out.p_pro).data().to_vec(),
                t.value(out.p_fin).data().to_vec(),
                t.value(out.logits).data().to_vec(),
                t.value(out.frac).data().to_vec(),
            )
        };
        let (pro_a, fin_a, log_a, fr_a) = run(&s);
        let (pro_b, fin_b, log_b, fr_b) = run(&s2);
        let (h, k, f) = (mcfg.h, mcfg.k, mcfg.f);
        for (a2, &a) in perm.iter().enumerate() {
            for ti in 0..h {
                for km in 0..k {
                    let ra = ((a * h + ti) * k + km) * f * 2;
                    let rb = ((a2 * h + ti) * k + km) * f * 2;
                    for j in 0..f * 2 {
                        max_diff = max_diff.max((pro_a[ra + j] - pro_b[rb + j]).abs());
                        max_diff = max_diff.max((fin_a[ra + j] - fin_b[rb + j]).abs());
                    }
                    let qa = (a * h + ti) * k + km;
                    let qb = (a2 * h + ti) * k + km;
                    max_diff = max_diff.max((fr_a[qa] - fr_b[qb]).abs());
                    max_diff = max_diff.max((log_a[qa] - log_b[qb]).abs());
                }
            }
        }
    }
    gate.report(
        3,
        "permutation equivariance",
        max_diff <= 1e-12,
        &format!("20 scenarios, max permuted-output difference {max_diff:.3e}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: WTA selection and all ten metrics against brute force.

fn criterion_4(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let rasters: Vec<(Scenario, DrivableRaster)> = Kind::ALL
        .iter()
        .map(|&kind| {
            let s = generate_scenario(kind, 5, 10, 15, 10.0);
            let r = DrivableRaster::build(&s);
            (s, r)
        })
        .collect();
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let mut max_err = 0.0f64;
    let mut index_mismatches = 0usize;

    for _ in 0..1000 {
        let k = rng.gen_range(1..=4usize);
        let f = rng.gen_range(2..=6usize);

        // Accuracy metrics vs naive loops.
        let preds: Vec<f64> = (0..k * f * 2).map(|_| rng.gen_range(-15.0..15.0)).collect();
        let gt: Vec<f64> = (0..f * 2).map(|_| rng.gen_range(-15.0..15.0)).collect();
        let mut probs: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        let acc = accuracy_metrics(&preds, &probs, &gt, k, f, 2.0).unwrap();
        let pt = |m: usize, s: usize| (preds[(m * f + s) * 2], preds[(m * f + s) * 2 + 1]);
        let gpt = |s: usize| (gt[2 * s], gt[2 * s + 1]);
        let mut n_ade = f64::INFINITY;
        let mut n_fde = f64::INFINITY;
        let mut n_best = 0usize;
        for m in 0..k {
            let mut a = 0.0;
            for s in 0..f {
                a += dist(pt(m, s), gpt(s));
            }
            n_ade = n_ade.min(a / f as f64);
            let e = dist(pt(m, f - 1), gpt(f - 1));
            if e < n_fde {
                n_fde = e;
                n_best = m;
            }
        }
        max_err = max_err.max((acc.min_ade - n_ade).abs());
        max_err = max_err.max((acc.min_fde - n_fde).abs());
        max_err = max_err.max((acc.mr - if n_fde > 2.0 { 1.0 } else { 0.0 }).abs());
        max_err = max_err.max((acc.brier_min_fde - (n_fde + (1.0 - probs[n_best]).powi(2))).abs());

        // Joint metrics vs per-mode enumeration over multiple agents.
        let n = rng.gen_range(1..=3usize);
        let agent_preds: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k * f * 2).map(|_| rng.gen_range(-15.0..15.0)).collect())
            .collect();
        let agent_gts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..f * 2).map(|_| rng.gen_range(-15.0..15.0)).collect())
            .collect();
        let pr: Vec<&[f64]> = agent_preds.iter().map(|v| v.as_slice()).collect();
        let gts: Vec<&[f64]> = agent_gts.iter().map(|v| v.as_slice()).collect();
        let (jade, jfde) = joint_metrics(&pr, &gts, k, f);
        let mut b_ade = f64::INFINITY;
        let mut b_fde = f64::INFINITY;
        for m in 0..k {
            let mut a = 0.0;
            let mut e = 0.0;
            for ai in 0..n {
                for s in 0..f {
                    let p = (agent_preds[ai][(m * f + s) * 2], agent_preds[ai][(m * f + s) * 2 + 1]);
                    let g = (agent_gts[ai][2 * s], agent_gts[ai][2 * s + 1]);
                    a += dist(p, g);
                }
                e += dist(
                    (agent_preds[ai][(m * f + f - 1) * 2], agent_preds[ai][(m * f + f - 1) * 2 + 1]),
                    (agent_gts[ai][2 * (f - 1)], agent_gts[ai][2 * (f - 1) + 1]),
                );
            }
            b_ade = b_ade.min(a / (n * f) as f64);
            b_fde = b_fde.min(e / n as f64);
        }
        max_err = max_err.max((jade - b_ade).abs());
        max_err = max_err.max((jfde - b_fde).abs());

        // Diversity metrics vs cell-by-cell recheck on a real raster.
        let (scn, raster) = &rasters[rng.gen_range(0..rasters.len())];
        let base = scn
            .agent_by_id(scn.focal_ids[0])
            .unwrap()
            .states[scn.h - 1]
            .position();
        let dpred: Vec<f64> = (0..k * f)
            .flat_map(|_| {
                [base.0 + rng.gen_range(-25.0..25.0), base.1 + rng.gen_range(-25.0..25.0)]
            })
            .collect();
        let dgt: Vec<f64> = (0..f * 2).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let (rf, dao, dac, aae) = diversity_metrics(&dpred, &dgt, k, f, raster);
        let dpt = |m: usize, s: usize| (dpred[(m * f + s) * 2], dpred[(m * f + s) * 2 + 1]);
        let dend = (dgt[2 * (f - 1)], dgt[2 * (f - 1) + 1]);
        let fdes: Vec<f64> = (0..k).map(|m| dist(dpt(m, f - 1), dend)).collect();
        let b_rf =
            fdes.iter().sum::<f64>() / k as f64 / fdes.iter().cloned().fold(f64::INFINITY, f64::min).max(1e-6);
        let mut cells = std::collections::BTreeSet::new();
        let mut on_modes = 0usize;
        for m in 0..k {
            let mut all_on = true;
            for s in 0..f {
                let (x, y) = dpt(m, s);
                if raster.drivable_at(x, y) {
                    cells.insert(raster.cell_of(x, y).unwrap());
                } else {
                    all_on = false;
                }
            }
            if all_on {
                on_modes += 1;
            }
        }
        let b_dao = if raster.drivable_cells() == 0 {
            0.0
        } else {
            cells.len() as f64 / raster.drivable_cells() as f64
        };
        let b_dac = on_modes as f64 / k as f64;
        let mut ang = 0.0;
        let mut pairs = 0usize;
        for i in 0..k {
            for j in i + 1..k {
                let u = (dpt(i, f - 1).0 - dpt(i, 0).0, dpt(i, f - 1).1 - dpt(i, 0).1);
                let v = (dpt(j, f - 1).0 - dpt(j, 0).0, dpt(j, f - 1).1 - dpt(j, 0).1);
                let (nu, nv) = ((u.0 * u.0 + u.1 * u.1).sqrt(), (v.0 * v.0 + v.1 * v.1).sqrt());
                if nu == 0.0 || nv == 0.0 {
                    continue;
                }
                ang += ((u.0 * v.0 + u.1 * v.1) / (nu * nv)).clamp(-1.0, 1.0).acos();
                pairs += 1;
            }
        }
        let b_aae = if pairs == 0 { 0.0 } else { ang / pairs as f64 };
        max_err = max_err.max((rf - b_rf).abs());
        max_err = max_err.max((dao - b_dao).abs());
        max_err = max_err.max((dac - b_dac).abs());
        max_err = max_err.max((aae - b_aae).abs());

        // WTA selection vs brute-force enumeration, both tasks.
        let wn = rng.gen_range(1..=3usize);
        let ws = micro_scenario(wn);
        let wcfg = micro_model_cfg(k);
        let widx = SceneIndex::build(&ws, &wcfg);
        let (wh, wf) = (widx.h, wcfg.f);
        let p_fin: Vec<f64> = (0..wn * wh * k * wf * 2).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let targets = Targets {
            pos: (0..wn * wh * wf * 2).map(|_| rng.gen_range(-10.0..10.0)).collect(),
            supervised: (0..wn * wh).map(|_| rng.gen_bool(0.8)).collect(),
        };
        let end_err = |a: usize, ti: usize, km: usize| {
            let row = ((a * wh + ti) * k + km) * wf * 2 + (wf - 1) * 2;
            let g = (a * wh + ti) * wf * 2 + (wf - 1) * 2;
            ((p_fin[row] - targets.pos[g]).powi(2) + (p_fin[row + 1] - targets.pos[g + 1]).powi(2))
                .sqrt()
        };
        for task in [Task::Marginal, Task::Joint] {
            let got = wta_select(&p_fin, &targets, &widx, &wcfg, task);
            let mut want = vec![0usize; wn * wh];
            match task {
                Task::Marginal => {
                    for a in 0..wn {
                        for ti in 0..wh {
                            if !targets.supervised[a * wh + ti] {
                                continue;
                            }
                            let best = (0..k)
                                .min_by(|&x, &y| {
                                    end_err(a, ti, x).partial_cmp(&end_err(a, ti, y)).unwrap()
                                })
                                .unwrap();
                            want[a * wh + ti] = best;
                        }
                    }
                }
                Task::Joint => {
                    for ti in 0..wh {
                        let sup: Vec<usize> =
                            (0..wn).filter(|&a| targets.supervised[a * wh + ti]).collect();
                        if sup.is_empty() {
                            continue;
                        }
                        let best = (0..k)
                            .min_by(|&x, &y| {
                                let ex: f64 = sup.iter().map(|&a| end_err(a, ti, x)).sum();
                                let ey: f64 = sup.iter().map(|&a| end_err(a, ti, y)).sum();
                                ex.partial_cmp(&ey).unwrap()
                            })
                            .unwrap();
                        for &a in &sup {
                            want[a * wh + ti] = best;
                        }
                    }
                }
            }
            if got != want {
                index_mismatches += 1;
            }
        }
    }
    let pass = max_err <= 1e-12 && index_mismatches == 0;
    gate.report(
        4,
        "metric + WTA oracles",
        pass,
        &format!("1000 instances, max metric error {max_err:.3e}, {index_mismatches} WTA index mismatches"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: dynamic-anchor structural contract.

fn criterion_5(gate: &mut Gate) {
    let mcfg = desk_cfg();
    let ps = init_params(&mcfg, 5).unwrap();
    let mut max_dev = 0.0f64;
    let mut frac_ok = true;
    for i in 0..20u64 {
        let kind = Kind::ALL[i as usize % Kind::ALL.len()];
        let s = generate_scenario(kind, 3000 + i, mcfg.h, mcfg.f, 10.0);
        let mut t = Tape::new();
        let (_, out) = forward(&mut t, &ps, &mcfg, &s).unwrap();
        let frac = t.value(out.frac).data();
        let anchors = t.value(out.anchors).data();
        let p_pro = t.value(out.p_pro).data();
        let f = mcfg.f;
        for (row, &fr) in frac.iter().enumerate() {
            if !(0.0..=(f - 1) as f64).contains(&fr) {
                frac_ok = false;
            }
            let lo = fr.floor().min((f - 2) as f64) as usize;
            let u = fr - lo as f64;
            let base = row * f * 2 + lo * 2;
            let ax = p_pro[base] + u * (p_pro[base + 2] - p_pro[base]);
            let ay = p_pro[base + 1] + u * (p_pro[base + 3] - p_pro[base + 1]);
            max_dev = max_dev.max((anchors[row * 2] - ax).abs());
            max_dev = max_dev.max((anchors[row * 2 + 1] - ay).abs());
        }
    }
    // Parameter overhead at reference scale.
    let mut big = ModelConfig {
        d: 128,
        heads: 8,
        n_rec: 2,
        k: 6,
        h: 10,
        f: 30,
        r_m: 50.0,
        r_f: 50.0,
        r_h: 50.0,
        das_mode: DasMode::Dynamic,
        il_order: IlOrder::Inverse,
        disable_fa: false,
        disable_ha: false,
    };
    let with_das = init_params(&big, 0).unwrap().num_scalars();
    big.das_mode = DasMode::Midpoint;
    let without = init_params(&big, 0).unwrap().num_scalars();
    let overhead = (with_das - without) as f64 / without as f64;
    let pass = frac_ok && max_dev <= 1e-12 && overhead < 0.001;
    gate.report(
        5,
        "dynamic anchor contract",
        pass,
        &format!(
            "frac in range: {frac_ok}, max anchor-polyline deviation {max_dev:.3e}, parameter overhead {:.4}%",
            overhead * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// Criteria 6-9: directional ablations (shared training runs).

struct RowStats {
    jfde: Vec<f64>,
    fde_clean: Vec<f64>,
    fde_masked: Vec<f64>,
    secs: Vec<f64>,
}

fn train_row(
    base: &RunConfig,
    tweak: impl Fn(&mut RunConfig),
    seeds: u64,
    out_root: &Path,
    name: &str,
    val: &[Scenario],
    mask_ratio: Option<f64>,
) -> RowStats {
    let mut stats = RowStats { jfde: vec![], fde_clean: vec![], fde_masked: vec![], secs: vec![] };
    for si in 0..seeds {
        let mut cfg = base.clone();
        tweak(&mut cfg);
        cfg.seed = si;
        let dir = out_root.join(format!("{name}-s{si}"));
        let start = Instant::now();
        train(&cfg, &dir).unwrap();
        stats.secs.push(start.elapsed().as_secs_f64());
        let mcfg = cfg.model_config().unwrap();
        let mut ps = init_params(&mcfg, cfg.seed).unwrap();
        checkpoint::load(&dir.join("best"), &mut ps).unwrap();
        let clean = evaluate(&ps, &cfg, val, 0.0).unwrap();
        stats.jfde.push(clean.min_joint_fde.mean());
        stats.fde_clean.push(clean.min_fde.mean());
        if let Some(ratio) = mask_ratio {
            let masked = evaluate(&ps, &cfg, val, ratio).unwrap();
            stats.fde_masked.push(masked.min_fde.mean());
        }
    }
    stats
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criteria_6_to_9(gate: &mut Gate) {
    let tmp = tempfile::tempdir().unwrap();
    let epochs: usize = std::env::var("ILPRED_ACCEPTANCE_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(4);
    let mut base = RunConfig::default();
    base.epochs = epochs;
    // Short-horizon training recipe: small batches give ~4x more optimizer
    // steps per epoch at the same per-scenario cost, and light history-mask
    // augmentation teaches every row to cope with missing observations.
    base.batch_size = 2;
    base.lr = 1e-3;
    base.mask_ratio = 0.15;
    base.data_dir = tmp.path().join("data").to_string_lossy().into_owned();
    generate_dataset(&base, Path::new(&base.data_dir)).unwrap();
    let (_, val) = load_dataset(Path::new(&base.data_dir)).unwrap();
    let seeds = 3;
    let root = tmp.path().join("runs");

    let full = train_row(&base, |_| {}, seeds, &root, "full", &val, Some(0.3));
    let ta_only = train_row(
        &base,
        |c| {
            c.disable_fa = true;
            c.disable_ha = true;
            c.das_mode = "midpoint".into();
        },
        seeds,
        &root,
        "ta-only",
        &val,
        Some(0.3),
    );
    let fwd = train_row(
        &base,
        |c| {
            c.il_order = "forward".into();
            c.das_mode = "midpoint".into();
        },
        seeds,
        &root,
        "forward",
        &val,
        None,
    );
    let inv_mid = train_row(
        &base,
        |c| c.das_mode = "midpoint".into(),
        seeds,
        &root,
        "inverse-mid",
        &val,
        None,
    );

    let max_secs = full
        .secs
        .iter()
        .chain(&ta_only.secs)
        .chain(&fwd.secs)
        .chain(&inv_mid.secs)
        .cloned()
        .fold(0.0, f64::max);
    let (m_full, m_ta) = (mean(&full.jfde), mean(&ta_only.jfde));
    gate.report(
        6,
        "IL attention direction",
        m_full < m_ta && max_secs <= 900.0,
        &format!(
            "minJointFDE full {m_full:.4} vs TA-only {m_ta:.4} over {seeds} seeds, {epochs} epochs, slowest run {max_secs:.0}s"
        ),
    );

    let (m_inv, m_fwd) = (mean(&inv_mid.jfde), mean(&fwd.jfde));
    gate.report(
        7,
        "inverse vs forward order",
        m_inv <= m_fwd * 1.005,
        &format!("minJointFDE inverse {m_inv:.4} vs forward {m_fwd:.4} (0.5% slack)"),
    );

    gate.report(
        8,
        "dynamic vs midpoint anchors",
        m_full <= mean(&inv_mid.jfde),
        &format!("minJointFDE dynamic {m_full:.4} vs midpoint {:.4}", mean(&inv_mid.jfde)),
    );

    let degr = |r: &RowStats| {
        let per_seed: Vec<f64> = r
            .fde_masked
            .iter()
            .zip(&r.fde_clean)
            .map(|(m, c)| (m - c) / c)
            .collect();
        mean(&per_seed)
    };
    let (d_full, d_ta) = (degr(&full), degr(&ta_only));
    // Robustness is about how gracefully accuracy decays when observations go
    // missing, so the gate compares the seed-averaged relative degradation of
    // minFDE under 30% masking; absolute masked values are printed for
    // context.
    let (mf_full, mf_ta) = (mean(&full.fde_masked), mean(&ta_only.fde_masked));
    gate.report(
        9,
        "mask robustness at 30%",
        d_full <= d_ta,
        &format!(
            "relative minFDE degradation with FA+HA {d_full:.4} vs without {d_ta:.4} \
             (masked minFDE {mf_full:.4} vs {mf_ta:.4})"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: determinism and persistence.

fn criterion_10(gate: &mut Gate) {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.d = 16;
    cfg.heads = 2;
    cfg.n_rec = 1;
    cfg.k = 2;
    cfg.h = 6;
    cfg.f = 8;
    cfg.train_scenarios = 8;
    cfg.val_scenarios = 4;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.data_dir = tmp.path().join("data").to_string_lossy().into_owned();
    generate_dataset(&cfg, Path::new(&cfg.data_dir)).unwrap();

    let out_a = train(&cfg, &tmp.path().join("a")).unwrap();
    let _out_b = train(&cfg, &tmp.path().join("b")).unwrap();
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    let identical = ["best/values.bin", "best/manifest.txt", "last/values.bin", "loss.log"]
        .iter()
        .all(|f| bytes(&tmp.path().join("a").join(f)) == bytes(&tmp.path().join("b").join(f)));

    // Reload the best checkpoint and reproduce the selection metric bit-for-bit.
    let mcfg = cfg.model_config().unwrap();
    let mut ps = init_params(&mcfg, cfg.seed).unwrap();
    checkpoint::load(&tmp.path().join("a/best"), &mut ps).unwrap();
    let (_, val) = load_dataset(Path::new(&cfg.data_dir)).unwrap();
    let report = evaluate(&ps, &cfg, &val, 0.0).unwrap();
    let reproduced = report.min_joint_fde.mean().to_bits() == out_a.best_metric.to_bits();

    // Scenario text round trip.
    let mut round_trip = true;
    for (i, &kind) in Kind::ALL.iter().enumerate() {
        let s = generate_scenario(kind, 77 + i as u64, 10, 15, 10.0);
        let text = scenario_to_string(&s);
        let back = scenario_from_string(&text).unwrap();
        round_trip &= scenario_to_string(&back) == text && back == s;
    }

    let pass = identical && reproduced && round_trip;
    gate.report(
        10,
        "determinism + persistence",
        pass,
        &format!(
            "checkpoints byte-identical: {identical}, metric reproduced bit-exactly: {reproduced}, scenario round trip: {round_trip}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: SVG plot emission.

fn criterion_11(gate: &mut Gate) {
    let mcfg = desk_cfg();
    let ps = init_params(&mcfg, 11).unwrap();
    let s = generate_scenario(Kind::Intersection, 8, mcfg.h, mcfg.f, 10.0);
    let pred = predict(&ps, &mcfg, &s).unwrap();
    let svg = render_svg(&s, &pred).unwrap();
    let parsed = roxmltree::Document::parse(&svg);
    let well_formed = parsed.is_ok();
    let mut polylines_ok = false;
    let mut anchors_ok = false;
    if let Ok(doc) = &parsed {
        let count = |class: &str| {
            doc.descendants()
                .filter(|n| n.attribute("class") == Some(class))
                .count()
        };
        let focal = s.focal_ids.len();
        polylines_ok = count("prediction") == focal * mcfg.k;
        let want: Vec<(f64, f64)> = pred
            .agents
            .iter()
            .filter(|a| s.focal_ids.contains(&a.agent_id))
            .flat_map(|a| a.anchors.chunks_exact(2).map(|p| (p[0], p[1])))
            .collect();
        let got: Vec<(f64, f64)> = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("anchor"))
            .map(|n| {
                (
                    n.attribute("data-x").unwrap().parse().unwrap(),
                    n.attribute("data-y").unwrap().parse().unwrap(),
                )
            })
            .collect();
        anchors_ok = want == got;
    }
    let pass = well_formed && polylines_ok && anchors_ok;
    gate.report(
        11,
        "SVG plot emission",
        pass,
        &format!(
            "well-formed: {well_formed}, K polylines per focal: {polylines_ok}, anchor coordinates match: {anchors_ok}"
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let mut gate = Gate::default();
    criterion_1(&mut gate);
    criterion_2(&mut gate);
    criterion_3(&mut gate);
    criterion_4(&mut gate);
    criterion_5(&mut gate);
    criterion_10(&mut gate);
    criterion_11(&mut gate);
    if std::env::var("ILPRED_SKIP_TRAINING_CRITERIA").is_err() {
        criteria_6_to_9(&mut gate);
    }
    assert!(
        gate.failed.is_empty(),
        "failed acceptance criteria:\n{}",
        gate.failed.join("\n")
    );
}
