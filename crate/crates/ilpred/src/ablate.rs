//! Ablation sweep: attention-component rows, anchor-selection rows, and
//! history-mask robustness rows, each trained over several seeds.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::Result;
use crate::model::init_params;
use crate::numerics::checkpoint;
use crate::runner::{evaluate, load_dataset, train};

/// One configuration delta in the sweep.
pub struct AblationRow {
    pub name: &'static str,
    pub apply: fn(&mut RunConfig),
}

/// The attention/anchor grid: every IL row uses midpoint anchors so the
/// final row isolates the dynamic-anchor gain.
pub fn grid() -> Vec<AblationRow> {
    vec![
        AblationRow {
            name: "ta_only",
            apply: |c| {
                c.disable_fa = true;
                c.disable_ha = true;
                c.das_mode = "midpoint".into();
            },
        },
        AblationRow {
            name: "ta_fa",
            apply: |c| {
                c.disable_ha = true;
                c.das_mode = "midpoint".into();
            },
        },
        AblationRow {
            name: "ta_ha",
            apply: |c| {
                c.disable_fa = true;
                c.das_mode = "midpoint".into();
            },
        },
        AblationRow {
            name: "il_forward",
            apply: |c| {
                c.il_order = "forward".into();
                c.das_mode = "midpoint".into();
            },
        },
        AblationRow {
            name: "il_inverse",
            apply: |c| c.das_mode = "midpoint".into(),
        },
        AblationRow {
            name: "il_inverse_das",
            apply: |c| c.das_mode = "dynamic".into(),
        },
    ]
}

#[derive(Debug, Clone)]
pub struct RowResult {
    pub name: String,
    /// Per-seed (minJointADE, minJointFDE, minFDE) on the clean val split.
    pub per_seed: Vec<(f64, f64, f64)>,
    pub error: Option<String>,
}

impl RowResult {
    fn stat(vals: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
        let n = vals.clone().count() as f64;
        let mean = vals.clone().sum::<f64>() / n;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    pub fn joint_ade(&self) -> (f64, f64) {
        Self::stat(self.per_seed.iter().map(|v| v.0))
    }

    pub fn joint_fde(&self) -> (f64, f64) {
        Self::stat(self.per_seed.iter().map(|v| v.1))
    }

    pub fn min_fde(&self) -> (f64, f64) {
        Self::stat(self.per_seed.iter().map(|v| v.2))
    }
}

#[derive(Debug, Clone)]
pub struct MaskResult {
    pub ratio: f64,
    /// Seed-mean masked minFDE for the full (FA+HA) row and the TA-only row.
    pub with_faha: f64,
    pub without_faha: f64,
}

pub struct AblationReport {
    pub rows: Vec<RowResult>,
    pub masks: Vec<MaskResult>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut out = String::from(
            "row              minJointADE          minJointFDE          minFDE\n",
        );
        for r in &self.rows {
            if let Some(e) = &r.error {
                out.push_str(&format!("{:<16} FAILED: {e}\n", r.name));
                continue;
            }
            let (am, asp) = r.joint_ade();
            let (fm, fsp) = r.joint_fde();
            let (mm, msp) = r.min_fde();
            out.push_str(&format!(
                "{:<16} {am:.4} +- {asp:.4}     {fm:.4} +- {fsp:.4}     {mm:.4} +- {msp:.4}\n",
                r.name
            ));
        }
        for m in &self.masks {
            out.push_str(&format!(
                "mask {:>4.0}%       minFDE with FA+HA {:.4}   without {:.4}\n",
                m.ratio * 100.0,
                m.with_faha,
                m.without_faha
            ));
        }
        out
    }
}

/// Train every grid row over `n_seeds` seeds, evaluate on the clean val
/// split, then re-evaluate the full and TA-only rows under each mask ratio.
/// Row failures are recorded and the sweep continues.
pub fn run_ablation(
    base: &RunConfig,
    out_dir: &Path,
    n_seeds: usize,
    mask_ratios: &[f64],
) -> Result<AblationReport> {
    std::fs::create_dir_all(out_dir)?;
    base.save(&out_dir.join("config.toml"))?;
    let (_, val) = load_dataset(Path::new(&base.data_dir))?;

    // Masked re-evaluation of a trained row checkpoint.
    let masked_fde = |cfg: &RunConfig, run_dir: &Path, ratio: f64| -> Result<f64> {
        let mcfg = cfg.model_config()?;
        let mut ps = init_params(&mcfg, cfg.seed)?;
        checkpoint::load(&run_dir.join("best"), &mut ps)?;
        let report = evaluate(&ps, cfg, &val, ratio)?;
        Ok(report.min_fde.mean())
    };

    let mut rows = Vec::new();
    let mut mask_accum: Vec<Vec<(f64, f64)>> = vec![Vec::new(); mask_ratios.len()];
    for row in grid() {
        let mut per_seed = Vec::new();
        let mut error = None;
        for si in 0..n_seeds {
            let mut cfg = base.clone();
            (row.apply)(&mut cfg);
            cfg.seed = base.seed + si as u64;
            let run_dir = out_dir.join(format!("{}-seed{si}", row.name));
            let attempt = (|| -> Result<(f64, f64, f64)> {
                train(&cfg, &run_dir)?;
                let mcfg = cfg.model_config()?;
                let mut ps = init_params(&mcfg, cfg.seed)?;
                checkpoint::load(&run_dir.join("best"), &mut ps)?;
                let report = evaluate(&ps, &cfg, &val, 0.0)?;
                for (ri, &ratio) in mask_ratios.iter().enumerate() {
                    if row.name == "il_inverse_das" {
                        let fde = masked_fde(&cfg, &run_dir, ratio)?;
                        mask_accum[ri].push((fde, f64::NAN));
                    } else if row.name == "ta_only" {
                        let fde = masked_fde(&cfg, &run_dir, ratio)?;
                        mask_accum[ri].push((f64::NAN, fde));
                    }
                }
                Ok((
                    report.min_joint_ade.mean(),
                    report.min_joint_fde.mean(),
                    report.min_fde.mean(),
                ))
            })();
            match attempt {
                Ok(v) => per_seed.push(v),
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        rows.push(RowResult {
            name: row.name.to_string(),
            per_seed,
            error,
        });
    }

    let masks = mask_ratios
        .iter()
        .enumerate()
        .map(|(ri, &ratio)| {
            let mean = |pick: fn(&(f64, f64)) -> f64| {
                let vals: Vec<f64> = mask_accum[ri].iter().map(pick).filter(|v| v.is_finite()).collect();
                vals.iter().sum::<f64>() / vals.len().max(1) as f64
            };
            MaskResult {
                ratio,
                with_faha: mean(|v| v.0),
                without_faha: mean(|v| v.1),
            }
        })
        .collect();

    let report = AblationReport { rows, masks };
    std::fs::write(out_dir.join("table.txt"), report.to_table())?;
    Ok(report)
}
