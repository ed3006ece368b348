//! Evaluation metrics: accuracy (minADE, minFDE, miss rate, Brier-minFDE,
//! joint variants) and diversity (RF, DAO, DAC, AAE) plus the drivable-area
//! raster they need.

use crate::error::{Error, Result};
use crate::scene::Scenario;

pub const DEFAULT_MR_THRESHOLD: f64 = 2.0;
pub const RASTER_CELL: f64 = 0.5;
pub const LANE_HALF_WIDTH: f64 = 1.75;
pub const RASTER_MARGIN: f64 = 10.0;

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Per-agent accuracy metrics for one prediction instance.
#[derive(Debug, Clone, Copy)]
pub struct AccuracyPart {
    pub min_ade: f64,
    pub min_fde: f64,
    pub mr: f64,
    pub brier_min_fde: f64,
}

/// `preds` is [K, F, 2] flattened, `probs` [K], `gt` [F, 2] flattened.
pub fn accuracy_metrics(
    preds: &[f64],
    probs: &[f64],
    gt: &[f64],
    k: usize,
    f: usize,
    mr_threshold: f64,
) -> Result<AccuracyPart> {
    let psum: f64 = probs.iter().sum();
    if (psum - 1.0).abs() > 1e-6 {
        return Err(Error::Data(format!("mode probabilities sum to {psum}")));
    }
    let gt_pt = |s: usize| (gt[2 * s], gt[2 * s + 1]);
    let pr_pt = |m: usize, s: usize| (preds[(m * f + s) * 2], preds[(m * f + s) * 2 + 1]);
    let mut min_ade = f64::INFINITY;
    let mut best = (f64::INFINITY, 0usize);
    for m in 0..k {
        let ade: f64 = (0..f).map(|s| dist(pr_pt(m, s), gt_pt(s))).sum::<f64>() / f as f64;
        min_ade = min_ade.min(ade);
        let fde = dist(pr_pt(m, f - 1), gt_pt(f - 1));
        if fde < best.0 {
            best = (fde, m);
        }
    }
    let min_fde = best.0;
    Ok(AccuracyPart {
        min_ade,
        min_fde,
        mr: if min_fde > mr_threshold { 1.0 } else { 0.0 },
        brier_min_fde: min_fde + (1.0 - probs[best.1]).powi(2),
    })
}

/// Joint accuracy: one mode index shared by all agents; errors averaged
/// across agents before minimizing. `preds[a]` is [K, F, 2], `gts[a]` [F, 2].
pub fn joint_metrics(preds: &[&[f64]], gts: &[&[f64]], k: usize, f: usize) -> (f64, f64) {
    let n = preds.len();
    let mut best_ade = f64::INFINITY;
    let mut best_fde = f64::INFINITY;
    for m in 0..k {
        let mut ade = 0.0;
        let mut fde = 0.0;
        for a in 0..n {
            for s in 0..f {
                let p = (preds[a][(m * f + s) * 2], preds[a][(m * f + s) * 2 + 1]);
                let g = (gts[a][2 * s], gts[a][2 * s + 1]);
                let d = dist(p, g);
                ade += d / (n * f) as f64;
                if s == f - 1 {
                    fde += d / n as f64;
                }
            }
        }
        best_ade = best_ade.min(ade);
        best_fde = best_fde.min(fde);
    }
    (best_ade, best_fde)
}

/// Boolean drivable-area occupancy grid over the scenario extent.
pub struct DrivableRaster {
    pub x0: f64,
    pub y0: f64,
    pub cell: f64,
    pub w: usize,
    pub h: usize,
    grid: Vec<bool>,
}

impl DrivableRaster {
    /// Rasterize lane interiors: cells within the lane half-width of any
    /// centerline are drivable. The crop covers all map points and agent
    /// states plus a margin.
    pub fn build(s: &Scenario) -> Self {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for seg in &s.map.segments {
            for pl in &seg.polylines {
                for &(x, y) in &pl.points {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        for a in &s.agents {
            for st in &a.states {
                xs.push(st.x);
                ys.push(st.y);
            }
        }
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (x0, x1) = (min(&xs) - RASTER_MARGIN, max(&xs) + RASTER_MARGIN);
        let (y0, y1) = (min(&ys) - RASTER_MARGIN, max(&ys) + RASTER_MARGIN);
        let cell = RASTER_CELL;
        let w = ((x1 - x0) / cell).ceil() as usize + 1;
        let h = ((y1 - y0) / cell).ceil() as usize + 1;
        let mut r = Self {
            x0,
            y0,
            cell,
            w,
            h,
            grid: vec![false; w * h],
        };
        for seg in &s.map.segments {
            let pts = &seg.centerline().points;
            for win in pts.windows(2) {
                let d = dist(win[0], win[1]);
                let steps = (d / (cell * 0.5)).ceil().max(1.0) as usize;
                for i in 0..=steps {
                    let u = i as f64 / steps as f64;
                    let x = win[0].0 + u * (win[1].0 - win[0].0);
                    let y = win[0].1 + u * (win[1].1 - win[0].1);
                    r.mark_disk(x, y, LANE_HALF_WIDTH);
                }
            }
            if let Some(&(x, y)) = pts.last() {
                r.mark_disk(x, y, LANE_HALF_WIDTH);
            }
        }
        r
    }

    fn mark_disk(&mut self, x: f64, y: f64, radius: f64) {
        let ci0 = (((x - radius) - self.x0) / self.cell).floor().max(0.0) as usize;
        let ci1 = ((((x + radius) - self.x0) / self.cell).floor() as usize).min(self.w - 1);
        let cj0 = (((y - radius) - self.y0) / self.cell).floor().max(0.0) as usize;
        let cj1 = ((((y + radius) - self.y0) / self.cell).floor() as usize).min(self.h - 1);
        for i in ci0..=ci1 {
            for j in cj0..=cj1 {
                // Cell-center distance decides membership.
                let cx = self.x0 + (i as f64 + 0.5) * self.cell;
                let cy = self.y0 + (j as f64 + 0.5) * self.cell;
                if dist((cx, cy), (x, y)) <= radius {
                    self.grid[j * self.w + i] = true;
                }
            }
        }
    }

    /// Cell index of a point, if inside the crop.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let i = ((x - self.x0) / self.cell).floor();
        let j = ((y - self.y0) / self.cell).floor();
        if i < 0.0 || j < 0.0 {
            return None;
        }
        let (i, j) = (i as usize, j as usize);
        if i >= self.w || j >= self.h {
            return None;
        }
        Some(j * self.w + i)
    }

    pub fn drivable_at(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).map(|c| self.grid[c]).unwrap_or(false)
    }

    pub fn drivable_cells(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn is_drivable_cell(&self, c: usize) -> bool {
        self.grid[c]
    }
}

/// Diversity metrics for one agent instance: RF, DAO, DAC, AAE.
/// `preds` [K, F, 2] in global coordinates, `gt` [F, 2].
pub fn diversity_metrics(
    preds: &[f64],
    gt: &[f64],
    k: usize,
    f: usize,
    raster: &DrivableRaster,
) -> (f64, f64, f64, f64) {
    let pr_pt = |m: usize, s: usize| (preds[(m * f + s) * 2], preds[(m * f + s) * 2 + 1]);
    let gt_end = (gt[2 * (f - 1)], gt[2 * (f - 1) + 1]);

    let fdes: Vec<f64> = (0..k).map(|m| dist(pr_pt(m, f - 1), gt_end)).collect();
    let avg_fde = fdes.iter().sum::<f64>() / k as f64;
    let min_fde = fdes.iter().cloned().fold(f64::INFINITY, f64::min);
    let rf = avg_fde / min_fde.max(1e-6);

    let mut touched = std::collections::BTreeSet::new();
    let mut compliant = 0usize;
    for m in 0..k {
        let mut all_on = true;
        for s in 0..f {
            let (x, y) = pr_pt(m, s);
            match raster.cell_of(x, y) {
                Some(c) if raster.is_drivable_cell(c) => {
                    touched.insert(c);
                }
                _ => all_on = false,
            }
        }
        if all_on {
            compliant += 1;
        }
    }
    let denom = raster.drivable_cells();
    let dao = if denom == 0 {
        0.0
    } else {
        touched.len() as f64 / denom as f64
    };
    let dac = compliant as f64 / k as f64;

    // Mean pinch angle over mode pairs of start-to-end displacement vectors.
    let vecs: Vec<(f64, f64)> = (0..k)
        .map(|m| {
            let (sx, sy) = pr_pt(m, 0);
            let (ex, ey) = pr_pt(m, f - 1);
            (ex - sx, ey - sy)
        })
        .collect();
    let mut angle_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            let (u, v) = (vecs[i], vecs[j]);
            let (nu, nv) = ((u.0 * u.0 + u.1 * u.1).sqrt(), (v.0 * v.0 + v.1 * v.1).sqrt());
            if nu == 0.0 || nv == 0.0 {
                continue;
            }
            let c = ((u.0 * v.0 + u.1 * v.1) / (nu * nv)).clamp(-1.0, 1.0);
            angle_sum += c.acos();
            pairs += 1;
        }
    }
    let aae = if pairs == 0 { 0.0 } else { angle_sum / pairs as f64 };
    (rf, dao, dac, aae)
}

/// Running (sum, count) aggregate for one metric.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Agg {
    pub sum: f64,
    pub count: usize,
}

impl Agg {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn merge(&mut self, o: &Agg) {
        self.sum += o.sum;
        self.count += o.count;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Aggregated metric report over an evaluation run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub min_ade: Agg,
    pub min_fde: Agg,
    pub mr: Agg,
    pub brier_min_fde: Agg,
    pub min_joint_ade: Agg,
    pub min_joint_fde: Agg,
    pub rf: Agg,
    pub dao: Agg,
    pub dac: Agg,
    pub aae: Agg,
}

impl MetricReport {
    pub fn merge(&mut self, o: &MetricReport) {
        for (a, b) in self.fields_mut().into_iter().zip(o.fields()) {
            a.1.merge(b.1);
        }
    }

    pub fn fields(&self) -> Vec<(&'static str, &Agg)> {
        vec![
            ("min_ade", &self.min_ade),
            ("min_fde", &self.min_fde),
            ("mr", &self.mr),
            ("brier_min_fde", &self.brier_min_fde),
            ("min_joint_ade", &self.min_joint_ade),
            ("min_joint_fde", &self.min_joint_fde),
            ("rf", &self.rf),
            ("dao", &self.dao),
            ("dac", &self.dac),
            ("aae", &self.aae),
        ]
    }

    fn fields_mut(&mut self) -> Vec<(&'static str, &mut Agg)> {
        vec![
            ("min_ade", &mut self.min_ade),
            ("min_fde", &mut self.min_fde),
            ("mr", &mut self.mr),
            ("brier_min_fde", &mut self.brier_min_fde),
            ("min_joint_ade", &mut self.min_joint_ade),
            ("min_joint_fde", &mut self.min_joint_fde),
            ("rf", &mut self.rf),
            ("dao", &mut self.dao),
            ("dac", &mut self.dac),
            ("aae", &mut self.aae),
        ]
    }

    /// Machine-readable form: one `<name> <mean> <count>` line per metric.
    pub fn to_text(&self) -> String {
        let mut out = String::from("ilpred-metrics v1\n");
        for (name, agg) in self.fields() {
            out.push_str(&format!("{name} {:.16e} {}\n", agg.mean(), agg.count));
        }
        out
    }

    /// Human-readable summary.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, agg) in self.fields() {
            out.push_str(&format!("{name:>14}  {:>12.6}  (n={})\n", agg.mean(), agg.count));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scenario, Kind};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_mode_scores_zero() {
        let f = 5;
        let gt: Vec<f64> = (0..f).flat_map(|s| [s as f64, 0.0]).collect();
        let mut preds = gt.clone();
        preds.extend((0..f).flat_map(|s| [s as f64, 3.0]));
        let acc = accuracy_metrics(&preds, &[1.0, 0.0], &gt, 2, f, 2.0).unwrap();
        assert_eq!(acc.min_ade, 0.0);
        assert_eq!(acc.min_fde, 0.0);
        assert_eq!(acc.mr, 0.0);
        assert_eq!(acc.brier_min_fde, 0.0);
    }

    #[test]
    fn lateral_offset_modes_are_analytic() {
        // Six straight modes offset laterally by 0..5 m from a straight gt.
        let f = 4;
        let gt: Vec<f64> = (0..f).flat_map(|s| [s as f64, 0.0]).collect();
        let preds: Vec<f64> = (0..6)
            .flat_map(|m| (0..f).flat_map(move |s| [s as f64, m as f64]))
            .collect();
        let probs = [1.0 / 6.0; 6];
        let acc = accuracy_metrics(&preds, &probs, &gt, 6, f, 2.0).unwrap();
        assert_eq!(acc.min_ade, 0.0);
        assert_eq!(acc.min_fde, 0.0);
        assert!((acc.brier_min_fde - (1.0 - 1.0 / 6.0_f64).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn probability_sum_violation_is_an_error() {
        let gt = [0.0, 0.0, 1.0, 0.0];
        let preds = gt;
        assert!(accuracy_metrics(&preds, &[0.7], &gt, 1, 2, 2.0).is_err());
    }

    #[test]
    fn brier_stays_within_unit_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (k, f) = (4, 6);
            let preds: Vec<f64> = (0..k * f * 2).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let gt: Vec<f64> = (0..f * 2).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let mut probs: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= s);
            let acc = accuracy_metrics(&preds, &probs, &gt, k, f, 2.0).unwrap();
            assert!(acc.min_fde <= acc.brier_min_fde);
            assert!(acc.brier_min_fde <= acc.min_fde + 1.0 + 1e-12);
        }
    }

    #[test]
    fn identical_modes_give_rf_one_and_aae_zero() {
        let s = generate_scenario(Kind::Follow, 0, 10, 15, 10.0);
        let raster = DrivableRaster::build(&s);
        let f = 5;
        let one: Vec<f64> = (0..f).flat_map(|i| [i as f64, 0.0]).collect();
        let gt: Vec<f64> = (0..f).flat_map(|i| [i as f64, 2.0]).collect();
        let preds: Vec<f64> = (0..3).flat_map(|_| one.clone()).collect();
        let (rf, _, _, aae) = diversity_metrics(&preds, &gt, 3, f, &raster);
        assert!((rf - 1.0).abs() < 1e-12);
        assert_eq!(aae, 0.0);
    }

    #[test]
    fn perpendicular_modes_give_right_angle() {
        let s = generate_scenario(Kind::Follow, 0, 10, 15, 10.0);
        let raster = DrivableRaster::build(&s);
        let f = 2;
        let a = [0.0, 0.0, 3.0, 0.0];
        let b = [0.0, 0.0, 0.0, 3.0];
        let preds: Vec<f64> = a.iter().chain(b.iter()).cloned().collect();
        let (_, _, _, aae) = diversity_metrics(&preds, &a, 2, f, &raster);
        assert!((aae - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn degenerate_vectors_skip_their_pairs() {
        let s = generate_scenario(Kind::Follow, 0, 10, 15, 10.0);
        let raster = DrivableRaster::build(&s);
        let f = 2;
        let stay = [1.0, 1.0, 1.0, 1.0];
        let a = [0.0, 0.0, 3.0, 0.0];
        let b = [0.0, 0.0, 0.0, 3.0];
        let preds: Vec<f64> = stay.iter().chain(a.iter()).chain(b.iter()).cloned().collect();
        let (_, _, _, aae) = diversity_metrics(&preds, &a, 3, f, &raster);
        // Only the (a, b) pair counts.
        assert!((aae - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn centerline_points_are_drivable() {
        for kind in Kind::ALL {
            let s = generate_scenario(kind, 2, 10, 15, 10.0);
            let raster = DrivableRaster::build(&s);
            for seg in &s.map.segments {
                for &(x, y) in &seg.centerline().points {
                    assert!(raster.drivable_at(x, y), "{} ({x}, {y})", kind.as_str());
                }
            }
        }
    }

    #[test]
    fn dao_dac_match_exhaustive_recheck() {
        let s = generate_scenario(Kind::Intersection, 4, 10, 15, 10.0);
        let raster = DrivableRaster::build(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let focal = s.agent_by_id(s.focal_ids[0]).unwrap();
        let base = focal.states[s.h - 1].position();
        let (k, f) = (4, 6);
        let preds: Vec<f64> = (0..k * f)
            .flat_map(|_| {
                [
                    base.0 + rng.gen_range(-20.0..20.0),
                    base.1 + rng.gen_range(-20.0..20.0),
                ]
            })
            .collect();
        let gt: Vec<f64> = (0..f * 2).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let (_, dao, dac, _) = diversity_metrics(&preds, &gt, k, f, &raster);

        let mut cells = std::collections::BTreeSet::new();
        let mut ok_modes = 0;
        for m in 0..k {
            let mut all_on = true;
            for st in 0..f {
                let (x, y) = (preds[(m * f + st) * 2], preds[(m * f + st) * 2 + 1]);
                if raster.drivable_at(x, y) {
                    cells.insert(raster.cell_of(x, y).unwrap());
                } else {
                    all_on = false;
                }
            }
            if all_on {
                ok_modes += 1;
            }
        }
        assert_eq!(dao, cells.len() as f64 / raster.drivable_cells() as f64);
        assert_eq!(dac, ok_modes as f64 / k as f64);
    }

    #[test]
    fn report_round_trips_through_merge() {
        let mut a = MetricReport::default();
        a.min_ade.push(1.0);
        a.min_ade.push(3.0);
        let mut b = MetricReport::default();
        b.min_ade.push(5.0);
        a.merge(&b);
        assert_eq!(a.min_ade.mean(), 3.0);
        assert!(a.to_text().starts_with("ilpred-metrics v1\n"));
    }
}
