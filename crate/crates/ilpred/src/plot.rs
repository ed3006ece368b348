//! Static SVG rendering of a scenario and its predictions: lane graph,
//! agent history, ground-truth future, K predicted polylines per focal
//! agent, and anchor markers.

use crate::error::{Error, Result};
use crate::runner::ScenarioPrediction;
use crate::scene::{PolylineKind, Scenario};

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Mapper {
    x0: f64,
    y1: f64,
    scale: f64,
}

impl Mapper {
    /// SVG y grows downward; flip the world y axis.
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) * self.scale, (self.y1 - y) * self.scale)
    }

    fn path(&self, pts: impl Iterator<Item = (f64, f64)>) -> String {
        pts.map(|(x, y)| {
            let (px, py) = self.map(x, y);
            format!("{px:.2},{py:.2}")
        })
        .collect::<Vec<_>>()
        .join(" ")
    }
}

/// Render the scenario and predictions to an SVG document. The prediction's
/// scenario id must match the scenario's.
pub fn render_svg(s: &Scenario, pred: &ScenarioPrediction) -> Result<String> {
    if pred.scenario_id != s.id {
        return Err(Error::Data(format!(
            "prediction is for scenario {:?}, plot target is {:?}",
            pred.scenario_id, s.id
        )));
    }
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
    for a in &pred.agents {
        for p in a.finals.chunks_exact(2).chain(a.anchors.chunks_exact(2)) {
            xs.push(p[0]);
            ys.push(p[1]);
        }
    }
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min) - 5.0;
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 5.0;
    let (x0, x1, y0, y1) = (min(&xs), max(&xs), min(&ys), max(&ys));
    let scale = 900.0 / (x1 - x0).max(y1 - y0).max(1.0);
    let m = Mapper { x0, y1, scale };
    let (w, h) = ((x1 - x0) * scale, (y1 - y0) * scale);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" \
         viewBox=\"0 0 {w:.2} {h:.2}\">\n"
    ));
    svg.push_str(&format!("<title>{}</title>\n", esc(&s.id)));
    svg.push_str(&format!("<rect width=\"{w:.2}\" height=\"{h:.2}\" fill=\"#fafafa\"/>\n"));

    for seg in &s.map.segments {
        for pl in &seg.polylines {
            let (color, width, dash) = match pl.kind {
                PolylineKind::Centerline => ("#bbbbbb", 1.0, " stroke-dasharray=\"6,4\""),
                _ => ("#888888", 1.5, ""),
            };
            svg.push_str(&format!(
                "<polyline class=\"lane\" points=\"{}\" fill=\"none\" stroke=\"{color}\" \
                 stroke-width=\"{width}\"{dash}/>\n",
                m.path(pl.points.iter().copied())
            ));
        }
    }

    for a in &s.agents {
        let focal = s.focal_ids.contains(&a.id);
        let color = if focal { "#d62728" } else { "#1f77b4" };
        svg.push_str(&format!(
            "<polyline class=\"history\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2.5\"/>\n",
            m.path(a.states[..s.h].iter().map(|st| (st.x, st.y)))
        ));
        svg.push_str(&format!(
            "<polyline class=\"gt\" points=\"{}\" fill=\"none\" stroke=\"{color}\" \
             stroke-width=\"1.5\" stroke-dasharray=\"3,3\"/>\n",
            m.path(a.states[s.h - 1..].iter().map(|st| (st.x, st.y)))
        ));
    }

    for a in &pred.agents {
        if !s.focal_ids.contains(&a.agent_id) {
            continue;
        }
        let k = a.probs.len();
        let f = a.gt.len() / 2;
        for km in 0..k {
            let pts = a.finals[km * f * 2..(km + 1) * f * 2]
                .chunks_exact(2)
                .map(|p| (p[0], p[1]));
            svg.push_str(&format!(
                "<polyline class=\"prediction\" points=\"{}\" fill=\"none\" stroke=\"#2ca02c\" \
                 stroke-width=\"1.2\" opacity=\"{:.3}\"/>\n",
                m.path(pts),
                0.35 + 0.65 * a.probs[km]
            ));
        }
        for (km, p) in a.anchors.chunks_exact(2).enumerate() {
            let (cx, cy) = m.map(p[0], p[1]);
            svg.push_str(&format!(
                "<circle class=\"anchor\" cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"#ff7f0e\" \
                 data-mode=\"{km}\" data-x=\"{:.16e}\" data-y=\"{:.16e}\"/>\n",
                p[0], p[1]
            ));
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::model::init_params;
    use crate::runner::predict;
    use crate::scene::{generate_scenario, Kind};

    fn render_one() -> (Scenario, ScenarioPrediction, String) {
        let mut cfg = RunConfig::default();
        cfg.d = 16;
        cfg.heads = 2;
        cfg.n_rec = 1;
        cfg.k = 3;
        cfg.h = 6;
        cfg.f = 8;
        let mcfg = cfg.model_config().unwrap();
        let ps = init_params(&mcfg, 0).unwrap();
        let s = generate_scenario(Kind::Intersection, 1, cfg.h, cfg.f, 10.0);
        let pred = predict(&ps, &mcfg, &s).unwrap();
        let svg = render_svg(&s, &pred).unwrap();
        (s, pred, svg)
    }

    #[test]
    fn svg_is_well_formed_xml() {
        let (_, _, svg) = render_one();
        roxmltree::Document::parse(&svg).unwrap();
    }

    #[test]
    fn one_prediction_polyline_per_mode_per_focal() {
        let (s, _, svg) = render_one();
        let count = svg.matches("class=\"prediction\"").count();
        assert_eq!(count, s.focal_ids.len() * 3);
        let anchors = svg.matches("class=\"anchor\"").count();
        assert_eq!(anchors, s.focal_ids.len() * 3);
    }

    #[test]
    fn anchor_markers_carry_exact_coordinates() {
        let (s, pred, svg) = render_one();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let focal: Vec<&crate::runner::AgentPrediction> = pred
            .agents
            .iter()
            .filter(|a| s.focal_ids.contains(&a.agent_id))
            .collect();
        let mut want = Vec::new();
        for a in &focal {
            for p in a.anchors.chunks_exact(2) {
                want.push((p[0], p[1]));
            }
        }
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
        assert_eq!(want, got);
    }

    #[test]
    fn id_mismatch_is_rejected() {
        let (s, mut pred, _) = render_one();
        pred.scenario_id = "other".into();
        assert!(render_svg(&s, &pred).is_err());
    }
}
