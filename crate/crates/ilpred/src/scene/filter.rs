//! Constant-velocity baseline and the challenging-scenario filter.

use super::generate::Kind;
use super::types::{AgentTrack, Scenario};
use crate::error::{Error, Result};

/// Extrapolate the last observed history velocity for `f` steps.
pub fn constant_velocity_rollout(track: &AgentTrack, h: usize, f: usize, dt: f64) -> Result<Vec<(f64, f64)>> {
    let observed: Vec<usize> = (0..h).filter(|&t| track.states[t].observed).collect();
    if observed.len() < 2 {
        return Err(Error::Data(format!(
            "agent {}: constant-velocity rollout needs at least 2 observed history states, got {}",
            track.id,
            observed.len()
        )));
    }
    let last = &track.states[*observed.last().unwrap()];
    let vx = last.speed * last.vel_dir.cos();
    let vy = last.speed * last.vel_dir.sin();
    Ok((1..=f)
        .map(|k| (last.x + vx * dt * k as f64, last.y + vy * dt * k as f64))
        .collect())
}

/// Absolute angle (degrees) between the history chord (first to last history
/// position) and the future chord (last history to final position).
pub fn absolute_angle_deg(track: &AgentTrack, h: usize) -> f64 {
    let a0 = track.states[0].position();
    let a1 = track.states[h - 1].position();
    let b1 = track.states.last().unwrap().position();
    let u = (a1.0 - a0.0, a1.1 - a0.1);
    let v = (b1.0 - a1.0, b1.1 - a1.1);
    let nu = (u.0 * u.0 + u.1 * u.1).sqrt();
    let nv = (v.0 * v.0 + v.1 * v.1).sqrt();
    if nu < 1e-9 || nv < 1e-9 {
        return 0.0;
    }
    let cosang = ((u.0 * v.0 + u.1 * v.1) / (nu * nv)).clamp(-1.0, 1.0);
    cosang.acos().to_degrees()
}

/// Final displacement error of the constant-velocity baseline for the first
/// focal agent.
pub fn cv_fde(s: &Scenario) -> Result<f64> {
    let track = s
        .agent_by_id(s.focal_ids[0])
        .ok_or_else(|| Error::Data("missing focal track".into()))?;
    let rollout = constant_velocity_rollout(track, s.h, s.f, s.dt())?;
    let pred = rollout.last().unwrap();
    let gt = track.states.last().unwrap().position();
    Ok(((pred.0 - gt.0).powi(2) + (pred.1 - gt.1).powi(2)).sqrt())
}

/// Count of timestamps at which some other agent is within 5 m of the focal.
pub fn interaction_steps(s: &Scenario) -> usize {
    let focal = s.agent_by_id(s.focal_ids[0]).expect("validated focal id");
    (0..s.h + s.f)
        .filter(|&t| {
            let fp = focal.states[t].position();
            s.agents.iter().any(|a| {
                if a.id == focal.id {
                    return false;
                }
                let p = a.states[t].position();
                ((p.0 - fp.0).powi(2) + (p.1 - fp.1).powi(2)).sqrt() <= 5.0
            })
        })
        .count()
}

/// Indices of scenarios passing all four challenging conditions:
/// intersection kind, constant-velocity FDE above `d_fde`, at least
/// `min_interaction_steps` interaction timestamps, and focal absolute angle
/// of at least `alpha_min_deg`.
pub fn select_challenging(
    scenarios: &[Scenario],
    d_fde: f64,
    min_interaction_steps: usize,
    alpha_min_deg: f64,
) -> Result<Vec<usize>> {
    let mut keep = Vec::new();
    for (i, s) in scenarios.iter().enumerate() {
        let kind = s.id.split('-').next().and_then(Kind::parse);
        if kind != Some(Kind::Intersection) {
            continue;
        }
        if cv_fde(s)? <= d_fde {
            continue;
        }
        if interaction_steps(s) < min_interaction_steps {
            continue;
        }
        let focal = s.agent_by_id(s.focal_ids[0]).unwrap();
        if absolute_angle_deg(focal, s.h) < alpha_min_deg {
            continue;
        }
        keep.push(i);
    }
    Ok(keep)
}
