//! Deterministic synthetic scenario generator.
//!
//! Four scenario kinds cover the interaction patterns the model is meant to
//! learn: platoon following with delayed driver reaction, yielding and
//! turning at intersections, ramp merges, and curved roads. Agents move
//! along piecewise constant-curvature paths under simple longitudinal
//! control; the ground-truth future is the script continuation. Generation
//! is a pure function of (kind, seed).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::types::*;
use crate::geometry::{normalize_angle, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Follow,
    Intersection,
    Merge,
    Curve,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::Follow, Kind::Intersection, Kind::Merge, Kind::Curve];

    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::Follow => "follow",
            Kind::Intersection => "intersection",
            Kind::Merge => "merge",
            Kind::Curve => "curve",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "follow" => Some(Kind::Follow),
            "intersection" => Some(Kind::Intersection),
            "merge" => Some(Kind::Merge),
            "curve" => Some(Kind::Curve),
            _ => None,
        }
    }

    fn index(&self) -> u64 {
        match self {
            Kind::Follow => 0,
            Kind::Intersection => 1,
            Kind::Merge => 2,
            Kind::Curve => 3,
        }
    }
}

/// Piecewise constant-curvature path: a start pose plus (arc length,
/// curvature) pieces. Positions beyond either end extrapolate straight.
#[derive(Debug, Clone)]
pub struct Path {
    pub start: Pose,
    pub pieces: Vec<(f64, f64)>,
}

impl Path {
    pub fn total_len(&self) -> f64 {
        self.pieces.iter().map(|p| p.0).sum()
    }

    pub fn pose_at(&self, s: f64) -> Pose {
        let mut pose = self.start;
        if s <= 0.0 {
            return advance_straight(&pose, s);
        }
        let mut remaining = s;
        for &(len, k) in &self.pieces {
            if remaining <= len {
                return advance(&pose, remaining, k);
            }
            pose = advance(&pose, len, k);
            remaining -= len;
        }
        advance_straight(&pose, remaining)
    }
}

fn advance_straight(p: &Pose, ds: f64) -> Pose {
    Pose::new(
        p.x + ds * p.heading.cos(),
        p.y + ds * p.heading.sin(),
        p.heading,
    )
}

fn advance(p: &Pose, ds: f64, curvature: f64) -> Pose {
    if curvature.abs() < 1e-9 {
        return advance_straight(p, ds);
    }
    let th0 = p.heading;
    let th1 = th0 + curvature * ds;
    Pose::new(
        p.x + (th1.sin() - th0.sin()) / curvature,
        p.y + (th0.cos() - th1.cos()) / curvature,
        th1,
    )
}

/// Longitudinal control rule for one simulated agent.
enum Behavior {
    /// Track a per-step target speed.
    Profile(Vec<f64>),
    /// Car following with a reaction delay: acceleration at step t responds
    /// to the gap and speeds observed at step t - delay.
    Follow {
        leader: usize,
        desired_gap: f64,
        delay: usize,
        /// Added to the leader's arc position to express it in this agent's
        /// arc frame (nonzero when leader and follower ride different paths).
        leader_offset: f64,
    },
    /// Hold back before an arc-length conflict point until every blocker has
    /// passed its own conflict arc, then accelerate to the target speed.
    YieldThenGo {
        conflict_s: f64,
        blockers: Vec<(usize, f64)>,
        target_speed: f64,
    },
}

struct SimAgent {
    path: Path,
    s0: f64,
    v0: f64,
    behavior: Behavior,
    category: Category,
    length: f64,
    width: f64,
}

const MAX_ACCEL: f64 = 3.5;
const MAX_DECEL: f64 = 4.0;
const MAX_SPEED: f64 = 16.0;

/// Integrate all agents for `steps` timestamps; returns per-agent arc
/// positions and speeds. s[t+1] = s[t] + v[t] dt, so the chord between
/// consecutive recorded positions never exceeds the recorded speed times dt.
fn simulate(agents: &[SimAgent], steps: usize, dt: f64) -> Vec<Vec<(f64, f64)>> {
    let n = agents.len();
    let mut traj: Vec<Vec<(f64, f64)>> = (0..n).map(|i| vec![(agents[i].s0, agents[i].v0)]).collect();
    for t in 1..steps {
        let mut next = Vec::with_capacity(n);
        for (i, a) in agents.iter().enumerate() {
            let (s_prev, v_prev) = traj[i][t - 1];
            let accel = match &a.behavior {
                Behavior::Profile(targets) => {
                    let target = targets[(t - 1).min(targets.len() - 1)];
                    (target - v_prev) / dt
                }
                Behavior::Follow {
                    leader,
                    desired_gap,
                    delay,
                    leader_offset,
                } => {
                    let td = (t - 1).saturating_sub(*delay);
                    let (s_l, v_l) = traj[*leader][td];
                    let (s_s, v_s) = traj[i][td];
                    let gap = s_l + leader_offset - s_s;
                    1.2 * (gap - desired_gap) + 1.6 * (v_l - v_s)
                }
                Behavior::YieldThenGo {
                    conflict_s,
                    blockers,
                    target_speed,
                } => {
                    let cleared = blockers
                        .iter()
                        .all(|&(b, bs)| traj[b][t - 1].0 > bs + 2.0);
                    if cleared {
                        (target_speed - v_prev) / dt
                    } else {
                        let stop_at = conflict_s - 2.0;
                        let dist = (stop_at - s_prev).max(0.1);
                        // Brake just hard enough to stop before the conflict.
                        -(v_prev * v_prev) / (2.0 * dist)
                    }
                }
            };
            let accel = accel.clamp(-MAX_DECEL, MAX_ACCEL);
            let v = (v_prev + accel * dt).clamp(0.0, MAX_SPEED);
            next.push((s_prev + v_prev * dt, v));
        }
        for (i, sv) in next.into_iter().enumerate() {
            traj[i].push(sv);
        }
    }
    traj
}

/// Turn simulated (arc, speed) samples into a track in the global frame.
fn build_track(
    id: u32,
    agent: &SimAgent,
    samples: &[(f64, f64)],
    dt: f64,
) -> AgentTrack {
    let mut states = Vec::with_capacity(samples.len());
    let poses: Vec<Pose> = samples.iter().map(|&(s, _)| agent.path.pose_at(s)).collect();
    for (t, &(_, v)) in samples.iter().enumerate() {
        let p = poses[t];
        let vel_dir = if t + 1 < poses.len() {
            let dx = poses[t + 1].x - p.x;
            let dy = poses[t + 1].y - p.y;
            if dx * dx + dy * dy > 1e-12 {
                dy.atan2(dx)
            } else {
                p.heading
            }
        } else {
            p.heading
        };
        let _ = dt;
        states.push(AgentState {
            x: p.x,
            y: p.y,
            heading: p.heading,
            speed: v,
            vel_dir,
            observed: true,
        });
    }
    AgentTrack {
        id,
        category: agent.category,
        length: agent.length,
        width: agent.width,
        states,
    }
}

const LANE_WIDTH: f64 = 3.5;
const CENTERLINE_STEP: f64 = 2.0;
const POINTS_PER_SEGMENT: usize = 6;

/// Sample a road's centerline over [s_min, s_max], chunk it into lane
/// segments with offset boundaries, and wire predecessor/successor
/// connections with 1- and 2-hop entries.
fn add_road(map: &mut LaneGraph, path: &Path, s_min: f64, s_max: f64) -> Vec<u32> {
    let mut poses = Vec::new();
    let mut s = s_min;
    while s < s_max + CENTERLINE_STEP * 0.5 {
        poses.push(path.pose_at(s.min(s_max)));
        s += CENTERLINE_STEP;
    }
    let mut ids = Vec::new();
    let mut start = 0usize;
    while start + 1 < poses.len() {
        let end = (start + POINTS_PER_SEGMENT - 1).min(poses.len() - 1);
        let chunk = &poses[start..=end];
        let id = map.segments.len() as u32;
        let offset = |p: &Pose, side: f64| {
            let (sn, cs) = p.heading.sin_cos();
            (p.x - sn * side, p.y + cs * side)
        };
        map.segments.push(LaneSegment {
            id,
            polylines: vec![
                Polyline {
                    kind: PolylineKind::Centerline,
                    points: chunk.iter().map(|p| (p.x, p.y)).collect(),
                },
                Polyline {
                    kind: PolylineKind::LeftBoundary,
                    points: chunk.iter().map(|p| offset(p, LANE_WIDTH / 2.0)).collect(),
                },
                Polyline {
                    kind: PolylineKind::RightBoundary,
                    points: chunk.iter().map(|p| offset(p, -LANE_WIDTH / 2.0)).collect(),
                },
            ],
        });
        ids.push(id);
        start = end;
    }
    for w in ids.windows(2) {
        map.connections.push(Connection {
            from: w[0],
            to: w[1],
            kind: ConnectionKind::Successor,
            hops: 1,
        });
        map.connections.push(Connection {
            from: w[1],
            to: w[0],
            kind: ConnectionKind::Predecessor,
            hops: 1,
        });
    }
    for w in ids.windows(3) {
        map.connections.push(Connection {
            from: w[0],
            to: w[2],
            kind: ConnectionKind::Successor,
            hops: 2,
        });
        map.connections.push(Connection {
            from: w[2],
            to: w[0],
            kind: ConnectionKind::Predecessor,
            hops: 2,
        });
    }
    ids
}

fn veh_dims(rng: &mut ChaCha8Rng) -> (f64, f64) {
    (rng.gen_range(4.0..5.2), rng.gen_range(1.8..2.1))
}

fn vehicle(dims: (f64, f64), path: Path, s0: f64, v0: f64, behavior: Behavior) -> SimAgent {
    SimAgent {
        path,
        s0,
        v0,
        behavior,
        category: Category::Vehicle,
        length: dims.0,
        width: dims.1,
    }
}

struct Scene {
    agents: Vec<SimAgent>,
    roads: Vec<(Path, f64, f64)>,
    neighbor_roads: Vec<(usize, usize)>,
    focal: usize,
}

fn build_follow(rng: &mut ChaCha8Rng, steps: usize) -> Scene {
    // Mostly straight road with a gentle bend; a platoon whose leader brakes
    // partway through, forcing delayed reactions down the chain.
    let bend = rng.gen_range(-0.004..0.004f64);
    let road = Path {
        start: Pose::new(0.0, 0.0, 0.0),
        pieces: vec![(60.0, 0.0), (60.0, bend), (80.0, 0.0)],
    };
    let n_follow = rng.gen_range(1..=3usize);
    let base_speed = rng.gen_range(7.0..11.0);
    let brake_at = rng.gen_range(2..10usize);
    let brake_frac = rng.gen_range(0.25..0.55);
    let mut profile = vec![base_speed; steps];
    for (t, v) in profile.iter_mut().enumerate() {
        if t >= brake_at {
            *v = base_speed * brake_frac;
        }
        if t >= brake_at + 10 {
            *v = base_speed * 0.9;
        }
    }
    let mut agents = vec![vehicle(
        veh_dims(rng),
        road.clone(),
        40.0 + rng.gen_range(-4.0..4.0),
        base_speed,
        Behavior::Profile(profile),
    )];
    for i in 0..n_follow {
        let gap = rng.gen_range(6.0..10.0);
        let s0 = agents[i].s0 - gap;
        agents.push(vehicle(
            veh_dims(rng),
            road.clone(),
            s0,
            base_speed,
            Behavior::Follow {
                leader: i,
                desired_gap: gap,
                delay: rng.gen_range(3..=5),
                leader_offset: 0.0,
            },
        ));
    }
    let focal = agents.len() - 1;
    // Empty adjacent lane so the map has neighbor connectivity.
    let other_lane = Path {
        start: Pose::new(0.0, LANE_WIDTH, 0.0),
        pieces: road.pieces.clone(),
    };
    Scene {
        agents,
        roads: vec![(road, 0.0, 120.0), (other_lane, 0.0, 120.0)],
        neighbor_roads: vec![(0, 1)],
        focal,
    }
}

fn build_intersection(rng: &mut ChaCha8Rng, steps: usize, h: usize) -> Scene {
    // A crossing platoon on road A; the focal agent on road B yields at the
    // conflict point, then accelerates into a turn once the platoon clears.
    let cross_angle = rng.gen_range(1.05..2.09); // 60..120 degrees
    let road_a = Path {
        start: Pose::new(-80.0, 0.0, 0.0),
        pieces: vec![(160.0, 0.0)],
    };
    let conflict_a = 80.0; // arc length of the origin on road A
    let base_speed = rng.gen_range(6.5..9.5);
    let n_platoon = rng.gen_range(2..=3usize);
    // Time the platoon tail to clear the origin mid-history: late enough
    // that the focal waits beside the stream for several steps, early enough
    // that it still accelerates visibly within the future horizon.
    let _ = h;
    let t_clear = rng.gen_range(0.6..0.8);
    let gaps: Vec<f64> = (1..n_platoon).map(|_| rng.gen_range(3.5..4.5)).collect();
    let tail_s0 = conflict_a + 2.0 - base_speed * t_clear;
    let head_s0 = tail_s0 + gaps.iter().sum::<f64>();
    let mut agents = vec![vehicle(
        veh_dims(rng),
        road_a.clone(),
        head_s0,
        base_speed,
        Behavior::Profile(vec![base_speed; steps]),
    )];
    for (i, &gap) in gaps.iter().enumerate() {
        agents.push(vehicle(
            veh_dims(rng),
            road_a.clone(),
            agents[i].s0 - gap,
            base_speed,
            Behavior::Follow {
                leader: i,
                desired_gap: gap,
                delay: rng.gen_range(3..=5),
                leader_offset: 0.0,
            },
        ));
    }
    let tail = agents.len() - 1;

    // Focal approach: heading `cross_angle`, conflict at arc length d_appr,
    // then a turn onto the crossing direction.
    let d_appr = 30.0;
    let turn = rng.gen_bool(0.75);
    let turn_angle = if turn {
        -normalize_angle(cross_angle) * rng.gen_range(0.6..0.95)
    } else {
        rng.gen_range(-0.05..0.05)
    };
    let turn_len = rng.gen_range(8.0..11.0);
    let start = advance_straight(
        &Pose::new(0.0, 0.0, cross_angle),
        -(d_appr),
    );
    let road_b = Path {
        start,
        pieces: vec![(d_appr - 2.0, 0.0), (turn_len, turn_angle / turn_len), (40.0, 0.0)],
    };
    let v0 = rng.gen_range(5.0..7.0);
    let focal_s0 = d_appr - 2.0 - v0 * rng.gen_range(0.45..0.7);
    let blockers = (0..agents.len()).map(|i| (i, conflict_a)).collect();
    agents.push(vehicle(
        veh_dims(rng),
        road_b.clone(),
        focal_s0,
        v0,
        Behavior::YieldThenGo {
            conflict_s: d_appr,
            blockers,
            target_speed: rng.gen_range(10.0..13.0),
        },
    ));
    let focal = agents.len() - 1;
    let _ = tail;
    Scene {
        agents,
        roads: vec![(road_a, 30.0, 130.0), (road_b, 0.0, d_appr - 2.0 + turn_len + 25.0)],
        neighbor_roads: vec![],
        focal,
    }
}

fn build_merge(rng: &mut ChaCha8Rng, steps: usize) -> Scene {
    // Main-road platoon plus a ramp agent blending in behind it. The ramp
    // meets the main road direction after a constant-curvature blend.
    let main = Path {
        start: Pose::new(-80.0, 0.0, 0.0),
        pieces: vec![(180.0, 0.0)],
    };
    let base_speed = rng.gen_range(7.0..10.0);
    let n_platoon = rng.gen_range(2..=3usize);
    let mut agents = vec![vehicle(
        veh_dims(rng),
        main.clone(),
        80.0 + rng.gen_range(-5.0..5.0),
        base_speed,
        Behavior::Profile(vec![base_speed; steps]),
    )];
    for i in 1..n_platoon {
        let gap = rng.gen_range(3.2..4.6);
        agents.push(vehicle(
            veh_dims(rng),
            main.clone(),
            agents[i - 1].s0 - gap,
            base_speed,
            Behavior::Follow {
                leader: i - 1,
                desired_gap: gap,
                delay: rng.gen_range(3..=5),
                leader_offset: 0.0,
            },
        ));
    }
    let tail = agents.len() - 1;

    let approach = rng.gen_range(0.18..0.28); // ramp angle, radians
    let blend_len = rng.gen_range(14.0..18.0);
    let ramp_straight = 40.0;
    // Choose the start height so the blend ends on the main line (y = 0).
    let probe = Path {
        start: Pose::new(0.0, 0.0, -approach),
        pieces: vec![(ramp_straight, 0.0), (blend_len, approach / blend_len), (60.0, 0.0)],
    };
    let y_end = probe.pose_at(ramp_straight + blend_len).y;
    // Start the focal near the end of the ramp straight, a short x gap
    // behind the platoon tail.
    let focal_s0 = ramp_straight - rng.gen_range(6.0..12.0);
    let probe_pose = probe.pose_at(focal_s0);
    let gap_x = rng.gen_range(5.0..8.0);
    let tail_x0 = agents[tail].s0 - 80.0;
    let start_x = tail_x0 - gap_x - probe_pose.x;
    let ramp = Path {
        start: Pose::new(start_x, -y_end, -approach),
        pieces: probe.pieces.clone(),
    };
    let ramp_v0 = base_speed * rng.gen_range(0.85..1.0);
    // The leader rides the main path; translate its arc position into the
    // ramp's arc frame through the shared x axis (the ramp is nearly
    // x-aligned at these angles).
    let leader_offset = -80.0 - start_x;
    agents.push(vehicle(
        veh_dims(rng),
        ramp.clone(),
        focal_s0,
        ramp_v0,
        Behavior::Follow {
            leader: tail,
            desired_gap: rng.gen_range(4.0..5.5),
            delay: rng.gen_range(3..=5),
            leader_offset,
        },
    ));
    let _ = steps;
    let focal = agents.len() - 1;
    Scene {
        agents,
        roads: vec![
            (main, 40.0, 140.0),
            (ramp, 0.0, ramp_straight + blend_len + 40.0),
        ],
        neighbor_roads: vec![],
        focal,
    }
}

fn build_curve(rng: &mut ChaCha8Rng, steps: usize, h: usize) -> Scene {
    // A road that bends sharply enough that the focal agent's future chord
    // turns well past 10 degrees away from its history chord.
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let bend_angle = sign * rng.gen_range(0.7..1.2);
    let arc_len = rng.gen_range(16.0..22.0);
    let road = Path {
        start: Pose::new(0.0, 0.0, 0.0),
        pieces: vec![(60.0, 0.0), (arc_len, bend_angle / arc_len), (60.0, 0.0)],
    };
    let speed = rng.gen_range(7.0..10.0);
    // Place the focal so the arc spans its future horizon.
    let focal_s0 = 60.0 - speed * (h as f64) * 0.1;
    let n_extra = rng.gen_range(1..=3usize);
    let mut agents = vec![vehicle(
        veh_dims(rng),
        road.clone(),
        focal_s0 + rng.gen_range(10.0..14.0),
        speed,
        Behavior::Profile(vec![speed; steps]),
    )];
    agents.push(vehicle(
        veh_dims(rng),
        road.clone(),
        focal_s0,
        speed,
        Behavior::Follow {
            leader: 0,
            desired_gap: rng.gen_range(8.0..12.0),
            delay: rng.gen_range(3..=5),
            leader_offset: 0.0,
        },
    ));
    let focal = agents.len() - 1;
    for i in 1..n_extra {
        let gap = rng.gen_range(7.0..10.0);
        let prev = agents.len() - 1;
        let s0 = agents[prev].s0 - gap;
        agents.push(vehicle(
            veh_dims(rng),
            road.clone(),
            s0,
            speed,
            Behavior::Follow {
                leader: prev,
                desired_gap: gap,
                delay: rng.gen_range(3..=5),
                leader_offset: 0.0,
            },
        ));
        let _ = i;
    }
    Scene {
        agents,
        roads: vec![(road, 0.0, 120.0 + arc_len)],
        neighbor_roads: vec![],
        focal,
    }
}

/// Generate one scenario. Deterministic in (kind, seed); h/f/sample_rate
/// set the horizon layout.
pub fn generate_scenario(kind: Kind, seed: u64, h: usize, f: usize, sample_rate_hz: f64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(4).wrapping_add(kind.index()));
    let steps = h + f;
    let dt = 1.0 / sample_rate_hz;
    let scene = match kind {
        Kind::Follow => build_follow(&mut rng, steps),
        Kind::Intersection => build_intersection(&mut rng, steps, h),
        Kind::Merge => build_merge(&mut rng, steps),
        Kind::Curve => build_curve(&mut rng, steps, h),
    };
    let traj = simulate(&scene.agents, steps, dt);
    let mut agents: Vec<AgentTrack> = scene
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| build_track(i as u32, a, &traj[i], dt))
        .collect();

    let mut map = LaneGraph::default();
    let mut road_segs = Vec::new();
    for (path, s_min, s_max) in &scene.roads {
        road_segs.push(add_road(&mut map, path, *s_min, *s_max));
    }
    for &(ra, rb) in &scene.neighbor_roads {
        for (a, b) in road_segs[ra].iter().zip(road_segs[rb].iter()) {
            map.connections.push(Connection {
                from: *a,
                to: *b,
                kind: ConnectionKind::Neighbor,
                hops: 1,
            });
            map.connections.push(Connection {
                from: *b,
                to: *a,
                kind: ConnectionKind::Neighbor,
                hops: 1,
            });
        }
    }

    // Random global placement: outputs must not depend on the world frame,
    // so nothing downstream may rely on scenes being axis-aligned.
    let rot = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let tx = rng.gen_range(-100.0..100.0);
    let ty = rng.gen_range(-100.0..100.0);
    let (rs, rc) = rot.sin_cos();
    let xf_pt = |x: f64, y: f64| (rc * x - rs * y + tx, rs * x + rc * y + ty);
    for a in &mut agents {
        for st in &mut a.states {
            let (x, y) = xf_pt(st.x, st.y);
            st.x = x;
            st.y = y;
            st.heading = normalize_angle(st.heading + rot);
            st.vel_dir = normalize_angle(st.vel_dir + rot);
        }
    }
    for seg in &mut map.segments {
        for pl in &mut seg.polylines {
            for p in &mut pl.points {
                *p = xf_pt(p.0, p.1);
            }
        }
    }

    let focal_id = agents[scene.focal].id;
    let scenario = Scenario {
        id: format!("{}-{seed}", kind.as_str()),
        sample_rate_hz,
        h,
        f,
        agents,
        map,
        focal_ids: vec![focal_id],
    };
    debug_assert!(scenario.validate().is_ok());
    scenario
}
