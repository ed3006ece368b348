//! Local reference frames, polar relative features, and radius queries.
//!
//! Everything here is expressed relative to a destination pose, so the
//! derived features are invariant under a shared rigid transform of the
//! whole scene. All functions are pure.

/// Position and orientation in the global frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Heading in radians, normalized to (-pi, pi].
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    /// Apply a global rigid transform: rotate by `angle` about the origin,
    /// then translate by (tx, ty).
    pub fn transformed(&self, angle: f64, tx: f64, ty: f64) -> Pose {
        let (s, c) = angle.sin_cos();
        Pose::new(
            c * self.x - s * self.y + tx,
            s * self.x + c * self.y + ty,
            self.heading + angle,
        )
    }
}

/// Relative edge descriptor between two posed elements, expressed in the
/// destination's local polar frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelEdgeFeature {
    /// Euclidean distance in meters.
    pub dist: f64,
    /// Direction of the edge in the destination's local frame, radians.
    pub edge_dir: f64,
    /// Source heading minus destination heading, normalized.
    pub rel_heading: f64,
    /// Timestamp gap for temporal edges; zero otherwise.
    pub time_gap: usize,
    /// Small integer code: polyline kind or lane connectivity/hop.
    pub attr: i32,
}

/// Wrap an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Distance and bearing of a global point seen from a local frame.
/// Coincident points return (0, 0).
pub fn to_local_polar(target: (f64, f64), frame: &Pose) -> (f64, f64) {
    let dx = target.0 - frame.x;
    let dy = target.1 - frame.y;
    let d2 = dx * dx + dy * dy;
    if d2 == 0.0 {
        return (0.0, 0.0);
    }
    (d2.sqrt(), normalize_angle(dy.atan2(dx) - frame.heading))
}

/// Relative edge feature from a source pose to a destination pose.
pub fn relative_edge(src: &Pose, dst: &Pose, time_gap: usize, attr: i32) -> RelEdgeFeature {
    let (dist, edge_dir) = to_local_polar((src.x, src.y), dst);
    RelEdgeFeature {
        dist,
        edge_dir,
        rel_heading: normalize_angle(src.heading - dst.heading),
        time_gap,
        attr,
    }
}

/// Indices of candidates within `radius` (inclusive) of `center`, in
/// ascending index order.
pub fn radius_neighbors(candidates: &[(f64, f64)], center: (f64, f64), radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    candidates
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let dx = p.0 - center.0;
            let dy = p.1 - center.1;
            dx * dx + dy * dy <= r2
        })
        .map(|(i, _)| i)
        .collect()
}

/// Reference pose of a polyline: position of the centerline midpoint
/// (by point index), orientation from the central chord.
pub fn polyline_midpoint_pose(points: &[(f64, f64)]) -> Pose {
    debug_assert!(points.len() >= 2);
    let n = points.len();
    let mid = n / 2;
    let pos = if n % 2 == 0 {
        let a = points[mid - 1];
        let b = points[mid];
        ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0)
    } else {
        points[mid]
    };
    // Central chord: the segment spanning the midpoint.
    let (a, b) = if n % 2 == 0 {
        (points[mid - 1], points[mid])
    } else {
        (points[mid - 1], points[mid + 1])
    };
    Pose::new(pos.0, pos.1, (b.1 - a.1).atan2(b.0 - a.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn local_polar_analytic_cases() {
        let frame = Pose::new(0.0, 0.0, 0.0);
        assert_eq!(to_local_polar((0.0, 0.0), &frame), (0.0, 0.0));
        let (d, a) = to_local_polar((1.0, 0.0), &frame);
        assert!((d - 1.0).abs() < 1e-15 && a.abs() < 1e-15);
        let frame2 = Pose::new(0.0, 0.0, PI / 2.0);
        let (d, a) = to_local_polar((1.0, 0.0), &frame2);
        assert!((d - 1.0).abs() < 1e-15);
        assert!((a + PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn relative_edge_analytic_cases() {
        let p = Pose::new(3.0, -1.0, 0.7);
        let e = relative_edge(&p, &p, 0, 5);
        assert_eq!((e.dist, e.edge_dir, e.rel_heading), (0.0, 0.0, 0.0));
        assert_eq!((e.time_gap, e.attr), (0, 5));

        let dst = Pose::new(0.0, 0.0, 0.0);
        let src = Pose::new(0.0, 1.0, PI);
        let e = relative_edge(&src, &dst, 3, 2);
        assert!((e.dist - 1.0).abs() < 1e-15);
        assert!((e.edge_dir - PI / 2.0).abs() < 1e-15);
        assert!((e.rel_heading - PI).abs() < 1e-15);
        assert_eq!(e.time_gap, 3);
    }

    #[test]
    fn radius_boundary_is_inclusive() {
        let pts = [(0.0, 0.0), (3.0, 4.0), (10.0, 0.0)];
        assert_eq!(radius_neighbors(&pts, (0.0, 0.0), 5.0), vec![0, 1]);
        assert_eq!(radius_neighbors(&pts, (0.0, 0.0), 0.0), vec![0]);
        assert!(radius_neighbors(&pts, (100.0, 100.0), 5.0).is_empty());
    }

    #[test]
    fn radius_matches_brute_force_scan() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<(f64, f64)> = (0..100)
            .map(|_| (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)))
            .collect();
        let center = (1.0, -2.0);
        let got = radius_neighbors(&pts, center, 5.0);
        let want: Vec<usize> = (0..pts.len())
            .filter(|&i| {
                ((pts[i].0 - center.0).powi(2) + (pts[i].1 - center.1).powi(2)).sqrt() <= 5.0
            })
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn midpoint_pose_even_and_odd() {
        let odd = [(0.0, 0.0), (1.0, 0.0), (2.0, 1.0)];
        let p = polyline_midpoint_pose(&odd);
        assert_eq!((p.x, p.y), (1.0, 0.0));
        assert!((p.heading - 0.5f64.atan2(1.0)).abs() < 1e-15);

        let even = [(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)];
        let p = polyline_midpoint_pose(&even);
        assert_eq!((p.x, p.y), (2.0, 1.0));
        assert!((p.heading - PI / 2.0).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn normalize_is_idempotent_and_in_range(a in -50.0f64..50.0) {
            let n = normalize_angle(a);
            prop_assert!(n > -PI && n <= PI);
            prop_assert!((normalize_angle(n) - n).abs() < 1e-15);
        }

        #[test]
        fn edge_features_are_se2_invariant(
            sx in -100.0f64..100.0, sy in -100.0f64..100.0, sh in -4.0f64..4.0,
            dx in -100.0f64..100.0, dy in -100.0f64..100.0, dh in -4.0f64..4.0,
            rot in -4.0f64..4.0, tx in -100.0f64..100.0, ty in -100.0f64..100.0,
        ) {
            let src = Pose::new(sx, sy, sh);
            let dst = Pose::new(dx, dy, dh);
            let e1 = relative_edge(&src, &dst, 2, 1);
            let e2 = relative_edge(
                &src.transformed(rot, tx, ty),
                &dst.transformed(rot, tx, ty),
                2,
                1,
            );
            prop_assert!((e1.dist - e2.dist).abs() < 1e-9);
            prop_assert!(normalize_angle(e1.edge_dir - e2.edge_dir).abs() < 1e-9);
            prop_assert!(normalize_angle(e1.rel_heading - e2.rel_heading).abs() < 1e-9);
        }

        #[test]
        fn local_polar_is_se2_invariant(
            px in -100.0f64..100.0, py in -100.0f64..100.0,
            fx in -100.0f64..100.0, fy in -100.0f64..100.0, fh in -4.0f64..4.0,
            rot in -4.0f64..4.0, tx in -100.0f64..100.0, ty in -100.0f64..100.0,
        ) {
            let frame = Pose::new(fx, fy, fh);
            let (d1, a1) = to_local_polar((px, py), &frame);
            let moved = Pose::new(px, py, 0.0).transformed(rot, tx, ty);
            let (d2, a2) = to_local_polar((moved.x, moved.y), &frame.transformed(rot, tx, ty));
            prop_assert!((d1 - d2).abs() < 1e-9);
            if d1 > 1e-9 {
                prop_assert!(normalize_angle(a1 - a2).abs() < 1e-9);
            }
        }
    }
}
