//! Scenario data model: agent tracks, the lane graph, and split manifests.

use crate::error::{Error, Result};
use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Vehicle => "vehicle",
            Category::Pedestrian => "pedestrian",
            Category::Cyclist => "cyclist",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vehicle" => Some(Category::Vehicle),
            "pedestrian" => Some(Category::Pedestrian),
            "cyclist" => Some(Category::Cyclist),
            _ => None,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Category::Vehicle => 0,
            Category::Pedestrian => 1,
            Category::Cyclist => 2,
        }
    }
}

/// One timestamped kinematic record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Body orientation, radians.
    pub heading: f64,
    /// Velocity magnitude, m/s.
    pub speed: f64,
    /// Velocity direction, radians (equals heading when moving forward).
    pub vel_dir: f64,
    /// Whether this history step was observed; future steps carry `true`.
    pub observed: bool,
}

impl AgentState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.heading)
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub id: u32,
    pub category: Category,
    /// Bounding-box length and width, meters.
    pub length: f64,
    pub width: f64,
    /// Exactly H + F states; the first H are history.
    pub states: Vec<AgentState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolylineKind {
    Centerline,
    LeftBoundary,
    RightBoundary,
}

impl PolylineKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolylineKind::Centerline => "centerline",
            PolylineKind::LeftBoundary => "left",
            PolylineKind::RightBoundary => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "centerline" => Some(PolylineKind::Centerline),
            "left" => Some(PolylineKind::LeftBoundary),
            "right" => Some(PolylineKind::RightBoundary),
            _ => None,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            PolylineKind::Centerline => 0,
            PolylineKind::LeftBoundary => 1,
            PolylineKind::RightBoundary => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub kind: PolylineKind,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneSegment {
    pub id: u32,
    pub polylines: Vec<Polyline>,
}

impl LaneSegment {
    pub fn centerline(&self) -> &Polyline {
        self.polylines
            .iter()
            .find(|p| p.kind == PolylineKind::Centerline)
            .expect("validated segment has a centerline")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionKind {
    Predecessor,
    Successor,
    Neighbor,
}

impl ConnectionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConnectionKind::Predecessor => "predecessor",
            ConnectionKind::Successor => "successor",
            ConnectionKind::Neighbor => "neighbor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "predecessor" => Some(ConnectionKind::Predecessor),
            "successor" => Some(ConnectionKind::Successor),
            "neighbor" => Some(ConnectionKind::Neighbor),
            _ => None,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            ConnectionKind::Predecessor => 0,
            ConnectionKind::Successor => 1,
            ConnectionKind::Neighbor => 2,
        }
    }
}

/// Typed, hop-counted link between two lane segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Connection {
    pub from: u32,
    pub to: u32,
    pub kind: ConnectionKind,
    pub hops: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LaneGraph {
    pub segments: Vec<LaneSegment>,
    pub connections: Vec<Connection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub sample_rate_hz: f64,
    /// History steps.
    pub h: usize,
    /// Future steps.
    pub f: usize,
    pub agents: Vec<AgentTrack>,
    pub map: LaneGraph,
    /// Agent ids scored in marginal evaluation mode.
    pub focal_ids: Vec<u32>,
}

impl Scenario {
    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn agent_by_id(&self, id: u32) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.id == id)
    }

    /// Structural invariants every scenario must satisfy after load or
    /// generation.
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz <= 0.0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if self.focal_ids.is_empty() {
            return Err(Error::Data("focal_ids must be non-empty".into()));
        }
        for id in &self.focal_ids {
            if self.agent_by_id(*id).is_none() {
                return Err(Error::Data(format!("focal id {id} has no track")));
            }
        }
        let total = self.h + self.f;
        for a in &self.agents {
            if a.states.len() != total {
                return Err(Error::Data(format!(
                    "agent {}: {} states, expected H+F = {total}",
                    a.id,
                    a.states.len()
                )));
            }
            for (t, s) in a.states.iter().enumerate() {
                if s.speed < 0.0 {
                    return Err(Error::Data(format!(
                        "agent {} step {t}: negative speed {}",
                        a.id, s.speed
                    )));
                }
                if t >= self.h && !s.observed {
                    return Err(Error::Data(format!(
                        "agent {} step {t}: future steps must be observed",
                        a.id
                    )));
                }
            }
        }
        let ids: std::collections::HashSet<u32> = self.map.segments.iter().map(|s| s.id).collect();
        if ids.len() != self.map.segments.len() {
            return Err(Error::Data("duplicate lane segment ids".into()));
        }
        for s in &self.map.segments {
            let centerlines = s
                .polylines
                .iter()
                .filter(|p| p.kind == PolylineKind::Centerline)
                .count();
            if centerlines != 1 {
                return Err(Error::Data(format!(
                    "segment {}: {} centerlines, expected exactly 1",
                    s.id, centerlines
                )));
            }
            if s.centerline().points.len() < 2 {
                return Err(Error::Data(format!(
                    "segment {}: centerline needs at least 2 points",
                    s.id
                )));
            }
        }
        for c in &self.map.connections {
            if !ids.contains(&c.from) || !ids.contains(&c.to) {
                return Err(Error::Data(format!(
                    "connection {} -> {} references unknown segment",
                    c.from, c.to
                )));
            }
        }
        Ok(())
    }
}

/// Index file pairing train and validation scenario files with the
/// generator settings that produced them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitManifest {
    pub seed: u64,
    /// (kind name, count) pairs describing the generation mix.
    pub kind_mix: Vec<(String, usize)>,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl SplitManifest {
    pub fn validate(&self) -> Result<()> {
        let train: std::collections::HashSet<&str> =
            self.train.iter().map(|s| s.as_str()).collect();
        for v in &self.val {
            if train.contains(v.as_str()) {
                return Err(Error::Data(format!(
                    "file {v:?} appears in both train and val splits"
                )));
            }
        }
        Ok(())
    }
}
