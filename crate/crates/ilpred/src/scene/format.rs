//! On-disk scenario and split-manifest formats.
//!
//! One scenario per file, structured text, documented in
//! docs/scenario_format.md at the repository root. Floats are printed with
//! 17 significant digits so load(save(s)) is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::types::*;
use crate::error::{Error, Result};

pub const SCENARIO_VERSION: &str = "ilpred-scenario v1";
pub const SPLIT_VERSION: &str = "ilpred-split v1";

fn fmt_f64(v: f64) -> String {
    // 1 leading + 16 fractional significant digits survive the f64
    // round-trip exactly.
    format!("{v:.16e}")
}

pub fn scenario_to_string(s: &Scenario) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{SCENARIO_VERSION}");
    let _ = writeln!(out, "id {}", s.id);
    let _ = writeln!(out, "rate {}", fmt_f64(s.sample_rate_hz));
    let _ = writeln!(out, "horizon {} {}", s.h, s.f);
    let focal: Vec<String> = s.focal_ids.iter().map(|i| i.to_string()).collect();
    let _ = writeln!(out, "focal {}", focal.join(" "));
    for a in &s.agents {
        let _ = writeln!(
            out,
            "agent {} {} {} {}",
            a.id,
            a.category.as_str(),
            fmt_f64(a.length),
            fmt_f64(a.width)
        );
        for st in &a.states {
            let _ = writeln!(
                out,
                "state {} {} {} {} {} {}",
                fmt_f64(st.x),
                fmt_f64(st.y),
                fmt_f64(st.heading),
                fmt_f64(st.speed),
                fmt_f64(st.vel_dir),
                u8::from(st.observed)
            );
        }
    }
    for seg in &s.map.segments {
        let _ = writeln!(out, "segment {}", seg.id);
        for pl in &seg.polylines {
            let _ = writeln!(out, "polyline {} {}", pl.kind.as_str(), pl.points.len());
            for p in &pl.points {
                let _ = writeln!(out, "point {} {}", fmt_f64(p.0), fmt_f64(p.1));
            }
        }
    }
    for c in &s.map.connections {
        let _ = writeln!(
            out,
            "connection {} {} {} {}",
            c.from,
            c.to,
            c.kind.as_str(),
            c.hops
        );
    }
    out.push_str("end\n");
    out
}

pub fn save_scenario(path: &Path, s: &Scenario) -> Result<()> {
    std::fs::write(path, scenario_to_string(s))?;
    Ok(())
}

/// Cursor over whitespace-separated fields of one line, reporting the line
/// number and field name on any failure.
struct Fields<'a> {
    parts: std::str::SplitWhitespace<'a>,
    line: usize,
    record: &'a str,
}

impl<'a> Fields<'a> {
    fn new(text: &'a str, line: usize, record: &'a str) -> Self {
        Self {
            parts: text.split_whitespace(),
            line,
            record,
        }
    }

    fn err(&self, msg: String) -> Error {
        Error::Parse {
            line: self.line,
            msg,
        }
    }

    fn raw(&mut self, field: &str) -> Result<&'a str> {
        self.parts.next().ok_or_else(|| {
            Error::Parse {
                line: self.line,
                msg: format!("{} record: missing field {field:?}", self.record),
            }
        })
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        let raw = self.raw(field)?;
        raw.parse().map_err(|_| {
            self.err(format!(
                "{} record: field {field:?}: bad float {raw:?}",
                self.record
            ))
        })
    }

    fn usize(&mut self, field: &str) -> Result<usize> {
        let raw = self.raw(field)?;
        raw.parse().map_err(|_| {
            self.err(format!(
                "{} record: field {field:?}: bad integer {raw:?}",
                self.record
            ))
        })
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let raw = self.raw(field)?;
        raw.parse().map_err(|_| {
            self.err(format!(
                "{} record: field {field:?}: bad integer {raw:?}",
                self.record
            ))
        })
    }

    fn done(mut self) -> Result<()> {
        if let Some(extra) = self.parts.next() {
            return Err(Error::Parse {
                line: self.line,
                msg: format!("{} record: unexpected trailing field {extra:?}", self.record),
            });
        }
        Ok(())
    }
}

pub fn scenario_from_string(text: &str) -> Result<Scenario> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty file".into() })?;
    if header.trim() != SCENARIO_VERSION {
        return Err(Error::Version(format!(
            "expected {SCENARIO_VERSION:?}, found {:?}",
            header.trim()
        )));
    }

    let mut id = None;
    let mut rate = None;
    let mut horizon = None;
    let mut focal_ids = Vec::new();
    let mut agents: Vec<AgentTrack> = Vec::new();
    let mut segments: Vec<LaneSegment> = Vec::new();
    let mut connections = Vec::new();
    // Remaining points expected for the polyline currently being read.
    let mut pending_points = 0usize;
    let mut saw_end = false;

    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if saw_end {
            return Err(Error::Parse {
                line: lineno,
                msg: "content after \"end\"".into(),
            });
        }
        let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
        if pending_points > 0 && tag != "point" {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {pending_points} more point records, found {tag:?}"),
            });
        }
        match tag {
            "id" => {
                if rest.is_empty() {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "id record: missing field \"id\"".into(),
                    });
                }
                id = Some(rest.to_string());
            }
            "rate" => {
                let mut f = Fields::new(rest, lineno, "rate");
                rate = Some(f.f64("hz")?);
                f.done()?;
            }
            "horizon" => {
                let mut f = Fields::new(rest, lineno, "horizon");
                let h = f.usize("history_steps")?;
                let fut = f.usize("future_steps")?;
                f.done()?;
                horizon = Some((h, fut));
            }
            "focal" => {
                let mut f = Fields::new(rest, lineno, "focal");
                loop {
                    match f.parts.next() {
                        Some(raw) => focal_ids.push(raw.parse().map_err(|_| Error::Parse {
                            line: lineno,
                            msg: format!("focal record: bad id {raw:?}"),
                        })?),
                        None => break,
                    }
                }
            }
            "agent" => {
                let mut f = Fields::new(rest, lineno, "agent");
                let aid = f.u32("id")?;
                let cat_raw = f.raw("category")?;
                let category = Category::parse(cat_raw).ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("agent record: field \"category\": unknown value {cat_raw:?}"),
                })?;
                let length = f.f64("length")?;
                let width = f.f64("width")?;
                f.done()?;
                agents.push(AgentTrack {
                    id: aid,
                    category,
                    length,
                    width,
                    states: Vec::new(),
                });
            }
            "state" => {
                let track = agents.last_mut().ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: "state record before any agent record".into(),
                })?;
                let mut f = Fields::new(rest, lineno, "state");
                let x = f.f64("x")?;
                let y = f.f64("y")?;
                let heading = f.f64("heading")?;
                let speed = f.f64("speed")?;
                let vel_dir = f.f64("vel_dir")?;
                let obs = f.usize("observed")?;
                f.done()?;
                if obs > 1 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("state record: field \"observed\": expected 0 or 1, got {obs}"),
                    });
                }
                track.states.push(AgentState {
                    x,
                    y,
                    heading,
                    speed,
                    vel_dir,
                    observed: obs == 1,
                });
            }
            "segment" => {
                let mut f = Fields::new(rest, lineno, "segment");
                let sid = f.u32("id")?;
                f.done()?;
                segments.push(LaneSegment {
                    id: sid,
                    polylines: Vec::new(),
                });
            }
            "polyline" => {
                let seg = segments.last_mut().ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: "polyline record before any segment record".into(),
                })?;
                let mut f = Fields::new(rest, lineno, "polyline");
                let kind_raw = f.raw("kind")?;
                let kind = PolylineKind::parse(kind_raw).ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("polyline record: field \"kind\": unknown value {kind_raw:?}"),
                })?;
                let n = f.usize("num_points")?;
                f.done()?;
                seg.polylines.push(Polyline {
                    kind,
                    points: Vec::with_capacity(n),
                });
                pending_points = n;
            }
            "point" => {
                if pending_points == 0 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "point record outside a polyline".into(),
                    });
                }
                let mut f = Fields::new(rest, lineno, "point");
                let x = f.f64("x")?;
                let y = f.f64("y")?;
                f.done()?;
                segments
                    .last_mut()
                    .unwrap()
                    .polylines
                    .last_mut()
                    .unwrap()
                    .points
                    .push((x, y));
                pending_points -= 1;
            }
            "connection" => {
                let mut f = Fields::new(rest, lineno, "connection");
                let from = f.u32("from")?;
                let to = f.u32("to")?;
                let kind_raw = f.raw("kind")?;
                let kind = ConnectionKind::parse(kind_raw).ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("connection record: field \"kind\": unknown value {kind_raw:?}"),
                })?;
                let hops = f.u32("hops")?;
                f.done()?;
                connections.push(Connection {
                    from,
                    to,
                    kind,
                    hops,
                });
            }
            "end" => saw_end = true,
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("unknown record type {other:?}"),
                });
            }
        }
    }
    if !saw_end {
        return Err(Error::Parse {
            line: text.lines().count(),
            msg: "missing \"end\" record".into(),
        });
    }
    let (h, f) = horizon.ok_or_else(|| Error::Data("missing horizon record".into()))?;
    let scenario = Scenario {
        id: id.ok_or_else(|| Error::Data("missing id record".into()))?,
        sample_rate_hz: rate.ok_or_else(|| Error::Data("missing rate record".into()))?,
        h,
        f,
        agents,
        map: LaneGraph {
            segments,
            connections,
        },
        focal_ids,
    };
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    scenario_from_string(&std::fs::read_to_string(path)?)
}

pub fn save_split(path: &Path, m: &SplitManifest) -> Result<()> {
    m.validate()?;
    let mut out = String::new();
    let _ = writeln!(out, "{SPLIT_VERSION}");
    let _ = writeln!(out, "seed {}", m.seed);
    for (kind, count) in &m.kind_mix {
        let _ = writeln!(out, "mix {kind} {count}");
    }
    for f in &m.train {
        let _ = writeln!(out, "train {f}");
    }
    for f in &m.val {
        let _ = writeln!(out, "val {f}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<SplitManifest> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty file".into() })?;
    if header.trim() != SPLIT_VERSION {
        return Err(Error::Version(format!(
            "expected {SPLIT_VERSION:?}, found {:?}",
            header.trim()
        )));
    }
    let mut m = SplitManifest::default();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (tag, rest) = line.split_once(' ').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: format!("malformed record {line:?}"),
        })?;
        match tag {
            "seed" => {
                m.seed = rest.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("seed record: bad integer {rest:?}"),
                })?;
            }
            "mix" => {
                let mut f = Fields::new(rest, lineno, "mix");
                let kind = f.raw("kind")?.to_string();
                let count = f.usize("count")?;
                f.done()?;
                m.kind_mix.push((kind, count));
            }
            "train" => m.train.push(rest.to_string()),
            "val" => m.val.push(rest.to_string()),
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("unknown record type {other:?}"),
                });
            }
        }
    }
    m.validate()?;
    Ok(m)
}
