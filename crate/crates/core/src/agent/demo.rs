//! Demonstrations: keyframe discovery, augmentation and the JSON-lines file format.
//!
//! A demo file starts with one header object and holds one record per state:
//!
//! ```text
//! {"format":"qte-demos","version":1,"feature_dim":1,"proprio_dim":2}
//! {"demo":0,"step":0,"points":[..],"features":[..],"proprio":[..],"translation":[..],"rotation":[..],"gripper":0,"reward":0.0}
//! ```
//!
//! `points` is flattened xyz.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::AgentAction;
use crate::error::{QteError, Result};
use crate::voxelgrid::PointCloudObservation;

pub const DEMO_FORMAT: &str = "qte-demos";
pub const DEMO_VERSION: u32 = 1;

/// One recorded state: the observation there and the pose executed at it.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoState {
    pub obs: PointCloudObservation,
    pub action: AgentAction,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub states: Vec<DemoState>,
}

/// Indices of keyframes: gripper changes and the final state; with a
/// threshold, also states where the pose moved less than it.
pub fn keyframes(demo: &Demo, velocity_threshold: Option<f64>) -> Result<Vec<usize>> {
    let s = &demo.states;
    if s.len() < 2 {
        return Err(QteError::Data(format!("demo needs at least 2 states, got {}", s.len())));
    }
    let mut out = Vec::new();
    for i in 1..s.len() {
        let last = i == s.len() - 1;
        let toggled = s[i].action.gripper != s[i - 1].action.gripper;
        let slow = velocity_threshold.is_some_and(|v| {
            let a = s[i - 1].action.translation;
            let b = s[i].action.translation;
            (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt() < v
        });
        if last || toggled || slow {
            out.push(i);
        }
    }
    Ok(out)
}

/// `(start, keyframe)` pairs: every non-final state targets the next keyframe after it.
pub fn augmented_pairs(demo: &Demo, velocity_threshold: Option<f64>) -> Result<Vec<(usize, usize)>> {
    let keys = keyframes(demo, velocity_threshold)?;
    let mut out = Vec::new();
    let mut next = 0;
    for start in 0..demo.states.len() - 1 {
        while keys[next] <= start {
            next += 1;
        }
        out.push((start, keys[next]));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    feature_dim: usize,
    proprio_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    demo: usize,
    step: usize,
    points: Vec<f64>,
    features: Vec<f64>,
    proprio: Vec<f64>,
    translation: [f64; 3],
    rotation: [usize; 3],
    gripper: usize,
    reward: f64,
}

pub fn write_demos<W: Write>(demos: &[Demo], mut w: W) -> Result<()> {
    let first = demos
        .iter()
        .flat_map(|d| d.states.first())
        .next()
        .ok_or_else(|| QteError::Data("no demo states to write".into()))?;
    let header = Header {
        format: DEMO_FORMAT.into(),
        version: DEMO_VERSION,
        feature_dim: first.obs.feature_dim(),
        proprio_dim: first.obs.proprio().len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for (d, demo) in demos.iter().enumerate() {
        for (i, s) in demo.states.iter().enumerate() {
            let rec = Record {
                demo: d,
                step: i,
                points: s.obs.points().iter().flatten().copied().collect(),
                features: s.obs.features().to_vec(),
                proprio: s.obs.proprio().to_vec(),
                translation: s.action.translation,
                rotation: s.action.rotation,
                gripper: s.action.gripper,
                reward: s.reward,
            };
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn read_demos<R: BufRead>(r: R) -> Result<Vec<Demo>> {
    let mut lines = r.lines().enumerate().filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
    let err = |line: usize, msg: String| QteError::Data(format!("line {}: {msg}", line + 1));
    let (hl, header) = lines.next().ok_or_else(|| QteError::Data("empty demo file".into()))?;
    let header: Header = serde_json::from_str(&header?).map_err(|e| err(hl, e.to_string()))?;
    if header.format != DEMO_FORMAT || header.version != DEMO_VERSION {
        return Err(err(
            hl,
            format!("unsupported demo format {} v{}", header.format, header.version),
        ));
    }
    let mut demos: Vec<Demo> = Vec::new();
    for (ln, line) in lines {
        let rec: Record = serde_json::from_str(&line?).map_err(|e| err(ln, e.to_string()))?;
        if !rec.points.len().is_multiple_of(3) {
            return Err(err(ln, "point array length is not a multiple of 3".into()));
        }
        if rec.proprio.len() != header.proprio_dim {
            return Err(err(ln, "proprio length differs from header".into()));
        }
        if rec.demo == demos.len() {
            demos.push(Demo { states: Vec::new() });
        } else if rec.demo + 1 != demos.len() {
            return Err(err(ln, format!("demo index {} out of order", rec.demo)));
        }
        let demo = demos.last_mut().expect("pushed above");
        if rec.step != demo.states.len() {
            return Err(err(ln, format!("step {} out of order", rec.step)));
        }
        let points = rec.points.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let obs = PointCloudObservation::new(points, rec.features, header.feature_dim, rec.proprio)
            .map_err(|e| err(ln, e.to_string()))?;
        demo.states.push(DemoState {
            obs,
            action: AgentAction {
                translation: rec.translation,
                rotation: rec.rotation,
                gripper: rec.gripper,
            },
            reward: rec.reward,
        });
    }
    Ok(demos)
}
