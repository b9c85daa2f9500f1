//! The bundled benchmark paths.
//!
//! Each path is a list of points; headings and step indices are derived here.
//! Intermediate points become waypoints with fixed pose, spaced in time by
//! cumulative arc length.

use std::collections::BTreeMap;

use serde::Deserialize;

use super::{BoundaryState, OcpError, PathSpec, Waypoint};
use crate::params::ConstraintBounds;
use crate::se2::{wrap_angle, GroupPose};

const PATHS: &str = include_str!("../../data/paths.toml");

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PathFile {
    horizon: usize,
    step: f64,
    points: Vec<[f64; 2]>,
}

fn load(name: &str, bounds: ConstraintBounds) -> PathSpec {
    let all: BTreeMap<String, PathFile> = toml::from_str(PATHS).expect("bundled paths parse");
    let f = &all[name];
    path_spec_from_points(&f.points, f.horizon, f.step, bounds).expect("bundled path is valid")
}

/// Poses through `points`, at rest at both ends. The heading at an interior point
/// bisects the incoming and outgoing directions; at the ends it follows the
/// adjacent segment.
pub fn path_spec_from_points(points: &[[f64; 2]], horizon: usize, step: f64, bounds: ConstraintBounds) -> Result<PathSpec, OcpError> {
    if points.len() < 2 {
        return Err(OcpError::Spec("a path needs at least two points".into()));
    }
    let mut dirs = Vec::with_capacity(points.len() - 1);
    let mut lengths = Vec::with_capacity(points.len() - 1);
    for w in points.windows(2) {
        let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
        let len = dx.hypot(dy);
        if len == 0.0 {
            return Err(OcpError::Spec("repeated point".into()));
        }
        let raw = dy.atan2(dx);
        let d = match dirs.last() {
            Some(&prev) => prev + wrap_angle(raw - prev),
            None => raw,
        };
        dirs.push(d);
        lengths.push(len);
    }
    let total: f64 = lengths.iter().sum();
    let heading = |i: usize| {
        if i == 0 {
            dirs[0]
        } else if i == dirs.len() {
            dirs[i - 1]
        } else {
            0.5 * (dirs[i - 1] + dirs[i])
        }
    };
    let pose = |i: usize| GroupPose::new(points[i][0], points[i][1], heading(i));
    let mut arc = 0.0;
    let mut waypoints = Vec::new();
    for i in 1..points.len() - 1 {
        arc += lengths[i - 1];
        let k = (arc / total * horizon as f64).round() as usize;
        waypoints.push(Waypoint { k, pose: pose(i) });
    }
    let spec = PathSpec {
        start: BoundaryState::at_rest(pose(0)),
        end: BoundaryState::at_rest(pose(points.len() - 1)),
        waypoints,
        horizon,
        step,
        bounds,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn make_eight_knot_spec(bounds: ConstraintBounds) -> PathSpec {
    load("eight_knot", bounds)
}

pub fn make_zigzag_spec(bounds: ConstraintBounds) -> PathSpec {
    load("zigzag", bounds)
}

/// Eight knot, then on into the zig-zag.
pub fn make_full_spec(bounds: ConstraintBounds) -> PathSpec {
    load("full", bounds)
}
