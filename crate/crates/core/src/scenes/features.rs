//! Model-facing views of a scene: per-agent context features, canonical
//! futures, and the constant-velocity baseline.

use super::{AgentTrack, Scenario, DT, N_HIST, N_T};
use crate::error::{Error, Result};
use crate::geom::{Point, Pose};
use crate::tensor::Tensor;

/// Canonical history, layout one-hot, scene origin in the agent frame, pose.
pub const CONTEXT_DIM: usize = 2 * N_HIST + 3 + 2 + POSE_FEATURES;
/// The pose block (x, y, cos h, sin h) sits at the end of the features.
pub const POSE_FEATURES: usize = 4;

const HIST_SCALE: f64 = 4.0;
const POS_SCALE: f64 = 5.0;

/// `[N_a, CONTEXT_DIM]`. Every row depends only on its own agent and the
/// layout, so permuting agents permutes rows.
pub fn context_features(scene: &Scenario) -> Result<Tensor> {
    let mut data = Vec::with_capacity(scene.agents.len() * CONTEXT_DIM);
    for a in &scene.agents {
        if a.history.len() != N_HIST {
            return Err(Error::InvalidArgument(format!(
                "expected {N_HIST} history points"
            )));
        }
        for p in &a.history {
            let l = a.pose.to_local(*p);
            data.extend([l[0] / HIST_SCALE, l[1] / HIST_SCALE]);
        }
        data.extend(scene.layout.one_hot());
        let o = a.pose.to_local([0.0, 0.0]);
        data.extend([o[0] / POS_SCALE, o[1] / POS_SCALE]);
        data.extend([
            a.pose.x / POS_SCALE,
            a.pose.y / POS_SCALE,
            a.pose.heading.cos(),
            a.pose.heading.sin(),
        ]);
    }
    Tensor::new([scene.agents.len(), CONTEXT_DIM], data)
}

/// Future in the agent frame, flattened `[x0, y0, x1, y1, ...]`.
pub fn canonical_future(agent: &AgentTrack) -> Vec<f64> {
    agent
        .future
        .iter()
        .flat_map(|p| agent.pose.to_local(*p))
        .collect()
}

pub fn decode_future(flat: &[f64], pose: &Pose) -> Vec<Point> {
    flat.chunks(2)
        .map(|c| pose.to_scene([c[0], c[1]]))
        .collect()
}

/// Extrapolates the last history displacement.
pub fn constant_velocity_future(agent: &AgentTrack) -> Vec<Point> {
    let h = &agent.history;
    let last = h[h.len() - 1];
    let prev = h[h.len() - 2];
    let v = [(last[0] - prev[0]) / DT, (last[1] - prev[1]) / DT];
    (1..=N_T)
        .map(|k| {
            let t = k as f64 * DT;
            [last[0] + v[0] * t, last[1] + v[1] * t]
        })
        .collect()
}
