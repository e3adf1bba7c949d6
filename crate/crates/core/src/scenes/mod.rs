//! Synthetic multi-agent scenes, their JSONL corpus format, and the
//! per-agent features the model conditions on.

mod features;
mod generate;
mod io;

pub use features::{
    canonical_future, constant_velocity_future, context_features, decode_future, CONTEXT_DIM,
    POSE_FEATURES,
};
pub use generate::{
    generate_corpus, generate_scenario, GeneratorParams, LayoutChoice, MIN_CLEARANCE,
};
pub use io::{
    read_corpus, read_corpus_file, write_corpus, write_corpus_file, CORPUS_FORMAT_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, Pose};

/// Seconds per step.
pub const DT: f64 = 0.5;
/// Future steps per agent.
pub const N_T: usize = 16;
/// History steps per agent, the last one at t = 0.
pub const N_HIST: usize = 6;
pub const MIN_AGENTS: usize = 2;
pub const MAX_AGENTS: usize = 8;
/// Speed bound used by the generator, in units per second.
pub const V_MAX: f64 = 1.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Intersection,
    Merge,
    Straight,
}

impl Layout {
    pub const ALL: [Layout; 3] = [Layout::Intersection, Layout::Merge, Layout::Straight];

    pub fn one_hot(self) -> [f64; 3] {
        let mut out = [0.0; 3];
        out[self as usize] = 1.0;
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intent {
    Left,
    Straight,
    Right,
    Stop,
}

impl Intent {
    pub const ALL: [Intent; 4] = [Intent::Left, Intent::Straight, Intent::Right, Intent::Stop];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub history: Vec<Point>,
    pub future: Vec<Point>,
    pub pose: Pose,
    /// Hidden label, never given to the model; stripped from exported corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<Intent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario_id: String,
    pub layout: Layout,
    pub seed: u64,
    pub agents: Vec<AgentTrack>,
}

impl Scenario {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.agents.len();
        if !(MIN_AGENTS..=MAX_AGENTS).contains(&n) {
            return Err(Error::InvalidArgument(format!(
                "scenario {}: {n} agents, expected {MIN_AGENTS}..={MAX_AGENTS}",
                self.scenario_id
            )));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.history.len() != N_HIST || a.future.len() != N_T {
                return Err(Error::InvalidArgument(format!(
                    "scenario {} agent {i}: expected {N_HIST} history and {N_T} future points, got {} and {}",
                    self.scenario_id,
                    a.history.len(),
                    a.future.len()
                )));
            }
            let finite = a
                .history
                .iter()
                .chain(&a.future)
                .flatten()
                .all(|v| v.is_finite())
                && [a.pose.x, a.pose.y, a.pose.heading]
                    .iter()
                    .all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidArgument(format!(
                    "scenario {} agent {i}: non-finite coordinates",
                    self.scenario_id
                )));
            }
        }
        Ok(())
    }

    /// Copy with the hidden intent labels removed.
    pub fn without_intents(&self) -> Scenario {
        let mut s = self.clone();
        s.agents.iter_mut().for_each(|a| a.intent = None);
        s
    }

    /// Ground-truth joint future, `[agent][t]`.
    pub fn joint_future(&self) -> Vec<Vec<Point>> {
        self.agents.iter().map(|a| a.future.clone()).collect()
    }
}
