//! Toy scene generator.
//!
//! Each agent approaches a decision point (stop line or lane-change start)
//! at distance `d0 = v * T_arr` and then follows a path picked by its intent.
//! Agents resolve conflicts by arrival order: the earlier agent keeps its
//! path, a conflicting later agent yields by stopping at its decision point.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{AgentTrack, Intent, Layout, Scenario, DT, MAX_AGENTS, MIN_AGENTS, N_HIST, N_T, V_MAX};
use crate::error::{Error, Result};
use crate::geom::{dist, rotate, Point, Pose};
use crate::rng::{self, Rng};

/// Ground-truth futures keep at least this distance between any two agents
/// at every step.
pub const MIN_CLEARANCE: f64 = 1.0;

const V_MIN: f64 = 0.6;
const STOP_LINE: f64 = 1.5;
const LANE_INNER: f64 = 0.6;
const LANE_OUTER: f64 = 1.2;
const LEFT_RADIUS: f64 = 2.0;
const RIGHT_RADIUS: f64 = 1.2;
const LANE_WIDTH: f64 = 1.2;
const LANE_CHANGE_LEN: f64 = 3.0;
const RAMP_ANGLE: f64 = 0.35;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutChoice {
    Intersection,
    Merge,
    Straight,
    Mixed,
}

impl LayoutChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "intersection" => Some(Self::Intersection),
            "merge" => Some(Self::Merge),
            "straight" => Some(Self::Straight),
            "mixed" => Some(Self::Mixed),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub layout: LayoutChoice,
    pub min_agents: usize,
    pub max_agents: usize,
    /// Probabilities of left, straight, right, stop.
    pub intent_prior: [f64; 4],
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            layout: LayoutChoice::Intersection,
            min_agents: 2,
            max_agents: 4,
            intent_prior: [0.25; 4],
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.intent_prior.iter().sum();
        if self.intent_prior.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "intent prior must be nonnegative and sum to 1".into(),
            ));
        }
        let cap = if self.layout == LayoutChoice::Intersection {
            4
        } else {
            MAX_AGENTS
        };
        if self.min_agents < MIN_AGENTS
            || self.max_agents > cap
            || self.min_agents > self.max_agents
        {
            return Err(Error::InvalidArgument(format!(
                "agent count range {}..={} outside {MIN_AGENTS}..={cap} for this layout",
                self.min_agents, self.max_agents
            )));
        }
        Ok(())
    }
}

/// Local frame: agent travels along +y; mapped to the scene by `frame`.
#[derive(Clone, Debug)]
struct Plan {
    frame: Pose,
    start: Point,
    speed: f64,
    d0: f64,
    intent: Intent,
    kind: PathKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PathKind {
    Turn,
    LaneChange,
}

impl Plan {
    fn to_scene(&self, p: Point) -> Point {
        let r = rotate(p, self.frame.heading - FRAC_PI_2);
        [r[0] + self.frame.x, r[1] + self.frame.y]
    }

    /// Local point after travelling `s` along the intended path.
    fn along(&self, s: f64, intent: Intent) -> Point {
        let [x0, y0] = self.start;
        let d0 = self.d0;
        if s <= d0 || matches!(intent, Intent::Straight | Intent::Stop) {
            return [x0, y0 + s];
        }
        let u = s - d0;
        match self.kind {
            PathKind::Turn => {
                let (r, side) = if intent == Intent::Left {
                    (LEFT_RADIUS, -1.0)
                } else {
                    (RIGHT_RADIUS, 1.0)
                };
                let arc = r * FRAC_PI_2;
                let yc = y0 + d0;
                if u <= arc {
                    let th = u / r;
                    [x0 + side * (r - r * th.cos()), yc + r * th.sin()]
                } else {
                    [x0 + side * (r + (u - arc)), yc + r]
                }
            }
            PathKind::LaneChange => {
                let side = if intent == Intent::Left { -1.0 } else { 1.0 };
                let w = (u / LANE_CHANGE_LEN).min(1.0);
                [
                    x0 + side * LANE_WIDTH * 0.5 * (1.0 - (PI * w).cos()),
                    y0 + s,
                ]
            }
        }
    }

    /// Distance travelled at time `t`, stopping at the decision point when
    /// `stop` is set.
    fn travelled(&self, t: f64, stop: bool) -> f64 {
        if !stop {
            return self.speed * t;
        }
        let a = self.speed * self.speed / (2.0 * self.d0);
        let t_stop = self.speed / a;
        if t >= t_stop {
            self.d0
        } else {
            self.speed * t - 0.5 * a * t * t
        }
    }

    fn future(&self, yielding: bool) -> Vec<Point> {
        let stop = yielding || self.intent == Intent::Stop;
        (1..=N_T)
            .map(|k| {
                let s = self.travelled(k as f64 * DT, stop);
                self.to_scene(self.along(s, self.intent))
            })
            .collect()
    }

    fn history(&self) -> Vec<Point> {
        (0..N_HIST)
            .rev()
            .map(|k| {
                let back = self.speed * k as f64 * DT;
                self.to_scene([self.start[0], self.start[1] - back])
            })
            .collect()
    }

    fn pose(&self) -> Pose {
        let p = self.to_scene(self.start);
        Pose::new(p[0], p[1], self.frame.heading)
    }
}

fn sample_intent(r: &mut Rng, prior: &[f64; 4]) -> Intent {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (p, it) in prior.iter().zip(Intent::ALL) {
        acc += p;
        if u < acc {
            return it;
        }
    }
    Intent::Stop
}

fn pick_layout(r: &mut Rng, choice: LayoutChoice) -> Layout {
    match choice {
        LayoutChoice::Intersection => Layout::Intersection,
        LayoutChoice::Merge => Layout::Merge,
        LayoutChoice::Straight => Layout::Straight,
        LayoutChoice::Mixed => Layout::ALL[r.random_range(0..3)],
    }
}

fn plan_agents(r: &mut Rng, layout: Layout, intents: &[Intent]) -> Vec<Plan> {
    let mut arms = [FRAC_PI_2, -FRAC_PI_2, 0.0, PI];
    rand::seq::SliceRandom::shuffle(&mut arms[..], r);
    intents
        .iter()
        .enumerate()
        .map(|(i, &intent)| {
            // a lane change adds lateral speed; its peak is `speed * lane_change_stretch()`
            let v_top = if layout == Layout::Intersection {
                V_MAX
            } else {
                V_MAX / lane_change_stretch()
            };
            let speed = r.random_range(V_MIN..v_top);
            let t_arr = r.random_range(1.0..2.0);
            let d0 = speed * t_arr;
            match layout {
                Layout::Intersection => {
                    // lane cue: left turns from the inner lane, right turns from the outer one
                    let lane = match intent {
                        Intent::Left => LANE_INNER,
                        Intent::Right => LANE_OUTER,
                        _ => {
                            if r.random::<bool>() {
                                LANE_INNER
                            } else {
                                LANE_OUTER
                            }
                        }
                    };
                    Plan {
                        frame: Pose::new(0.0, 0.0, arms[i]),
                        start: [lane, -STOP_LINE - d0],
                        speed,
                        d0,
                        intent,
                        kind: PathKind::Turn,
                    }
                }
                Layout::Straight => {
                    let lane = LANE_WIDTH * r.random_range(-1i32..=1) as f64;
                    Plan {
                        frame: Pose::new(0.0, 0.0, FRAC_PI_2),
                        start: [lane, r.random_range(-4.0..2.0)],
                        speed,
                        d0,
                        intent,
                        kind: PathKind::LaneChange,
                    }
                }
                Layout::Merge => {
                    // the first agent is on the ramp, the rest pick a road at random
                    let ramp = i == 0 || r.random::<bool>();
                    let heading = if ramp {
                        FRAC_PI_2 + RAMP_ANGLE
                    } else {
                        FRAC_PI_2
                    };
                    let frame_x = if ramp {
                        0.0
                    } else {
                        -LANE_WIDTH * r.random_range(0i32..=1) as f64
                    };
                    Plan {
                        frame: Pose::new(frame_x, 0.0, heading),
                        start: [0.0, -1.0 - d0 - r.random_range(0.0..3.0)],
                        speed,
                        d0,
                        intent,
                        kind: PathKind::LaneChange,
                    }
                }
            }
        })
        .collect()
}

fn lane_change_stretch() -> f64 {
    (1.0 + (PI * LANE_WIDTH / (2.0 * LANE_CHANGE_LEN)).powi(2)).sqrt()
}

fn clear(a: &[Point], b: &[Point]) -> bool {
    a.iter().zip(b).all(|(p, q)| dist(*p, *q) >= MIN_CLEARANCE)
}

/// Resolves conflicts in arrival order. `None` if even yielding cannot keep
/// the clearance.
fn resolve(plans: &[Plan]) -> Option<Vec<Vec<Point>>> {
    let mut order: Vec<usize> = (0..plans.len()).collect();
    order.sort_by(|&i, &j| {
        (plans[i].d0 / plans[i].speed).total_cmp(&(plans[j].d0 / plans[j].speed))
    });
    let mut futures: Vec<Option<Vec<Point>>> = vec![None; plans.len()];
    for &i in &order {
        let ok = |f: &Vec<Point>| futures.iter().flatten().all(|g| clear(f, g));
        let nominal = plans[i].future(false);
        let chosen = if ok(&nominal) {
            nominal
        } else {
            let yielded = plans[i].future(true);
            if !ok(&yielded) {
                return None;
            }
            yielded
        };
        futures[i] = Some(chosen);
    }
    let histories_clear = (0..plans.len())
        .all(|i| (i + 1..plans.len()).all(|j| clear(&plans[i].history(), &plans[j].history())));
    if !histories_clear {
        return None;
    }
    futures.into_iter().collect()
}

/// Deterministic scenario from `seed`.
pub fn generate_scenario(
    seed: u64,
    params: &GeneratorParams,
    scenario_id: impl Into<String>,
) -> Result<Scenario> {
    params.validate()?;
    let mut r = rng::seeded(seed);
    let layout = pick_layout(&mut r, params.layout);
    let cap = if layout == Layout::Intersection {
        4
    } else {
        MAX_AGENTS
    };
    let max_agents = params.max_agents.min(cap);
    let min_agents = params.min_agents.min(max_agents);
    let n = r.random_range(min_agents..=max_agents);
    // intents are drawn before any resampling so their frequencies follow the prior
    let intents: Vec<Intent> = (0..n)
        .map(|_| sample_intent(&mut r, &params.intent_prior))
        .collect();
    for _ in 0..MAX_ATTEMPTS {
        let plans = plan_agents(&mut r, layout, &intents);
        if let Some(futures) = resolve(&plans) {
            let agents = plans
                .iter()
                .zip(futures)
                .map(|(p, future)| AgentTrack {
                    history: p.history(),
                    future,
                    pose: p.pose(),
                    intent: Some(p.intent),
                })
                .collect();
            return Ok(Scenario {
                scenario_id: scenario_id.into(),
                layout,
                seed,
                agents,
            });
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not place {n} non-conflicting agents after {MAX_ATTEMPTS} attempts"
    )))
}

/// `n` scenarios; scenario `i` uses the child seed `split(root_seed, i)`.
pub fn generate_corpus(
    root_seed: u64,
    n: usize,
    params: &GeneratorParams,
) -> Result<Vec<Scenario>> {
    (0..n)
        .map(|i| generate_scenario(rng::split(root_seed, i as u64), params, format!("s{i:06}")))
        .collect()
}
