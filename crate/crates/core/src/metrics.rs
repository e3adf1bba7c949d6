//! Greedy joint clustering and joint prediction metrics.
//!
//! A joint trajectory is indexed `[agent][t]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{dist, Point};

pub type Joint = Vec<Vec<Point>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteredPrediction {
    pub trajectories: Vec<Joint>,
    /// Nonincreasing, sums to 1.
    pub probabilities: Vec<f64>,
    /// Sample indices newly covered by each cluster; `centers[k]` picked it.
    pub members: Vec<Vec<usize>>,
    pub centers: Vec<usize>,
}

fn check_same_shape(a: &Joint, b: &Joint) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::InvalidArgument(format!(
            "joint trajectories differ in shape ({} vs {} agents)",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Largest per-agent, max-over-time distance between two joint samples.
pub fn joint_distance(a: &Joint, b: &Joint) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| dist(*p, *q)))
        .fold(0.0, f64::max)
}

/// `a` covers `b` when every agent stays within `tau` at every step.
pub fn covers(a: &Joint, b: &Joint, tau: f64) -> bool {
    joint_distance(a, b) <= tau
}

fn mean_joint(samples: &[Joint], idx: &[usize]) -> Joint {
    let first = &samples[idx[0]];
    let n = idx.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(a, traj)| {
            (0..traj.len())
                .map(|t| {
                    let (sx, sy) = idx
                        .iter()
                        .map(|&i| samples[i][a][t])
                        .fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
                    [sx / n, sy / n]
                })
                .collect()
        })
        .collect()
}

/// Greedy clustering: each of `k` rounds picks the sample that covers the
/// most not-yet-covered samples (lowest index on ties). Probabilities are
/// covered counts normalised by the total covered after `k` rounds.
pub fn cluster_joint(samples: &[Joint], k: usize, tau: f64) -> Result<ClusteredPrediction> {
    let n = samples.len();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "clustering needs N >= K >= 1 (N={n}, K={k})"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(
            "clustering threshold must be positive".into(),
        ));
    }
    for s in &samples[1..] {
        check_same_shape(&samples[0], s)?;
    }
    if n == k {
        return Ok(ClusteredPrediction {
            trajectories: samples.to_vec(),
            probabilities: vec![1.0 / n as f64; n],
            members: (0..n).map(|i| vec![i]).collect(),
            centers: (0..n).collect(),
        });
    }
    let cover: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| covers(&samples[i], &samples[j], tau))
                .collect()
        })
        .collect();
    let mut covered = vec![false; n];
    let mut used = vec![false; n];
    let mut out = ClusteredPrediction {
        trajectories: Vec::with_capacity(k),
        probabilities: Vec::with_capacity(k),
        members: Vec::with_capacity(k),
        centers: Vec::with_capacity(k),
    };
    for _ in 0..k {
        let mut best = (0usize, None::<usize>);
        for c in 0..n {
            let count = (0..n).filter(|&i| !covered[i] && cover[c][i]).count();
            if count > best.0 {
                best = (count, Some(c));
            }
        }
        match best.1 {
            Some(c) => {
                let members: Vec<usize> = (0..n).filter(|&i| !covered[i] && cover[c][i]).collect();
                members.iter().for_each(|&i| covered[i] = true);
                used[c] = true;
                out.trajectories.push(mean_joint(samples, &members));
                out.probabilities.push(members.len() as f64);
                out.members.push(members);
                out.centers.push(c);
            }
            None => {
                // everything is covered: pad with unused samples at zero probability
                let c = (0..n)
                    .find(|&i| !used[i])
                    .expect("n > k leaves an unused sample");
                used[c] = true;
                out.trajectories.push(samples[c].clone());
                out.probabilities.push(0.0);
                out.members.push(Vec::new());
                out.centers.push(c);
            }
        }
    }
    let total: f64 = out.probabilities.iter().sum();
    out.probabilities.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Mean over agents and steps of waypoint distance.
pub fn ade(pred: &Joint, gt: &Joint) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (sum, n) = pred
        .iter()
        .zip(gt)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| dist(*p, *q)))
        .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
    Ok(sum / n as f64)
}

/// Mean over agents of the final-step distance.
pub fn fde(pred: &Joint, gt: &Joint) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(x, y)| dist(*x.last().expect("nonempty"), *y.last().expect("nonempty")))
        .sum();
    Ok(sum / pred.len() as f64)
}

fn reduce(
    preds: &[Joint],
    gt: &Joint,
    f: fn(&Joint, &Joint) -> Result<f64>,
    min: bool,
) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let vals = preds.iter().map(|p| f(p, gt)).collect::<Result<Vec<_>>>()?;
    Ok(if min {
        vals.into_iter().fold(f64::INFINITY, f64::min)
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    })
}

pub fn min_sade(preds: &[Joint], gt: &Joint) -> Result<f64> {
    reduce(preds, gt, ade, true)
}

pub fn min_sfde(preds: &[Joint], gt: &Joint) -> Result<f64> {
    reduce(preds, gt, fde, true)
}

pub fn mean_sade(preds: &[Joint], gt: &Joint) -> Result<f64> {
    reduce(preds, gt, ade, false)
}

pub fn mean_sfde(preds: &[Joint], gt: &Joint) -> Result<f64> {
    reduce(preds, gt, fde, false)
}

/// Miss unless some prediction has every agent's final point within
/// `threshold` (closed boundary) of the ground truth.
pub fn is_miss(preds: &[Joint], gt: &Joint, threshold: f64) -> Result<bool> {
    for p in preds {
        check_same_shape(p, gt)?;
        let hit = p.iter().zip(gt).all(|(x, y)| {
            dist(*x.last().expect("nonempty"), *y.last().expect("nonempty")) <= threshold
        });
        if hit {
            return Ok(false);
        }
    }
    Ok(true)
}

/// True when two agents come strictly closer than `2 * radius` at some step.
pub fn has_overlap(joint: &Joint, radius: f64) -> bool {
    let n = joint.len();
    (0..n).any(|i| {
        (i + 1..n).any(|j| {
            joint[i]
                .iter()
                .zip(&joint[j])
                .any(|(p, q)| dist(*p, *q) < 2.0 * radius)
        })
    })
}

/// A target waypoint `(agent, t_index, position)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub agent: usize,
    pub t_index: usize,
    pub x: f64,
    pub y: f64,
}

/// Fraction of samples whose targeted waypoints all lie within `radius`.
pub fn success_rate(samples: &[Joint], targets: &[Target], radius: f64) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument(
            "success rate needs at least one target".into(),
        ));
    }
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for s in samples {
        let mut ok = true;
        for t in targets {
            let p = s
                .get(t.agent)
                .and_then(|a| a.get(t.t_index))
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "target ({}, {}) out of range",
                        t.agent, t.t_index
                    ))
                })?;
            ok &= dist(*p, [t.x, t.y]) <= radius;
        }
        hits += ok as usize;
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Mean norm of the second difference over all agents and interior steps.
pub fn smoothness(joint: &Joint) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for traj in joint {
        for w in traj.windows(3) {
            let a = [
                w[2][0] - 2.0 * w[1][0] + w[0][0],
                w[2][1] - 2.0 * w[1][1] + w[0][1],
            ];
            sum += (a[0] * a[0] + a[1] * a[1]).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Corpus-level metrics; field names follow the report schema.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "minSADE")]
    pub min_sade: f64,
    #[serde(rename = "minSFDE")]
    pub min_sfde: f64,
    #[serde(rename = "meanSADE")]
    pub mean_sade: f64,
    #[serde(rename = "meanSFDE")]
    pub mean_sfde: f64,
    #[serde(rename = "missRate")]
    pub miss_rate: f64,
    pub overlap: f64,
    /// Success rate keyed by radius (as a string, e.g. "0.1").
    pub sr: BTreeMap<String, f64>,
    pub scenes: usize,
}

/// Per-scene inputs to [`MetricsAccumulator`].
pub struct SceneEval<'a> {
    /// Clustered joint predictions, most likely first.
    pub clustered: &'a [Joint],
    /// All raw samples, for the mean variants.
    pub samples: &'a [Joint],
    pub gt: &'a Joint,
}

#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    sum: MetricsReport,
}

impl MetricsAccumulator {
    pub fn add(
        &mut self,
        s: &SceneEval<'_>,
        miss_threshold: f64,
        overlap_radius: f64,
    ) -> Result<()> {
        let r = &mut self.sum;
        r.min_sade += min_sade(s.clustered, s.gt)?;
        r.min_sfde += min_sfde(s.clustered, s.gt)?;
        r.mean_sade += mean_sade(s.samples, s.gt)?;
        r.mean_sfde += mean_sfde(s.samples, s.gt)?;
        r.miss_rate += is_miss(s.clustered, s.gt, miss_threshold)? as u8 as f64;
        r.overlap += has_overlap(&s.clustered[0], overlap_radius) as u8 as f64;
        r.scenes += 1;
        Ok(())
    }

    pub fn finish(self) -> MetricsReport {
        let mut r = self.sum;
        let n = r.scenes.max(1) as f64;
        for v in [
            &mut r.min_sade,
            &mut r.min_sfde,
            &mut r.mean_sade,
            &mut r.mean_sfde,
            &mut r.miss_rate,
            &mut r.overlap,
        ] {
            *v /= n;
        }
        r
    }
}
