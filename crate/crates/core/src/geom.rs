//! Agent poses and the rigid transforms into and out of an agent's frame.

use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Radians, counter-clockwise from +x.
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose { x, y, heading }
    }

    /// Angle that rotates this pose's heading onto +y.
    fn to_local_angle(&self) -> f64 {
        std::f64::consts::FRAC_PI_2 - self.heading
    }

    pub fn to_local(&self, p: Point) -> Point {
        rotate([p[0] - self.x, p[1] - self.y], self.to_local_angle())
    }

    pub fn to_scene(&self, p: Point) -> Point {
        let r = rotate(p, -self.to_local_angle());
        [r[0] + self.x, r[1] + self.y]
    }

    /// Direction vector in the scene frame rotated into the local frame.
    pub fn dir_to_local(&self, v: Point) -> Point {
        rotate(v, self.to_local_angle())
    }
}

pub fn rotate(p: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Moves a trajectory into the agent frame: agent at the origin, heading +y.
pub fn canonicalize(traj: &[Point], pose: &Pose) -> Vec<Point> {
    traj.iter().map(|&p| pose.to_local(p)).collect()
}

pub fn decanonicalize(traj: &[Point], pose: &Pose) -> Vec<Point> {
    traj.iter().map(|&p| pose.to_scene(p)).collect()
}

pub fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let tau = 2.0 * std::f64::consts::PI;
    let mut r = a % tau;
    if r <= -std::f64::consts::PI {
        r += tau;
    } else if r > std::f64::consts::PI {
        r -= tau;
    }
    r
}
