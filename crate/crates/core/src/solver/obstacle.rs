//! Parametric rigid cup obstacle: rasterization and kinematics.

use crate::error::{LssError, Result};
use crate::field::{FlagGrid, MacField2};

/// Cup outline in body coordinates: two side walls and a bottom, open
/// towards body `+y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CupShape {
    pub outer_width: f64,
    pub outer_height: f64,
    pub wall: f64,
}

impl CupShape {
    /// Whether a body-frame point is inside the cup material.
    pub fn contains_body(&self, bx: f64, by: f64) -> bool {
        let hw = 0.5 * self.outer_width;
        let hh = 0.5 * self.outer_height;
        if bx.abs() >= hw || by.abs() >= hh {
            return false;
        }
        let in_cavity = bx.abs() < hw - self.wall && by > -hh + self.wall;
        !in_cavity
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstaclePose {
    /// Cup center in continuous grid coordinates.
    pub center: (f64, f64),
    /// Counter-clockwise rotation in radians.
    pub angle: f64,
    pub shape: CupShape,
}

impl ObstaclePose {
    pub fn to_body(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn to_world(&self, bx: f64, by: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (c * bx - s * by + self.center.0, s * bx + c * by + self.center.1)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (bx, by) = self.to_body(x, y);
        self.shape.contains_body(bx, by)
    }

    /// Checks that the whole cup lies strictly inside the fluid region of a
    /// `width x height` closed box.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let s = &self.shape;
        if !(s.outer_width > 2.0 * s.wall && s.outer_height > s.wall && s.wall > 0.0) {
            return Err(LssError::contract(format!("degenerate cup shape {s:?}")));
        }
        let hw = 0.5 * s.outer_width;
        let hh = 0.5 * s.outer_height;
        for (bx, by) in [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)] {
            let (x, y) = self.to_world(bx, by);
            if !(x > 1.0 && y > 1.0 && x < width as f64 - 1.0 && y < height as f64 - 1.0) {
                return Err(LssError::contract(format!(
                    "cup corner ({x:.2}, {y:.2}) leaves the {width}x{height} fluid domain"
                )));
            }
        }
        Ok(())
    }

    /// Displacement per unit time of the material point that sits at `pos`
    /// under `self`, having moved there from its location under `prev`.
    pub fn velocity_from(&self, prev: &ObstaclePose, dt: f64, pos: (f64, f64)) -> (f64, f64) {
        let (bx, by) = self.to_body(pos.0, pos.1);
        let (px, py) = prev.to_world(bx, by);
        ((pos.0 - px) / dt, (pos.1 - py) / dt)
    }
}

/// Closed box with every cell whose center lies inside the cup marked solid.
pub fn rasterize_obstacle(pose: &ObstaclePose, width: usize, height: usize) -> Result<FlagGrid> {
    pose.validate(width, height)?;
    let mut flags = FlagGrid::closed_box(width, height);
    for j in 0..height {
        for i in 0..width {
            if pose.contains(i as f64 + 0.5, j as f64 + 0.5) {
                flags.set_solid(i, j);
            }
        }
    }
    Ok(flags)
}

/// Obstacle velocity on every face touching a cup cell at `pose_t1`, zero
/// elsewhere.
pub fn obstacle_velocity(
    pose_t: &ObstaclePose,
    pose_t1: &ObstaclePose,
    dt: f64,
    width: usize,
    height: usize,
) -> Result<MacField2> {
    if pose_t.shape != pose_t1.shape {
        return Err(LssError::contract("obstacle poses must share one cup shape"));
    }
    if dt <= 0.0 {
        return Err(LssError::contract("dt must be positive"));
    }
    let cup = |i: usize, j: usize| pose_t1.contains(i as f64 + 0.5, j as f64 + 0.5);
    let mut u = MacField2::zeros(width, height);
    for j in 0..height {
        for i in 0..=width {
            let left = i > 0 && cup(i - 1, j);
            let right = i < width && cup(i, j);
            if left || right {
                let (vx, _) = pose_t1.velocity_from(pose_t, dt, (i as f64, j as f64 + 0.5));
                let k = u.x_idx(i, j);
                u.u_x[k] = vx;
            }
        }
    }
    for j in 0..=height {
        for i in 0..width {
            let below = j > 0 && cup(i, j - 1);
            let above = j < height && cup(i, j);
            if below || above {
                let (_, vy) = pose_t1.velocity_from(pose_t, dt, (i as f64 + 0.5, j as f64));
                let k = u.y_idx(i, j);
                u.u_y[k] = vy;
            }
        }
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::CellKind;
    use std::f64::consts::PI;

    fn cup(angle: f64) -> ObstaclePose {
        ObstaclePose {
            center: (24.0, 24.0),
            angle,
            shape: CupShape { outer_width: 10.0, outer_height: 12.0, wall: 2.0 },
        }
    }

    #[test]
    fn upright_cup_is_mirror_symmetric() {
        let f = rasterize_obstacle(&cup(0.0), 48, 48).unwrap();
        for j in 0..48 {
            for i in 0..48 {
                assert_eq!(f.get(i, j), f.get(47 - i, j), "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn half_turn_is_point_reflection() {
        let a = rasterize_obstacle(&cup(0.0), 48, 48).unwrap();
        let b = rasterize_obstacle(&cup(PI), 48, 48).unwrap();
        for j in 0..48 {
            for i in 0..48 {
                assert_eq!(b.get(i, j), a.get(47 - i, 47 - j));
            }
        }
    }

    #[test]
    fn channel_width_matches_wall_thickness() {
        let f = rasterize_obstacle(&cup(0.0), 48, 48).unwrap();
        // row through the upper part of the cup, above the bottom wall
        let j = 27;
        let solid: Vec<usize> = (0..48).filter(|&i| f.get(i, j) == CellKind::Solid && i > 0 && i < 47).collect();
        assert_eq!(solid, vec![19, 20, 27, 28]);
        let channel = (21..27).filter(|&i| f.is_fluid(i, j)).count();
        assert_eq!(channel, 6);
        // the bottom wall is solid across the full outer width
        assert!((19..29).all(|i| f.is_solid(i, 18) && f.is_solid(i, 19)));
    }

    #[test]
    fn cup_outside_domain_is_rejected() {
        let mut p = cup(0.0);
        p.center = (3.0, 24.0);
        assert!(matches!(rasterize_obstacle(&p, 48, 48), Err(LssError::Contract(_))));
    }

    #[test]
    fn static_pose_has_zero_velocity() {
        let u = obstacle_velocity(&cup(0.3), &cup(0.3), 0.5, 48, 48).unwrap();
        assert!(u.u_x.iter().chain(&u.u_y).all(|&v| v == 0.0));
    }

    #[test]
    fn translation_velocity_is_displacement_over_dt() {
        let a = cup(0.0);
        let mut b = a;
        b.center.0 += 1.0;
        let u = obstacle_velocity(&a, &b, 0.5, 48, 48).unwrap();
        let mut touched = 0;
        for j in 0..48 {
            for i in 0..=48 {
                let left = i > 0 && b.contains(i as f64 - 0.5, j as f64 + 0.5);
                let right = i < 48 && b.contains(i as f64 + 0.5, j as f64 + 0.5);
                if left || right {
                    assert!((u.ux(i, j) - 2.0).abs() < 1e-12);
                    touched += 1;
                } else {
                    assert_eq!(u.ux(i, j), 0.0);
                }
            }
        }
        assert!(touched > 20);
        assert!(u.u_y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rotation_velocity_is_tangential() {
        let a = cup(0.1);
        let dtheta = 1e-3;
        let b = cup(0.1 + dtheta);
        for &(x, y) in &[(27.0, 20.5), (20.5, 29.0), (22.0, 18.5), (28.5, 24.0)] {
            let (vx, vy) = b.velocity_from(&a, 0.5, (x, y));
            let (rx, ry) = (x - 24.0, y - 24.0);
            let r = (rx * rx + ry * ry).sqrt();
            let speed = (vx * vx + vy * vy).sqrt();
            assert!((speed - r * dtheta / 0.5).abs() <= 1e-3 * speed);
            // tangential: orthogonal to the radius up to O(dtheta)
            assert!((vx * rx + vy * ry).abs() <= 1e-3 * speed * r);
        }
    }
}
