use serde::{Deserialize, Serialize};
use std::ops::Mul;

/// Hamilton quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    /// Rotation by `angle` radians about unit `axis`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, axis[0] * s, axis[1] * s, axis[2] * s)
    }

    /// Exponential map of a rotation vector (axis times angle).
    pub fn from_rotation_vector(v: [f64; 3]) -> Self {
        let angle = norm3(v);
        if angle < 1e-12 {
            // Second-order Taylor expansion keeps tiny steps accurate.
            let q = Quat::new(1.0 - angle * angle / 8.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]);
            return q.normalized();
        }
        let axis = [v[0] / angle, v[1] / angle, v[2] / angle];
        Quat::from_axis_angle(axis, angle)
    }

    /// ZYX Euler angles: yaw about z, then pitch about y, then roll about x.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        Quat::from_axis_angle([0.0, 0.0, 1.0], yaw)
            * Quat::from_axis_angle([0.0, 1.0, 0.0], pitch)
            * Quat::from_axis_angle([1.0, 0.0, 0.0], roll)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Self {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Rotates a body-frame vector into the world frame.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let p = Quat::new(0.0, v[0], v[1], v[2]);
        let r = *self * p * self.conjugate();
        [r.x, r.y, r.z]
    }

    /// Roll, pitch, yaw (ZYX convention).
    pub fn to_euler(&self) -> [f64; 3] {
        let Quat { w, x, y, z } = *self;
        let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
        let sp = (2.0 * (w * y - z * x)).clamp(-1.0, 1.0);
        let pitch = sp.asin();
        let yaw = (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z));
        [roll, pitch, yaw]
    }

    /// Angle of the relative rotation between two orientations.
    pub fn angle_to(&self, other: &Quat) -> f64 {
        let d = (self.conjugate() * *other).normalized();
        2.0 * d.w.abs().min(1.0).acos()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

impl Mul for Quat {
    type Output = Quat;

    fn mul(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }
}

pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euler_round_trip() {
        let q = Quat::from_euler(0.3, -0.4, 2.0);
        let e = q.to_euler();
        assert!((e[0] - 0.3).abs() < 1e-12);
        assert!((e[1] + 0.4).abs() < 1e-12);
        assert!((e[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rotate_about_z() {
        let q = Quat::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let v = q.rotate([1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }
}
