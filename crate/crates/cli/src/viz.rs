//! Records for the Hopf-fibration renderer.

use serde::{Deserialize, Serialize};
use so3flow_core::so3::{hopf_coordinates, Rotation};

/// One point for the renderer: the image of the z-axis, the tilt about it
/// and a nonnegative weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VizRecord {
    pub dir: [f64; 3],
    pub tilt: f64,
    pub weight: f64,
}

impl VizRecord {
    pub fn new(r: &Rotation, weight: f64) -> Self {
        let (d, tilt) = hopf_coordinates(r);
        Self {
            dir: [d.x, d.y, d.z],
            tilt,
            weight,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn identity_points_up() {
        let v = VizRecord::new(&Rotation::identity(), 1.0);
        assert_eq!(v.dir, [0.0, 0.0, 1.0]);
        assert_eq!(v.tilt, 0.0);
    }

    #[test]
    fn half_turn_about_x_points_down() {
        let r = Rotation::from_axis_angle(&Vector3::x(), std::f64::consts::PI);
        let v = VizRecord::new(&r, 0.5);
        assert!((v.dir[0]).abs() < 1e-12 && (v.dir[1]).abs() < 1e-12);
        assert!((v.dir[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn tilt_is_fiber_angle() {
        let r = Rotation::from_axis_angle(&Vector3::z(), 0.7);
        let v = VizRecord::new(&r, 1.0);
        assert_eq!(v.dir, [0.0, 0.0, 1.0]);
        assert!((v.tilt - 0.7).abs() < 1e-12);
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.starts_with(r#"{"dir":[0.0,0.0,1.0],"tilt":"#));
    }
}
