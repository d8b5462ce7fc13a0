//! Cuboid geometry: surface queries, face sampling, and ray casting. Parts
//! are axis-aligned boxes in their own frame; a rigid isometry places each
//! one in the world.

use nalgebra::{Isometry3, Point3, Unit, UnitQuaternion, Vector3};

/// Axis-aligned box centered at the origin of its own frame.
#[derive(Clone, Copy, Debug)]
pub struct Cuboid {
    pub half: Vector3<f64>,
}

/// One of the six faces, identified by axis and sign.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Face {
    pub axis: usize,
    pub positive: bool,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face { axis: 0, positive: true },
        Face { axis: 0, positive: false },
        Face { axis: 1, positive: true },
        Face { axis: 1, positive: false },
        Face { axis: 2, positive: true },
        Face { axis: 2, positive: false },
    ];

    pub fn normal(&self) -> Vector3<f64> {
        let mut n = Vector3::zeros();
        n[self.axis] = if self.positive { 1.0 } else { -1.0 };
        n
    }
}

impl Cuboid {
    pub fn new(hx: f64, hy: f64, hz: f64) -> Self {
        Self { half: Vector3::new(hx, hy, hz) }
    }

    pub fn face_area(&self, face: Face) -> f64 {
        let (u, v) = tangent_axes(face.axis);
        4.0 * self.half[u] * self.half[v]
    }

    /// Point on a face from two coordinates in [-1, 1].
    pub fn face_point(&self, face: Face, u: f64, v: f64) -> Point3<f64> {
        let (ua, va) = tangent_axes(face.axis);
        let mut p = Point3::origin();
        p[face.axis] = if face.positive { self.half[face.axis] } else { -self.half[face.axis] };
        p[ua] = u * self.half[ua];
        p[va] = v * self.half[va];
        p
    }

    /// Unsigned distance from a point (in the box frame) to the box surface.
    pub fn surface_distance(&self, p: &Point3<f64>) -> f64 {
        let dx = p.x.abs() - self.half.x;
        let dy = p.y.abs() - self.half.y;
        let dz = p.z.abs() - self.half.z;
        let inside = dx.max(dy).max(dz);
        if inside <= 0.0 {
            -inside
        } else {
            Vector3::new(dx.max(0.0), dy.max(0.0), dz.max(0.0)).norm()
        }
    }

    /// Face a surface point lies on: the axis with the smallest slack, ties
    /// broken in x, y, z order. Meaningful only for points near the surface.
    pub fn surface_face(&self, p: &Point3<f64>) -> Face {
        let mut best_axis = 0;
        let mut best_slack = f64::INFINITY;
        for axis in 0..3 {
            let slack = self.half[axis] - p[axis].abs();
            if slack < best_slack {
                best_slack = slack;
                best_axis = axis;
            }
        }
        Face { axis: best_axis, positive: p[best_axis] >= 0.0 }
    }

    /// Distance from a surface point to the nearest box edge: the
    /// second-smallest slack over the three axes. Zero on edges and corners.
    pub fn edge_distance(&self, p: &Point3<f64>) -> f64 {
        let mut slacks = [
            (self.half.x - p.x.abs()).abs(),
            (self.half.y - p.y.abs()).abs(),
            (self.half.z - p.z.abs()).abs(),
        ];
        slacks.sort_by(|a, b| a.partial_cmp(b).expect("finite slack"));
        slacks[1]
    }

    /// Entry distance of a ray (unit direction) into the box, if it hits.
    pub fn ray_entry(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut tmin = f64::NEG_INFINITY;
        let mut tmax = f64::INFINITY;
        for axis in 0..3 {
            let h = self.half[axis];
            if dir[axis].abs() < 1e-15 {
                if origin[axis].abs() > h {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[axis];
            let mut t0 = (-h - origin[axis]) * inv;
            let mut t1 = (h - origin[axis]) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            tmin = tmin.max(t0);
            tmax = tmax.min(t1);
            if tmin > tmax {
                return None;
            }
        }
        if tmax < 0.0 {
            return None;
        }
        Some(tmin.max(0.0))
    }
}

/// The two in-plane axes of a face on `axis`.
pub fn tangent_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        2 => (0, 1),
        _ => unreachable!("axis out of range"),
    }
}

/// Rotation of `angle` about the line through `origin` with direction `dir`.
pub fn rotation_about_line(
    origin: &Point3<f64>,
    dir: &Unit<Vector3<f64>>,
    angle: f64,
) -> Isometry3<f64> {
    let q = UnitQuaternion::from_axis_angle(dir, angle);
    Isometry3::rotation_wrt_point(q, *origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ray_hits_box_front_face() {
        let b = Cuboid::new(1.0, 2.0, 3.0);
        let t = b
            .ray_entry(&Point3::new(5.0, 0.0, 0.0), &Vector3::new(-1.0, 0.0, 0.0))
            .expect("hit");
        assert_relative_eq!(t, 4.0);
    }

    #[test]
    fn ray_misses_box_beside_it() {
        let b = Cuboid::new(1.0, 1.0, 1.0);
        assert!(b.ray_entry(&Point3::new(5.0, 3.0, 0.0), &Vector3::new(-1.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn ray_starting_inside_reports_zero_entry() {
        let b = Cuboid::new(1.0, 1.0, 1.0);
        let t = b.ray_entry(&Point3::origin(), &Vector3::new(1.0, 0.0, 0.0)).expect("hit");
        assert_eq!(t, 0.0);
    }

    #[test]
    fn surface_distance_vanishes_on_faces_and_grows_outside() {
        let b = Cuboid::new(1.0, 0.5, 0.25);
        assert_relative_eq!(b.surface_distance(&Point3::new(1.0, 0.0, 0.0)), 0.0);
        assert_relative_eq!(b.surface_distance(&Point3::new(2.0, 0.0, 0.0)), 1.0);
        assert_relative_eq!(b.surface_distance(&Point3::new(0.0, 0.0, 0.0)), 0.25);
    }

    #[test]
    fn edge_distance_is_zero_on_edges_and_face_distance_in_the_middle() {
        let b = Cuboid::new(1.0, 1.0, 1.0);
        // Middle of the +x face: one unit from every edge of that face.
        assert_relative_eq!(b.edge_distance(&Point3::new(1.0, 0.0, 0.0)), 1.0);
        // On the x/y edge.
        assert_relative_eq!(b.edge_distance(&Point3::new(1.0, 1.0, 0.3)), 0.0);
        // Near the edge.
        assert_relative_eq!(b.edge_distance(&Point3::new(1.0, 0.99, 0.0)), 0.01, epsilon = 1e-12);
    }

    #[test]
    fn surface_face_picks_the_touching_axis() {
        let b = Cuboid::new(1.0, 2.0, 3.0);
        let f = b.surface_face(&Point3::new(-1.0, 0.5, 1.0));
        assert_eq!(f, Face { axis: 0, positive: false });
    }

    #[test]
    fn rotation_about_line_fixes_points_on_the_line() {
        let o = Point3::new(0.0, 2.0, 0.0);
        let d = Unit::new_normalize(Vector3::z());
        let iso = rotation_about_line(&o, &d, 1.1);
        let moved = iso * Point3::new(0.0, 2.0, 5.0);
        assert_relative_eq!(moved.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(moved.y, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn face_area_matches_hand_computation() {
        let b = Cuboid::new(1.0, 2.0, 3.0);
        assert_relative_eq!(b.face_area(Face { axis: 0, positive: true }), 24.0);
        assert_relative_eq!(b.face_area(Face { axis: 2, positive: false }), 8.0);
    }
}
