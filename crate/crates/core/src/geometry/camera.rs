use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::polygon::{clip_polygon, convex_hull, Polygon2D, Rect};
use super::{Box3D, GeometryError, Point2, Point3};

/// Points at or closer than this depth (metres) are not projected.
pub const Z_NEAR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!("focal ({}, {})", self.fx, self.fy)));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics for an image resampled by `1/factor` (e.g. the latent grid).
    pub fn downscaled(&self, factor: usize) -> Self {
        let s = 1.0 / factor as f64;
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    pub fn image_rect(&self) -> Rect {
        Rect {
            min: [0.0, 0.0],
            max: [self.width as f64, self.height as f64],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Point3,
    pub yaw: f64,
}

impl Pose {
    pub fn new(position: Point3, yaw: f64) -> Self {
        Self {
            position,
            yaw: wrap_angle(yaw),
        }
    }
}

/// Wraps into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Row-major homogeneous rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform(pub [[f64; 4]; 4]);

impl RigidTransform {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self(m)
    }

    /// Ego → camera for a forward-looking camera mounted `height` metres above
    /// the ego origin: x_cam = −y_ego, y_cam = height − z_ego, z_cam = x_ego.
    pub fn front_camera(height: f64) -> Self {
        Self([
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, height],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let m = &self.0;
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::InvalidTransform(format!("last row {:?}", m[3])));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(GeometryError::InvalidTransform("rotation block is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let m = &self.0;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        out
    }
}

/// World point → camera frame through the ego pose and the mounting transform.
pub fn world_to_camera(p: Point3, ego: &Pose, t_ego2cam: &RigidTransform) -> Point3 {
    let d = [p[0] - ego.position[0], p[1] - ego.position[1], p[2] - ego.position[2]];
    let (s, c) = ego.yaw.sin_cos();
    let local = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    t_ego2cam.apply(local)
}

/// Pinhole projection of a camera-frame point; only meaningful for `z > 0`.
pub fn camera_to_pixel(p: Point3, k: &CameraIntrinsics) -> Point2 {
    [k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Point2,
    pub depth: f64,
    pub visible: bool,
}

pub fn project(points: &[Point3], ego: &Pose, t_ego2cam: &RigidTransform, k: &CameraIntrinsics) -> Vec<Projection> {
    points
        .iter()
        .map(|&p| {
            let pc = world_to_camera(p, ego, t_ego2cam);
            let visible = pc[2] > Z_NEAR;
            Projection {
                pixel: if visible { camera_to_pixel(pc, k) } else { [f64::NAN, f64::NAN] },
                depth: pc[2],
                visible,
            }
        })
        .collect()
}

/// Corner `i` has local signs `(bit0, bit1, bit2)` over `(l, w, h)`.
pub fn box_corners(b: &Box3D) -> [Point3; 8] {
    let [l, w, h] = b.size;
    let (s, c) = b.yaw.sin_cos();
    let mut out = [[0.0; 3]; 8];
    for (i, corner) in out.iter_mut().enumerate() {
        let sx = if i & 1 == 0 { -0.5 } else { 0.5 };
        let sy = if i & 2 == 0 { -0.5 } else { 0.5 };
        let sz = if i & 4 == 0 { -0.5 } else { 0.5 };
        let (lx, ly) = (sx * l, sy * w);
        *corner = [
            b.center[0] + c * lx - s * ly,
            b.center[1] + s * lx + c * ly,
            b.center[2] + sz * h,
        ];
    }
    out
}

fn lerp3(a: Point3, b: Point3, t: f64) -> Point3 {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

/// Projected convex hull of a box clipped to the image, with its clipped area.
///
/// Corners behind the near plane are replaced by the points where box edges
/// cross it. `None` if the box is entirely behind the camera or its hull does
/// not intersect the image.
pub fn box_hull(
    b: &Box3D,
    ego: &Pose,
    t_ego2cam: &RigidTransform,
    k: &CameraIntrinsics,
) -> Option<(Polygon2D, f64)> {
    let cam: Vec<Point3> = box_corners(b).iter().map(|&p| world_to_camera(p, ego, t_ego2cam)).collect();
    let mut pts = Vec::with_capacity(12);
    for (i, &p) in cam.iter().enumerate() {
        if p[2] > Z_NEAR {
            pts.push(camera_to_pixel(p, k));
        }
        for bit in [1, 2, 4] {
            let j = i | bit;
            if j == i {
                continue;
            }
            let q = cam[j];
            if (p[2] > Z_NEAR) != (q[2] > Z_NEAR) {
                let t = (Z_NEAR - p[2]) / (q[2] - p[2]);
                pts.push(camera_to_pixel(lerp3(p, q, t), k));
            }
        }
    }
    if pts.is_empty() {
        return None;
    }
    let hull = convex_hull(&pts).ok()?;
    let clipped = clip_polygon(&hull, &k.image_rect())?;
    let area = clipped.area();
    Some((clipped, area))
}
