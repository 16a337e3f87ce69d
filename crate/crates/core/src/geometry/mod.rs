//! Scene geometry: pinhole projection of 3-D annotations, convex hulls of
//! projected boxes, and the hull-area foreground weight map.
//!
//! Frames: world and ego are x-forward, y-left, z-up. The camera frame is
//! x-right, y-down, z-forward (optical axis).

mod camera;
mod polygon;
mod raster;
mod weights;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use camera::{
    box_corners, box_hull, camera_to_pixel, project, world_to_camera, CameraIntrinsics, Pose, Projection,
    RigidTransform, Z_NEAR,
};
pub use camera::wrap_angle;
pub use polygon::{clip_polygon, convex_hull, orient, point_in_convex, polygon_area, Polygon2D, Rect};
pub use raster::{draw_polyline, fill_polygon, rasterize_conditions, CHANNEL_BOXES, CHANNEL_CROSSINGS, CHANNEL_LANES};
pub use weights::{box_weight_map, weight_map, WeightMap, WeightParams};

pub type Point2 = [f64; 2];
pub type Point3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Vehicle,
    Pedestrian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    /// Geometric centre, metres.
    pub center: Point3,
    /// Length (along heading), width, height in metres.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: ObjectClass,
}

impl Box3D {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.size.iter().all(|&s| s > 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(GeometryError::InvalidBox(format!("size {:?}", self.size)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineKind {
    LaneBoundary,
    PedestrianCrossing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Point3>,
    pub kind: PolylineKind,
}

impl Polyline {
    pub fn new(points: Vec<Point3>, kind: PolylineKind) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::InvalidPolyline(points.len()));
        }
        Ok(Self { points, kind })
    }
}

/// One frame of the annotation exchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub ego_pose: Pose,
    pub boxes: Vec<Box3D>,
    pub polylines: Vec<Polyline>,
}

/// Annotation document: `{frames, intrinsics, T_ego2cam}` with a row-major 4×4 transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDoc {
    pub frames: Vec<FrameAnnotation>,
    pub intrinsics: CameraIntrinsics,
    #[serde(rename = "T_ego2cam")]
    pub t_ego2cam: RigidTransform,
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate hull: points are coincident or collinear")]
    DegenerateHull,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid grid {0}x{1}")]
    InvalidGrid(usize, usize),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("polyline needs at least 2 points, got {0}")]
    InvalidPolyline(usize),
    #[error("transform is not a rigid 4x4 matrix: {0}")]
    InvalidTransform(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_json_shape() {
        let doc = AnnotationDoc {
            frames: vec![FrameAnnotation {
                ego_pose: Pose::new([1.0, 2.0, 0.0], 0.1),
                boxes: vec![Box3D {
                    center: [10.0, 0.0, 0.75],
                    size: [4.0, 2.0, 1.5],
                    yaw: 0.0,
                    class: ObjectClass::Vehicle,
                }],
                polylines: vec![Polyline::new(vec![[0.0, 1.0, 0.0], [5.0, 1.0, 0.0]], PolylineKind::LaneBoundary).unwrap()],
            }],
            intrinsics: CameraIntrinsics::new(128.0, 128.0, 64.0, 64.0, 128, 128).unwrap(),
            t_ego2cam: RigidTransform::front_camera(1.5),
        };
        let v: serde_json::Value = serde_json::to_value(&doc).unwrap();
        assert_eq!(v["T_ego2cam"][1][3], 1.5);
        assert_eq!(v["frames"][0]["boxes"][0]["class"], "vehicle");
        assert_eq!(v["frames"][0]["polylines"][0]["kind"], "lane_boundary");
        let back: AnnotationDoc = serde_json::from_value(v).unwrap();
        assert_eq!(back, doc);
    }

    #[test]
    fn short_polyline_rejected() {
        assert!(Polyline::new(vec![[0.0; 3]], PolylineKind::LaneBoundary).is_err());
    }
}
