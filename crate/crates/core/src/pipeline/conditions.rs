use super::PipelineError;
use crate::geometry::{
    box_weight_map, rasterize_conditions, Box3D, CameraIntrinsics, Polyline, Pose, RigidTransform, WeightMap, WeightParams,
};
use crate::numerics::Tensor;
use crate::synthdata::{Dataset, SceneSequence, SceneState, DT};

/// Projection setup for conditions on the latent grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionCamera {
    /// Intrinsics at latent resolution.
    pub k_latent: CameraIntrinsics,
    pub t_ego2cam: RigidTransform,
    pub weights: WeightParams,
}

impl ConditionCamera {
    pub fn for_dataset(ds: &Dataset, weights: WeightParams) -> Self {
        Self {
            k_latent: ds.latent_intrinsics(),
            t_ego2cam: ds.t_ego2cam,
            weights,
        }
    }

    /// Raster and loss weights of one annotated frame.
    pub fn conditions(&self, ego: &Pose, boxes: &[Box3D], map: &[Polyline]) -> Result<FrameConditions, PipelineError> {
        Ok(FrameConditions {
            raster: rasterize_conditions(map, boxes, ego, &self.t_ego2cam, &self.k_latent),
            weight_map: box_weight_map(boxes, ego, &self.t_ego2cam, &self.k_latent, self.weights)?,
        })
    }
}

/// Per-frame layout conditions projected into the front view.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameConditions {
    /// `[3, H, W]` lane, crossing and box channels.
    pub raster: Tensor,
    pub weight_map: WeightMap,
}

/// Conditions of every frame of an annotated scene.
pub fn scene_conditions(scene: &SceneSequence, cam: &ConditionCamera) -> Result<Vec<FrameConditions>, PipelineError> {
    scene
        .poses
        .iter()
        .zip(&scene.boxes)
        .map(|(p, b)| cam.conditions(p, b, &scene.map))
        .collect()
}

/// Constant-velocity, constant-yaw-rate extrapolation one frame ahead; the
/// static map is re-projected from the new ego pose.
pub fn predict_next_conditions(
    state: &SceneState,
    map: &[Polyline],
    cam: &ConditionCamera,
) -> Result<(SceneState, FrameConditions), PipelineError> {
    let next = state.step(DT);
    let cond = cam.conditions(&next.ego, &next.boxes(), map)?;
    Ok((next, cond))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{box_hull, ObjectClass};
    use crate::synthdata::{AgentState, SceneSpec};

    fn camera() -> ConditionCamera {
        let ds = Dataset::generate(0, 0, 1).unwrap();
        ConditionCamera::for_dataset(&ds, WeightParams::default())
    }

    fn car(x: f64, y: f64) -> Box3D {
        Box3D {
            center: [x, y, 0.8],
            size: [4.0, 2.0, 1.6],
            yaw: 0.0,
            class: ObjectClass::Vehicle,
        }
    }

    #[test]
    fn static_world_keeps_conditions() {
        let spec = SceneSpec::random(9, 2);
        let state = SceneState {
            ego: Pose::new([0.0, 0.0, 0.0], 0.0),
            ego_speed: 0.0,
            ego_yaw_rate: 0.0,
            agents: vec![AgentState {
                bbox: car(15.0, 2.0),
                speed: 0.0,
                yaw_rate: 0.0,
            }],
        };
        let cam = camera();
        let map = spec.map();
        let now = cam.conditions(&state.ego, &state.boxes(), &map).unwrap();
        let (_, next) = predict_next_conditions(&state, &map, &cam).unwrap();
        assert_eq!(next, now);
    }

    #[test]
    fn approaching_box_projects_larger() {
        let cam = camera();
        let b = car(10.0, 0.0);
        let here = Pose::new([0.0, 0.0, 0.0], 0.0);
        let ahead = Pose::new([1.0, 0.0, 0.0], 0.0);
        let (_, a0) = box_hull(&b, &here, &cam.t_ego2cam, &cam.k_latent).unwrap();
        let (_, a1) = box_hull(&b, &ahead, &cam.t_ego2cam, &cam.k_latent).unwrap();
        assert!(a1 > a0);
    }

    #[test]
    fn box_centres_follow_euler_kinematics() {
        let state = SceneState {
            ego: Pose::new([0.0, 0.0, 0.0], 0.0),
            ego_speed: 10.0,
            ego_yaw_rate: 0.0,
            agents: vec![AgentState {
                bbox: car(20.0, 3.5),
                speed: 6.0,
                yaw_rate: 0.0,
            }],
        };
        let (next, _) = predict_next_conditions(&state, &[], &camera()).unwrap();
        assert!((next.agents[0].bbox.center[0] - (20.0 + 6.0 * DT)).abs() < 1e-6);
        assert!((next.ego.position[0] - 10.0 * DT).abs() < 1e-6);
    }

    #[test]
    fn chained_predictions_match_annotations() {
        let ds = Dataset::generate(11, 1, 24).unwrap();
        let cam = ConditionCamera::for_dataset(&ds, WeightParams::default());
        let scene = &ds.scenes[0];
        let gt = scene_conditions(scene, &cam).unwrap();
        let mut state = scene.state_at(0);
        for want in &gt[1..] {
            let (next, cond) = predict_next_conditions(&state, &scene.map, &cam).unwrap();
            assert!(cond.raster.max_abs_diff(&want.raster) < 1e-3);
            assert!(cond.weight_map.values.max_abs_diff(&want.weight_map.values) < 1e-3);
            state = next;
        }
    }
}
