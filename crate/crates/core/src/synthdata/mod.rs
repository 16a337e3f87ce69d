//! Procedural driving scenes: a straight multi-lane road, an ego vehicle and
//! moving agents integrated at 12 Hz, rendered to grayscale frames and pooled
//! latents.

mod io;
mod render;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Box3D, CameraIntrinsics, GeometryError, ObjectClass, Polyline, PolylineKind, Pose, RigidTransform};
use crate::numerics::{seeded_rng, NumericsError, Tensor};

pub use io::{read_dataset, write_dataset, DATASET_VERSION};
pub use render::{background, decode_latent, encode_latent, render_frame};

/// Integration step: 12 Hz.
pub const DT: f64 = 1.0 / 12.0;
pub const FRAME_SIZE: usize = 128;
pub const LATENT_FACTOR: usize = 4;
pub const CAMERA_HEIGHT: f64 = 1.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Corrupt { path: String, message: String },
    #[error("dataset version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// The dataset camera: `fx = fy = 128`, principal point at the centre, 1.5 m up, looking along +x.
pub fn default_camera() -> (CameraIntrinsics, RigidTransform) {
    let s = FRAME_SIZE as f64;
    (
        CameraIntrinsics::new(s, s, s / 2.0, s / 2.0, FRAME_SIZE, FRAME_SIZE).expect("valid intrinsics"),
        RigidTransform::front_camera(CAMERA_HEIGHT),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub initial: Box3D,
    /// Speed along the heading, m/s.
    pub speed: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_frames: usize,
    pub ego_start: Pose,
    pub ego_speed: f64,
    pub ego_yaw_rate: f64,
    /// Lateral offsets (m) of the lane boundary lines.
    pub lane_offsets: Vec<f64>,
    /// Longitudinal position of a pedestrian crossing, if any.
    pub crossing_x: Option<f64>,
    pub agents: Vec<AgentSpec>,
    pub scenery: Scenery,
}

/// Rendered detail that is not part of the annotations: dashed paint on the
/// interior lane lines and posts along both road edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenery {
    pub dash_length: f64,
    pub dash_period: f64,
    pub dash_phase: f64,
    pub post_spacing: f64,
    pub post_phase: f64,
    pub post_height: f64,
}

/// Scenery is instantiated this far behind and ahead of the ego.
const SCENERY_BEHIND: f64 = 5.0;
const SCENERY_AHEAD: f64 = 120.0;
/// Lateral clearance of posts beyond the outer lane lines.
const POST_CLEARANCE: f64 = 2.0;

/// Road extent along x covered by the static map.
const ROAD_START: f64 = -60.0;
const ROAD_END: f64 = 2000.0;

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_frames < 2 {
            return Err(SynthError::InvalidSpec(format!("n_frames = {} < 2", self.n_frames)));
        }
        if !(2..=4).contains(&self.lane_offsets.len()) {
            return Err(SynthError::InvalidSpec(format!("{} lane lines", self.lane_offsets.len())));
        }
        for a in &self.agents {
            a.initial.validate()?;
            let [x, y, _] = a.initial.center;
            let dx = x - self.ego_start.position[0];
            let dy = y - self.ego_start.position[1];
            if !(-10.0..=90.0).contains(&dx) || dy.abs() > 20.0 {
                return Err(SynthError::InvalidSpec(format!("agent at ({x}, {y}) outside the workspace")));
            }
            if !(a.speed.is_finite() && a.yaw_rate.is_finite()) {
                return Err(SynthError::InvalidSpec("non-finite agent motion".into()));
            }
        }
        Ok(())
    }

    /// Random road, ego motion and 2–6 agents, deterministic in `seed`.
    pub fn random(seed: u64, n_frames: usize) -> Self {
        let mut rng = seeded_rng(seed);
        let lanes = rng.random_range(2..=4usize);
        let width = 3.5;
        let lane_offsets: Vec<f64> = (0..lanes).map(|i| (i as f64 - (lanes - 1) as f64 / 2.0) * width).collect();
        let ego_lane_y = if lanes == 2 { 0.0 } else { lane_offsets[0] + width / 2.0 };
        let ego_speed = rng.random_range(6.0..12.0);
        let crossing_x = rng.random_bool(0.5).then(|| rng.random_range(25.0..55.0));
        let dash_period = 9.0;
        let post_spacing = rng.random_range(8.0..16.0);
        let scenery = Scenery {
            dash_length: 3.0,
            dash_period,
            dash_phase: rng.random_range(0.0..dash_period),
            post_spacing,
            post_phase: rng.random_range(0.0..post_spacing),
            post_height: rng.random_range(3.0..4.5),
        };
        let n_agents = rng.random_range(2..=6);
        let mut agents = Vec::with_capacity(n_agents);
        for _ in 0..n_agents {
            let pedestrian = crossing_x.is_some() && rng.random_bool(0.25);
            if pedestrian {
                let cx = crossing_x.unwrap_or(30.0) + rng.random_range(0.5..2.5);
                let side: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                agents.push(AgentSpec {
                    initial: Box3D {
                        center: [cx, side * rng.random_range(4.0..8.0), 0.9],
                        size: [0.6, 0.6, 1.8],
                        yaw: -side * std::f64::consts::FRAC_PI_2,
                        class: ObjectClass::Pedestrian,
                    },
                    speed: rng.random_range(0.8..1.6),
                    yaw_rate: 0.0,
                });
            } else {
                let lane = rng.random_range(0..lanes - 1);
                let y = (lane_offsets[lane] + lane_offsets[lane + 1]) / 2.0;
                let oncoming = y > ego_lane_y + 0.1 && rng.random_bool(0.5);
                let (l, w, h) = (rng.random_range(3.8..5.0), rng.random_range(1.7..2.1), rng.random_range(1.4..2.0));
                agents.push(AgentSpec {
                    initial: Box3D {
                        center: [rng.random_range(8.0..80.0), y, h / 2.0],
                        size: [l, w, h],
                        yaw: if oncoming { -std::f64::consts::PI } else { 0.0 },
                        class: ObjectClass::Vehicle,
                    },
                    speed: if oncoming { rng.random_range(4.0..10.0) } else { rng.random_range(3.0..14.0) },
                    yaw_rate: 0.0,
                });
            }
        }
        Self {
            seed,
            n_frames,
            ego_start: Pose::new([0.0, ego_lane_y, 0.0], 0.0),
            ego_speed,
            ego_yaw_rate: 0.0,
            lane_offsets,
            crossing_x,
            agents,
            scenery,
        }
    }

    /// Indices `k` with `phase + k·period` inside the scenery window around `x`.
    fn window(x: f64, phase: f64, period: f64) -> impl Iterator<Item = f64> {
        let first = ((x - SCENERY_BEHIND - phase) / period).ceil() as i64;
        let last = ((x + SCENERY_AHEAD - phase) / period).floor() as i64;
        (first..=last).map(move |k| phase + k as f64 * period)
    }

    /// Painted strokes seen from `ego`: solid outer lines, dashed interior
    /// lines near the ego, and the crossing.
    pub fn strokes(&self, ego: &Pose) -> Vec<Polyline> {
        let n = self.lane_offsets.len();
        let sc = &self.scenery;
        let mut out = Vec::new();
        for (i, line) in self.map().into_iter().enumerate() {
            if i == 0 || i + 1 == n || i >= n {
                out.push(line);
                continue;
            }
            let y = self.lane_offsets[i];
            for x in Self::window(ego.position[0], sc.dash_phase, sc.dash_period) {
                out.push(Polyline {
                    points: vec![[x, y, 0.0], [x + sc.dash_length, y, 0.0]],
                    kind: PolylineKind::LaneBoundary,
                });
            }
        }
        out
    }

    /// Roadside posts near `ego`.
    pub fn posts(&self, ego: &Pose) -> Vec<Box3D> {
        let sc = &self.scenery;
        let lo = self.lane_offsets.first().copied().unwrap_or(0.0) - POST_CLEARANCE;
        let hi = self.lane_offsets.last().copied().unwrap_or(0.0) + POST_CLEARANCE;
        Self::window(ego.position[0], sc.post_phase, sc.post_spacing)
            .flat_map(|x| {
                [lo, hi].map(|y| Box3D {
                    center: [x, y, sc.post_height / 2.0],
                    size: [0.3, 0.3, sc.post_height],
                    yaw: 0.0,
                    class: ObjectClass::Vehicle,
                })
            })
            .collect()
    }

    /// The static map: lane boundaries plus the crossing outline.
    pub fn map(&self) -> Vec<Polyline> {
        let mut out: Vec<Polyline> = self
            .lane_offsets
            .iter()
            .map(|&y| Polyline {
                points: vec![[ROAD_START, y, 0.0], [ROAD_END, y, 0.0]],
                kind: PolylineKind::LaneBoundary,
            })
            .collect();
        if let Some(x) = self.crossing_x {
            let lo = self.lane_offsets.first().copied().unwrap_or(0.0);
            let hi = self.lane_offsets.last().copied().unwrap_or(0.0);
            out.push(Polyline {
                points: vec![[x, lo, 0.0], [x, hi, 0.0], [x + 3.0, hi, 0.0], [x + 3.0, lo, 0.0], [x, lo, 0.0]],
                kind: PolylineKind::PedestrianCrossing,
            });
        }
        out
    }

    /// Frame and latent of the world in `state`.
    pub fn render(
        &self,
        state: &SceneState,
        k: &CameraIntrinsics,
        t_ego2cam: &RigidTransform,
    ) -> Result<(Tensor, Tensor), SynthError> {
        let frame = render_frame(&state.ego, &state.boxes(), &self.strokes(&state.ego), &self.posts(&state.ego), k, t_ego2cam);
        let latent = encode_latent(&frame)?;
        Ok((frame, latent))
    }

    pub fn initial_state(&self) -> SceneState {
        SceneState {
            ego: self.ego_start,
            ego_speed: self.ego_speed,
            ego_yaw_rate: self.ego_yaw_rate,
            agents: self
                .agents
                .iter()
                .map(|a| AgentState {
                    bbox: a.initial,
                    speed: a.speed,
                    yaw_rate: a.yaw_rate,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub bbox: Box3D,
    pub speed: f64,
    pub yaw_rate: f64,
}

/// Kinematic state of the world at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub ego: Pose,
    pub ego_speed: f64,
    pub ego_yaw_rate: f64,
    pub agents: Vec<AgentState>,
}

fn advance_planar(position: [f64; 3], yaw: f64, speed: f64, yaw_rate: f64, dt: f64) -> ([f64; 3], f64) {
    let (s, c) = yaw.sin_cos();
    (
        [position[0] + speed * c * dt, position[1] + speed * s * dt, position[2]],
        yaw + yaw_rate * dt,
    )
}

impl SceneState {
    /// One explicit Euler step: position along the current heading, then heading by yaw rate.
    pub fn step(&self, dt: f64) -> Self {
        let (p, yaw) = advance_planar(self.ego.position, self.ego.yaw, self.ego_speed, self.ego_yaw_rate, dt);
        Self {
            ego: Pose::new(p, yaw),
            ego_speed: self.ego_speed,
            ego_yaw_rate: self.ego_yaw_rate,
            agents: self
                .agents
                .iter()
                .map(|a| {
                    let (center, yaw) = advance_planar(a.bbox.center, a.bbox.yaw, a.speed, a.yaw_rate, dt);
                    AgentState {
                        bbox: Box3D {
                            center,
                            yaw: wrap_angle(yaw),
                            ..a.bbox
                        },
                        ..*a
                    }
                })
                .collect(),
        }
    }

    pub fn boxes(&self) -> Vec<Box3D> {
        self.agents.iter().map(|a| a.bbox).collect()
    }
}

/// A generated scene with per-frame annotations, frames and latents.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub spec: SceneSpec,
    pub poses: Vec<Pose>,
    pub boxes: Vec<Vec<Box3D>>,
    pub map: Vec<Polyline>,
    /// `[1, 128, 128]` each.
    pub frames: Vec<Tensor>,
    /// `[1, 32, 32]` each.
    pub latents: Vec<Tensor>,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Kinematic state at frame `t`, replayed from its `SceneSpec`.
    pub fn state_at(&self, t: usize) -> SceneState {
        let mut s = self.spec.initial_state();
        for _ in 0..t {
            s = s.step(DT);
        }
        s
    }
}

/// Integrates and renders a scene.
pub fn gen_scene(spec: &SceneSpec) -> Result<SceneSequence, SynthError> {
    spec.validate()?;
    let (k, cam) = default_camera();
    let map = spec.map();
    let mut state = spec.initial_state();
    let n = spec.n_frames;
    let (mut poses, mut boxes, mut frames, mut latents) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for t in 0..n {
        if t > 0 {
            state = state.step(DT);
        }
        let (frame, latent) = spec.render(&state, &k, &cam)?;
        latents.push(latent);
        frames.push(frame);
        poses.push(state.ego);
        boxes.push(state.boxes());
    }
    Ok(SceneSequence {
        spec: spec.clone(),
        poses,
        boxes,
        map,
        frames,
        latents,
    })
}

/// Scenes sharing one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub t_ego2cam: RigidTransform,
    pub scenes: Vec<SceneSequence>,
}

impl Dataset {
    /// `n_scenes` random scenes; scene `i` uses seed `derive_seed(seed, [i])`.
    pub fn generate(seed: u64, n_scenes: usize, n_frames: usize) -> Result<Self, SynthError> {
        let (intrinsics, t_ego2cam) = default_camera();
        let scenes = (0..n_scenes)
            .map(|i| gen_scene(&SceneSpec::random(crate::numerics::derive_seed(seed, &[i as u64]), n_frames)))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            intrinsics,
            t_ego2cam,
            scenes,
        })
    }

    pub fn latent_intrinsics(&self) -> CameraIntrinsics {
        self.intrinsics.downscaled(LATENT_FACTOR)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn static_spec() -> SceneSpec {
        let mut s = SceneSpec::random(3, 6);
        s.ego_speed = 0.0;
        for a in &mut s.agents {
            a.speed = 0.0;
            a.yaw_rate = 0.0;
        }
        s
    }

    #[test]
    fn deterministic_from_seed() {
        let a = gen_scene(&SceneSpec::random(11, 5)).unwrap();
        let b = gen_scene(&SceneSpec::random(11, 5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(SceneSpec::random(11, 5), SceneSpec::random(12, 5));
    }

    #[test]
    fn static_world_frames_identical() {
        let s = gen_scene(&static_spec()).unwrap();
        for f in &s.frames[1..] {
            assert_eq!(f, &s.frames[0]);
        }
    }

    #[test]
    fn agent_advances_at_twelve_hertz() {
        let mut spec = static_spec();
        spec.agents[0].speed = 12.0;
        spec.agents[0].initial.yaw = 0.0;
        spec.n_frames = 13;
        let s = gen_scene(&spec).unwrap();
        let dx = s.boxes[12][0].center[0] - s.boxes[0][0].center[0];
        assert!((dx - 12.0).abs() < 1e-9);
    }

    #[test]
    fn shapes_and_ranges() {
        let s = gen_scene(&SceneSpec::random(5, 4)).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.frames[0].shape(), &[1, 128, 128]);
        assert_eq!(s.latents[0].shape(), &[1, 32, 32]);
        assert!(s.frames.iter().all(|f| f.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
        assert_eq!(s.state_at(3).ego, s.poses[3]);
        assert_eq!(s.state_at(3).boxes(), s.boxes[3]);
    }

    #[test]
    fn random_specs_validate() {
        for seed in 0..50 {
            SceneSpec::random(seed, 48).validate().unwrap();
        }
        let mut bad = SceneSpec::random(0, 48);
        bad.n_frames = 1;
        assert!(bad.validate().is_err());
        let mut bad = SceneSpec::random(0, 48);
        bad.lane_offsets.truncate(1);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scenery_window_follows_ego() {
        let mut spec = SceneSpec::random(4, 10);
        spec.lane_offsets = vec![-5.25, -1.75, 1.75, 5.25];
        let ego = Pose::new([100.0, 0.0, 0.0], 0.0);
        let posts = spec.posts(&ego);
        assert!(!posts.is_empty());
        for p in &posts {
            assert!(p.center[0] >= 100.0 - SCENERY_BEHIND && p.center[0] <= 100.0 + SCENERY_AHEAD);
            assert!(p.center[1].abs() > 5.25);
        }
        // Two interior lines become dashes; the outer two stay solid.
        let strokes = spec.strokes(&ego);
        let solid = strokes.iter().filter(|l| l.points[1][0] - l.points[0][0] > 100.0).count();
        assert_eq!(solid, 2);
        let dashes = strokes.iter().filter(|l| (l.points[1][0] - l.points[0][0] - 3.0).abs() < 1e-9).count();
        assert_eq!(dashes % 2, 0);
        assert!(dashes >= 2 * ((SCENERY_AHEAD + SCENERY_BEHIND) / spec.scenery.dash_period) as usize);
    }

    #[test]
    fn moving_ego_changes_frames() {
        let s = gen_scene(&SceneSpec::random(8, 3)).unwrap();
        assert!(s.latents[1].max_abs_diff(&s.latents[0]) > 0.05);
    }
}
