use crate::geometry::{
    box_hull, draw_polyline, fill_polygon, world_to_camera, Box3D, CameraIntrinsics, ObjectClass, Polyline,
    PolylineKind, Pose, RigidTransform,
};
use crate::numerics::{kernels, NumericsError, Tensor};

use super::LATENT_FACTOR;

const LANE_VALUE: f32 = 0.95;
const CROSSING_VALUE: f32 = 0.85;

/// Sky above the image centre row fading from bright to mid grey, ground below
/// darkening towards the horizon.
pub fn background(height: usize, width: usize) -> Tensor {
    let mut out = Tensor::zeros(&[1, height, width]);
    let horizon = height as f32 / 2.0;
    for (i, row) in out.data_mut().chunks_mut(width).enumerate() {
        let y = i as f32 + 0.5;
        let v = if y < horizon {
            0.8 - 0.2 * y / horizon
        } else {
            0.2 + 0.15 * (y - horizon) / (height as f32 - horizon)
        };
        row.fill(v);
    }
    out
}

/// Brightness of an agent at camera depth `depth`; strictly decreasing in depth.
fn agent_shade(class: ObjectClass, depth: f64) -> f32 {
    let near = 8.0 / (8.0 + depth.max(0.0));
    match class {
        ObjectClass::Vehicle => (0.05 + 0.6 * near) as f32,
        ObjectClass::Pedestrian => (0.1 + 0.85 * near) as f32,
    }
}

fn post_shade(depth: f64) -> f32 {
    (0.25 + 0.35 * 8.0 / (8.0 + depth.max(0.0))) as f32
}

/// Painter's-algorithm render: background, painted strokes, then agent and
/// post hulls from far to near.
pub fn render_frame(
    ego: &Pose,
    boxes: &[Box3D],
    strokes: &[Polyline],
    posts: &[Box3D],
    k: &CameraIntrinsics,
    t_ego2cam: &RigidTransform,
) -> Tensor {
    let (h, w) = (k.height, k.width);
    let mut img = background(h, w);
    let data = img.data_mut();
    for line in strokes {
        let v = match line.kind {
            PolylineKind::LaneBoundary => LANE_VALUE,
            PolylineKind::PedestrianCrossing => CROSSING_VALUE,
        };
        draw_polyline(&line.points, ego, t_ego2cam, k, |i, j| data[i * w + j] = v);
    }
    let depth = |b: &Box3D| world_to_camera(b.center, ego, t_ego2cam)[2];
    let mut order: Vec<(f64, &Box3D, f32)> = boxes
        .iter()
        .map(|b| (depth(b), b, agent_shade(b.class, depth(b))))
        .chain(posts.iter().map(|p| (depth(p), p, post_shade(depth(p)))))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, b, v) in order {
        if let Some((poly, _)) = box_hull(b, ego, t_ego2cam, k) {
            fill_polygon(&poly, w, h, |i, j| data[i * w + j] = v);
        }
    }
    img
}

/// Latent encoder: a fixed 4× average pool.
pub fn encode_latent(frame: &Tensor) -> Result<Tensor, NumericsError> {
    let [c, h, w] = frame.dims3("encode_latent")?;
    let pooled = kernels::avg_pool(frame.data(), c, h, w, LATENT_FACTOR);
    Tensor::new(&[c, h / LATENT_FACTOR, w / LATENT_FACTOR], pooled)
}

/// Latent decoder: nearest-neighbour 4× upsampling, clamped to `[0, 1]`.
pub fn decode_latent(latent: &Tensor) -> Result<Tensor, NumericsError> {
    let [c, h, w] = latent.dims3("decode_latent")?;
    let up = kernels::upsample_nearest(latent.data(), c, h, w, LATENT_FACTOR);
    Tensor::new(&[c, h * LATENT_FACTOR, w * LATENT_FACTOR], up).map(|t| t.map(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::default_camera;

    fn vehicle(x: f64, y: f64) -> Box3D {
        Box3D {
            center: [x, y, 0.8],
            size: [4.0, 2.0, 1.6],
            yaw: 0.0,
            class: ObjectClass::Vehicle,
        }
    }

    #[test]
    fn decode_inverts_encode_on_blocks() {
        let lat = Tensor::new(&[1, 2, 2], vec![0.1, 0.4, 0.7, 1.0]).unwrap();
        let back = encode_latent(&decode_latent(&lat).unwrap()).unwrap();
        assert!(back.max_abs_diff(&lat) < 1e-6);
    }

    #[test]
    fn empty_scene_is_background() {
        let (k, cam) = default_camera();
        let img = render_frame(&Pose::new([0.0; 3], 0.0), &[], &[], &[], &k, &cam);
        assert_eq!(img, background(128, 128));
    }

    #[test]
    fn nearer_agent_occludes_farther() {
        let (k, cam) = default_camera();
        let ego = Pose::new([0.0; 3], 0.0);
        let (near, far) = (vehicle(10.0, 0.0), vehicle(20.0, 0.0));
        let img = render_frame(&ego, &[near, far], &[], &[], &k, &cam);
        let near_v = agent_shade(ObjectClass::Vehicle, world_to_camera(near.center, &ego, &cam)[2]);
        // The centre pixel is covered by both hulls.
        assert_eq!(img.data()[64 * 128 + 64], near_v);
        let swapped = render_frame(&ego, &[far, near], &[], &[], &k, &cam);
        assert_eq!(img, swapped);
    }

    #[test]
    fn brightness_falls_with_depth() {
        let (k, cam) = default_camera();
        let ego = Pose::new([0.0; 3], 0.0);
        let a = render_frame(&ego, &[vehicle(10.0, 0.0)], &[], &[], &k, &cam);
        let b = render_frame(&ego, &[vehicle(15.0, 0.0)], &[], &[], &k, &cam);
        assert!(a.data()[64 * 128 + 64] > b.data()[64 * 128 + 64]);
        for d in [1.0, 5.0, 20.0, 80.0] {
            assert!(agent_shade(ObjectClass::Pedestrian, d) > agent_shade(ObjectClass::Pedestrian, d + 0.5));
        }
    }

    #[test]
    fn hull_pixels_are_painted_pixels() {
        let (k, cam) = default_camera();
        let ego = Pose::new([0.0; 3], 0.0);
        let b = vehicle(12.0, 2.0);
        let img = render_frame(&ego, &[b], &[], &[], &k, &cam);
        let bg = background(128, 128);
        let (poly, _) = box_hull(&b, &ego, &cam, &k).unwrap();
        let shade = agent_shade(ObjectClass::Vehicle, world_to_camera(b.center, &ego, &cam)[2]);
        for i in 0..128 {
            for j in 0..128 {
                let inside = poly.contains([j as f64 + 0.5, i as f64 + 0.5]);
                let v = img.data()[i * 128 + j];
                if inside {
                    assert_eq!(v, shade);
                } else {
                    assert_eq!(v, bg.data()[i * 128 + j]);
                }
            }
        }
    }

    #[test]
    fn latent_preserves_mean() {
        let (k, cam) = default_camera();
        let img = render_frame(&Pose::new([0.0; 3], 0.0), &[vehicle(9.0, -1.0)], &[], &[], &k, &cam);
        let lat = encode_latent(&img).unwrap();
        assert_eq!(lat.shape(), &[1, 32, 32]);
        assert!((lat.mean() - img.mean()).abs() < 1e-6);
    }
}
