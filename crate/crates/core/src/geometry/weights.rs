use serde::{Deserialize, Serialize};

use super::camera::{box_hull, CameraIntrinsics, Pose, RigidTransform};
use super::polygon::{point_in_convex, Polygon2D};
use super::{Box3D, GeometryError};
use crate::numerics::Tensor;

/// Constants of the hull-area weighting: foreground `k / p^c`, background `1 / (H·W)^c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub k: f64,
    pub c: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        Self { k: 1.0, c: 0.5 }
    }
}

/// Per-cell loss weights over the latent grid, normalised to sum to `H·W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMap {
    pub values: Tensor,
}

impl WeightMap {
    pub fn uniform(h: usize, w: usize) -> Self {
        Self {
            values: Tensor::full(&[h, w], 1.0),
        }
    }
}

/// Builds the weight map from `(polygon, area)` pairs. A cell belongs to the
/// smallest-area polygon containing its centre; areas are clamped to ≥ 1.
pub fn weight_map(
    polygons: &[(Polygon2D, f64)],
    h: usize,
    w: usize,
    params: WeightParams,
) -> Result<WeightMap, GeometryError> {
    if h == 0 || w == 0 {
        return Err(GeometryError::InvalidGrid(h, w));
    }
    let mut order: Vec<(&Polygon2D, f64)> = polygons.iter().map(|(p, a)| (p, a.max(1.0))).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1));

    let hw = (h * w) as f64;
    let background = 1.0 / hw.powf(params.c);
    let mut raw = vec![background; h * w];
    for i in 0..h {
        for j in 0..w {
            let centre = [j as f64 + 0.5, i as f64 + 0.5];
            if let Some((_, area)) = order.iter().find(|(p, _)| point_in_convex(p, centre)) {
                raw[i * w + j] = params.k / area.powf(params.c);
            }
        }
    }
    let total: f64 = raw.iter().sum();
    let values = raw.iter().map(|&v| (hw * v / total) as f32).collect();
    Ok(WeightMap {
        values: Tensor::new(&[h, w], values).expect("shape matches"),
    })
}

/// Weight map for boxes projected with `k` (intrinsics of the latent grid).
pub fn box_weight_map(
    boxes: &[Box3D],
    ego: &Pose,
    t_ego2cam: &RigidTransform,
    k: &CameraIntrinsics,
    params: WeightParams,
) -> Result<WeightMap, GeometryError> {
    let hulls: Vec<(Polygon2D, f64)> = boxes.iter().filter_map(|b| box_hull(b, ego, t_ego2cam, k)).collect();
    weight_map(&hulls, k.height, k.width, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{convex_hull, ObjectClass};
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn rect_poly(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon2D {
        Polygon2D {
            vertices: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
        }
    }

    fn sum(m: &WeightMap) -> f64 {
        m.values.data().iter().map(|&v| v as f64).sum()
    }

    #[test]
    fn empty_is_uniform() {
        let m = weight_map(&[], 5, 7, WeightParams::default()).unwrap();
        assert!(m.values.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn worked_four_by_four() {
        let sq = rect_poly(1.0, 1.0, 3.0, 3.0);
        let area = sq.area();
        let m = weight_map(&[(sq, area)], 4, 4, WeightParams { k: 1.0, c: 1.0 }).unwrap();
        let v = m.values.data();
        // Hand evaluation: w'_fg = 1/4, w'_bg = 1/16, Σw' = 1.75.
        let fg = 16.0 * 0.25 / 1.75;
        let bg = 16.0 / 16.0 / 1.75;
        for i in 0..4 {
            for j in 0..4 {
                let want = if (1..3).contains(&i) && (1..3).contains(&j) { fg } else { bg };
                assert!((v[i * 4 + j] as f64 - want).abs() < 1e-6);
            }
        }
        assert!((fg - 2.2857).abs() < 1e-3 && (bg - 0.5714).abs() < 1e-3);
    }

    #[test]
    fn smallest_polygon_owns_overlap() {
        let big = rect_poly(0.0, 0.0, 4.0, 4.0);
        let small = rect_poly(0.0, 0.0, 1.0, 1.0);
        let m = weight_map(&[(big, 16.0), (small, 1.0)], 4, 4, WeightParams { k: 1.0, c: 1.0 }).unwrap();
        let v = m.values.data();
        // Raw: cell (0,0) → 1, the other 15 → 1/16; total 1 + 15/16.
        let total = 1.0 + 15.0 / 16.0;
        assert!((v[0] as f64 - 16.0 / total).abs() < 1e-5);
        assert!((v[5] as f64 - 1.0 / total).abs() < 1e-5);
    }

    #[test]
    fn invalid_grid() {
        assert_eq!(weight_map(&[], 0, 3, WeightParams::default()), Err(GeometryError::InvalidGrid(0, 3)));
    }

    #[test]
    fn random_configurations_normalise() {
        let mut rng = seeded_rng(5);
        for _ in 0..100 {
            let h = rng.random_range(1..40);
            let w = rng.random_range(1..40);
            let polys: Vec<(Polygon2D, f64)> = (0..rng.random_range(0..6))
                .filter_map(|_| {
                    let pts: Vec<[f64; 2]> = (0..6)
                        .map(|_| [rng.random_range(-5.0..w as f64 + 5.0), rng.random_range(-5.0..h as f64 + 5.0)])
                        .collect();
                    convex_hull(&pts).ok().map(|p| {
                        let a = p.area();
                        (p, a)
                    })
                })
                .collect();
            let params = WeightParams {
                k: rng.random_range(0.1..3.0),
                c: rng.random_range(0.0..1.5),
            };
            let m = weight_map(&polys, h, w, params).unwrap();
            assert!((sum(&m) - (h * w) as f64).abs() < 1e-4);
            assert!(m.values.data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn farther_box_cells_weigh_more() {
        let k = CameraIntrinsics::new(32.0, 32.0, 16.0, 16.0, 32, 32).unwrap();
        let cam = RigidTransform::front_camera(1.5);
        let ego = Pose::new([0.0; 3], 0.0);
        let mk = |x: f64, y: f64| Box3D {
            center: [x, y, 0.75],
            size: [4.0, 2.0, 1.5],
            yaw: 0.0,
            class: ObjectClass::Vehicle,
        };
        let m = box_weight_map(&[mk(8.0, 3.0), mk(30.0, -3.0)], &ego, &cam, &k, WeightParams::default()).unwrap();
        let max_near = hull_max(&m, &mk(8.0, 3.0), &ego, &cam, &k);
        let max_far = hull_max(&m, &mk(30.0, -3.0), &ego, &cam, &k);
        assert!(max_far > max_near);
    }

    fn hull_max(m: &WeightMap, b: &Box3D, ego: &Pose, cam: &RigidTransform, k: &CameraIntrinsics) -> f32 {
        let (poly, _) = box_hull(b, ego, cam, k).unwrap();
        let mut best = 0.0f32;
        for i in 0..k.height {
            for j in 0..k.width {
                if poly.contains([j as f64 + 0.5, i as f64 + 0.5]) {
                    best = best.max(m.values.data()[i * k.width + j]);
                }
            }
        }
        best
    }

    proptest! {
        #[test]
        fn smaller_area_strictly_heavier(a in 1.0f64..500.0, b in 1.0f64..500.0, c in 0.1f64..2.0, kk in 0.1f64..5.0) {
            prop_assume!((a / b).ln().abs() > 0.01);
            let pa = rect_poly(0.0, 0.0, 2.0, 2.0);
            let pb = rect_poly(10.0, 10.0, 12.0, 12.0);
            let m = weight_map(&[(pa, a), (pb, b)], 16, 16, WeightParams { k: kk, c }).unwrap();
            let (wa, wb) = (m.values.data()[0], m.values.data()[10 * 16 + 10]);
            prop_assert_eq!(a < b, wa > wb);
        }
    }
}
