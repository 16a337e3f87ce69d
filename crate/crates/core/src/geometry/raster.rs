use super::camera::{box_hull, camera_to_pixel, world_to_camera, CameraIntrinsics, Pose, RigidTransform, Z_NEAR};
use super::polygon::{point_in_convex, Polygon2D};
use super::{Box3D, Point2, Point3, Polyline, PolylineKind};
use crate::numerics::Tensor;

pub const CHANNEL_LANES: usize = 0;
pub const CHANNEL_CROSSINGS: usize = 1;
pub const CHANNEL_BOXES: usize = 2;

/// Calls `plot(row, col)` for every cell of the 1-pixel strokes of a world
/// polyline as seen from `ego`. Segments are clipped at the near plane and
/// the image border before stepping.
pub fn draw_polyline(
    points: &[Point3],
    ego: &Pose,
    t_ego2cam: &RigidTransform,
    k: &CameraIntrinsics,
    mut plot: impl FnMut(usize, usize),
) {
    let cam: Vec<Point3> = points.iter().map(|&p| world_to_camera(p, ego, t_ego2cam)).collect();
    for seg in cam.windows(2) {
        let (mut a, mut b) = (seg[0], seg[1]);
        if a[2] <= Z_NEAR && b[2] <= Z_NEAR {
            continue;
        }
        if a[2] <= Z_NEAR {
            a = near_point(b, a);
        } else if b[2] <= Z_NEAR {
            b = near_point(a, b);
        }
        let (pa, pb) = (camera_to_pixel(a, k), camera_to_pixel(b, k));
        if let Some((pa, pb)) = clip_segment(pa, pb, k.width as f64, k.height as f64) {
            bresenham(pa, pb, k.width, k.height, &mut plot);
        }
    }
}

fn near_point(front: Point3, back: Point3) -> Point3 {
    let t = (front[2] - Z_NEAR) / (front[2] - back[2]);
    [
        front[0] + t * (back[0] - front[0]),
        front[1] + t * (back[1] - front[1]),
        Z_NEAR,
    ]
}

/// Liang–Barsky clip of a segment to `[0, w] × [0, h]`.
fn clip_segment(a: Point2, b: Point2, w: f64, h: f64) -> Option<(Point2, Point2)> {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-dx, a[0]), (dx, w - a[0]), (-dy, a[1]), (dy, h - a[1])] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return None;
    }
    Some((
        [a[0] + t0 * dx, a[1] + t0 * dy],
        [a[0] + t1 * dx, a[1] + t1 * dy],
    ))
}

fn cell(v: f64, n: usize) -> i64 {
    (v.floor() as i64).clamp(0, n as i64 - 1)
}

fn bresenham(a: Point2, b: Point2, w: usize, h: usize, plot: &mut impl FnMut(usize, usize)) {
    let (mut x, mut y) = (cell(a[0], w), cell(a[1], h));
    let (x1, y1) = (cell(b[0], w), cell(b[1], h));
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        plot(y as usize, x as usize);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Calls `plot(row, col)` for every cell whose centre lies in the convex polygon.
pub fn fill_polygon(poly: &Polygon2D, width: usize, height: usize, mut plot: impl FnMut(usize, usize)) {
    if poly.vertices.len() < 3 {
        return;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for v in &poly.vertices {
        for d in 0..2 {
            lo[d] = lo[d].min(v[d]);
            hi[d] = hi[d].max(v[d]);
        }
    }
    let range = |lo: f64, hi: f64, n: usize| {
        let a = (lo - 0.5).ceil().max(0.0) as usize;
        let b = ((hi - 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
        a..b
    };
    for i in range(lo[1], hi[1], height) {
        for j in range(lo[0], hi[0], width) {
            if point_in_convex(poly, [j as f64 + 0.5, i as f64 + 0.5]) {
                plot(i, j);
            }
        }
    }
}

/// Binary condition raster `[3, H, W]` on the grid described by `k`: lane
/// strokes, crossing strokes, filled box hulls.
pub fn rasterize_conditions(
    polylines: &[Polyline],
    boxes: &[Box3D],
    ego: &Pose,
    t_ego2cam: &RigidTransform,
    k: &CameraIntrinsics,
) -> Tensor {
    let (h, w) = (k.height, k.width);
    let mut out = Tensor::zeros(&[3, h, w]);
    let data = out.data_mut();
    for line in polylines {
        let ch = match line.kind {
            PolylineKind::LaneBoundary => CHANNEL_LANES,
            PolylineKind::PedestrianCrossing => CHANNEL_CROSSINGS,
        };
        draw_polyline(&line.points, ego, t_ego2cam, k, |i, j| data[(ch * h + i) * w + j] = 1.0);
    }
    for b in boxes {
        if let Some((poly, _)) = box_hull(b, ego, t_ego2cam, k) {
            fill_polygon(&poly, w, h, |i, j| data[(CHANNEL_BOXES * h + i) * w + j] = 1.0);
        }
    }
    out
}
