use serde::{Deserialize, Serialize};

use super::{GeometryError, Point2};

/// Counter-clockwise (positive shoelace area in `(u, v)`) vertex loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon2D {
    pub vertices: Vec<Point2>,
}

impl Polygon2D {
    pub fn area(&self) -> f64 {
        polygon_area(self)
    }

    pub fn contains(&self, p: Point2) -> bool {
        point_in_convex(self, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min: Point2,
    pub max: Point2,
}

/// Twice the signed area of `(a, b, c)`; positive for a left turn.
pub fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Andrew's monotone chain. Collinear boundary points are dropped.
pub fn convex_hull(points: &[Point2]) -> Result<Polygon2D, GeometryError> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite hull input"));
    pts.dedup();
    if pts.len() < 3 {
        return Err(GeometryError::DegenerateHull);
    }
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && orient(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && orient(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        return Err(GeometryError::DegenerateHull);
    }
    Ok(Polygon2D { vertices: hull })
}

/// Absolute shoelace area; fewer than three vertices gives 0.
pub fn polygon_area(p: &Polygon2D) -> f64 {
    let v = &p.vertices;
    if v.len() < 3 {
        return 0.0;
    }
    let twice: f64 = (0..v.len())
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % v.len()]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice.abs() / 2.0
}

/// Inclusive containment test for a convex CCW polygon.
pub fn point_in_convex(poly: &Polygon2D, p: Point2) -> bool {
    let v = &poly.vertices;
    if v.len() < 3 {
        return false;
    }
    (0..v.len()).all(|i| orient(v[i], v[(i + 1) % v.len()], p) >= 0.0)
}

/// Sutherland–Hodgman clip of a convex polygon against an axis-aligned rectangle.
pub fn clip_polygon(poly: &Polygon2D, rect: &Rect) -> Option<Polygon2D> {
    // Each edge: (axis, bound, keep_greater)
    let edges = [
        (0, rect.min[0], true),
        (0, rect.max[0], false),
        (1, rect.min[1], true),
        (1, rect.max[1], false),
    ];
    let mut current = poly.vertices.clone();
    for (axis, bound, keep_greater) in edges {
        if current.is_empty() {
            break;
        }
        let inside = |p: &Point2| if keep_greater { p[axis] >= bound } else { p[axis] <= bound };
        let mut next = Vec::with_capacity(current.len() + 2);
        for i in 0..current.len() {
            let a = current[i];
            let b = current[(i + 1) % current.len()];
            match (inside(&a), inside(&b)) {
                (true, true) => next.push(b),
                (true, false) => next.push(cross_at(a, b, axis, bound)),
                (false, true) => {
                    next.push(cross_at(a, b, axis, bound));
                    next.push(b);
                }
                (false, false) => {}
            }
        }
        next.dedup();
        if next.len() > 1 && next.first() == next.last() {
            next.pop();
        }
        current = next;
    }
    let out = Polygon2D { vertices: current };
    if out.vertices.len() < 3 || out.area() <= 0.0 {
        None
    } else {
        Some(out)
    }
}

fn cross_at(a: Point2, b: Point2, axis: usize, bound: f64) -> Point2 {
    let t = (bound - a[axis]) / (b[axis] - a[axis]);
    let mut p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
    p[axis] = bound;
    p
}
