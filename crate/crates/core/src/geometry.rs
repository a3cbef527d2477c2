//! Exact 2-D polygon primitives for word quadrilaterals.
//!
//! All coordinates are image pixels with the y axis pointing down, so a
//! quadrilateral listed clockwise on screen has a *positive* shoelace sum.
//! Intersection areas are computed by clipping one convex polygon against the
//! half-planes of the other.

use std::f64::consts::FRAC_PI_2;

use log::warn;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-convex quadrilateral in strict mode: {0:?}")]
    NonConvexInput(Quadrilateral),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    fn midpoint(self, o: Point2) -> Point2 {
        Point2::new(0.5 * (self.x + o.x), 0.5 * (self.y + o.y))
    }
}

/// How to treat quadrilaterals that are not convex when clipping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClipMode {
    /// Replace a non-convex input by its convex hull and log a warning.
    #[default]
    Lenient,
    /// Reject non-convex input.
    Strict,
}

/// Four ordered vertices, clockwise on screen starting top-left.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quadrilateral {
    pub vertices: [Point2; 4],
}

impl Quadrilateral {
    pub const fn new(vertices: [Point2; 4]) -> Self {
        Self { vertices }
    }

    /// Builds a quad from `x1,y1,...,x4,y4`.
    pub fn from_coords(c: [f64; 8]) -> Self {
        Self::new([
            Point2::new(c[0], c[1]),
            Point2::new(c[2], c[3]),
            Point2::new(c[4], c[5]),
            Point2::new(c[6], c[7]),
        ])
    }

    /// Axis-aligned rectangle with top-left corner `(x, y)`.
    pub fn axis_aligned(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::from_coords([x, y, x + w, y, x + w, y + h, x, y + h])
    }

    /// Rectangle of the given side lengths centred at `center`, rotated by
    /// `angle` radians (clockwise on screen).
    pub fn rotated_rect(center: Point2, long: f64, short: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let (hw, hh) = (0.5 * long, 0.5 * short);
        let corner = |dx: f64, dy: f64| {
            Point2::new(center.x + dx * c - dy * s, center.y + dx * s + dy * c)
        };
        Self::new([
            corner(-hw, -hh),
            corner(hw, -hh),
            corner(hw, hh),
            corner(-hw, hh),
        ])
        .normalized()
    }

    pub fn coords(&self) -> [f64; 8] {
        let v = &self.vertices;
        [v[0].x, v[0].y, v[1].x, v[1].y, v[2].x, v[2].y, v[3].x, v[3].y]
    }

    pub fn is_finite(&self) -> bool {
        self.vertices.iter().all(Point2::is_finite)
    }

    /// Shoelace sum halved; positive for clockwise-on-screen order.
    pub fn signed_area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    pub fn is_degenerate(&self) -> bool {
        polygon_area(self) <= f64::EPSILON
    }

    pub fn is_convex(&self) -> bool {
        let v = &self.vertices;
        let mut sign = 0.0f64;
        for i in 0..4 {
            let e0 = v[(i + 1) % 4].sub(v[i]);
            let e1 = v[(i + 2) % 4].sub(v[(i + 1) % 4]);
            let c = e0.cross(e1);
            if c.abs() <= 1e-12 {
                continue;
            }
            if sign == 0.0 {
                sign = c.signum();
            } else if c.signum() != sign {
                return false;
            }
        }
        true
    }

    pub fn centroid(&self) -> Point2 {
        let v = &self.vertices;
        Point2::new(
            0.25 * (v[0].x + v[1].x + v[2].x + v[3].x),
            0.25 * (v[0].y + v[1].y + v[2].y + v[3].y),
        )
    }

    /// Returns the same polygon listed clockwise on screen, starting at the
    /// vertex with the smallest `x + y` (ties: smallest `y`).
    pub fn normalized(&self) -> Self {
        let mut v = self.vertices;
        if shoelace(&v) < 0.0 {
            v.reverse();
        }
        let start = (0..4)
            .min_by(|&a, &b| {
                let ka = (v[a].x + v[a].y, v[a].y);
                let kb = (v[b].x + v[b].y, v[b].y);
                ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(0);
        v.rotate_left(start);
        Self::new(v)
    }

    pub fn contains(&self, p: Point2) -> bool {
        point_in_polygon(p, &self.vertices)
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|p| Point2::new(p.x * s, p.y * s))
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        self.map(|p| Point2::new(p.x + dx, p.y + dy))
    }

    pub fn map(&self, f: impl Fn(Point2) -> Point2) -> Self {
        Self::new(self.vertices.map(f))
    }

    /// Axis-aligned bounds `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), p| (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y)),
        )
    }
}

fn shoelace(pts: &[Point2]) -> f64 {
    let n = pts.len();
    let mut s = 0.0;
    for i in 0..n {
        s += pts[i].cross(pts[(i + 1) % n]);
    }
    0.5 * s
}

fn point_in_polygon(p: Point2, pts: &[Point2]) -> bool {
    // Crossing test, with points on an edge counted as inside.
    let n = pts.len();
    let mut inside = false;
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        let ab = b.sub(a);
        let ap = p.sub(a);
        if ab.cross(ap).abs() <= 1e-9 * (1.0 + ab.dot(ab)) {
            let t = ap.dot(ab);
            if t >= 0.0 && t <= ab.dot(ab) {
                return true;
            }
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

pub fn polygon_area(q: &Quadrilateral) -> f64 {
    q.signed_area().abs()
}

/// Convex hull (clockwise on screen) of a point set, Andrew's monotone chain.
fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point2> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point2>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                if b.sub(a).cross(p.sub(a)) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    // Monotone chain yields counter-clockwise in y-up terms, i.e. positive
    // shoelace; that is already clockwise on screen.
    hull
}

/// Orients a quad as a convex, positive-area vertex loop ready for clipping.
fn clip_ready(q: &Quadrilateral, mode: ClipMode) -> Result<Vec<Point2>, GeometryError> {
    if !q.is_convex() {
        match mode {
            ClipMode::Strict => return Err(GeometryError::NonConvexInput(*q)),
            ClipMode::Lenient => {
                warn!("non-convex quadrilateral, using its convex hull: {:?}", q.coords());
                return Ok(convex_hull(&q.vertices));
            }
        }
    }
    let mut v = q.vertices.to_vec();
    if shoelace(&v) < 0.0 {
        v.reverse();
    }
    Ok(v)
}

/// Clips `subject` against every edge of the convex positive-area `clip` loop.
fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output = subject.to_vec();
    let mut input = Vec::with_capacity(subject.len() + clip.len());
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        std::mem::swap(&mut input, &mut output);
        output.clear();
        let a = clip[i];
        let edge = clip[(i + 1) % n].sub(a);
        // Inside is the left side of each edge for positive orientation.
        let side = |p: Point2| edge.cross(p.sub(a));
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(lerp(prev, cur, sp / (sp - sc)));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(lerp(prev, cur, sp / (sp - sc)));
            }
        }
    }
    output
}

fn lerp(a: Point2, b: Point2, t: f64) -> Point2 {
    Point2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
}

/// Area of `a ∩ b`; non-convex inputs fall back to their convex hulls.
pub fn intersection_area(a: &Quadrilateral, b: &Quadrilateral) -> f64 {
    try_intersection_area(a, b, ClipMode::Lenient).unwrap_or(0.0)
}

pub fn try_intersection_area(
    a: &Quadrilateral,
    b: &Quadrilateral,
    mode: ClipMode,
) -> Result<f64, GeometryError> {
    let pa = clip_ready(a, mode)?;
    let pb = clip_ready(b, mode)?;
    if pa.len() < 3 || pb.len() < 3 || shoelace(&pa) <= 0.0 || shoelace(&pb) <= 0.0 {
        return Ok(0.0);
    }
    let clipped = clip_convex(&pa, &pb);
    if clipped.len() < 3 {
        return Ok(0.0);
    }
    let area = shoelace(&clipped).abs();
    Ok(area.min(shoelace(&pa)).min(shoelace(&pb)))
}

/// Intersection over union in `[0, 1]`; 0 when the union is empty.
pub fn iou(a: &Quadrilateral, b: &Quadrilateral) -> f64 {
    let inter = intersection_area(a, b);
    let union = polygon_area(a) + polygon_area(b) - inter;
    if union <= 0.0 || !union.is_finite() {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Averaged lengths of the two pairs of opposite edges:
/// `(edges 0 and 2, edges 1 and 3)`.
fn side_lengths(q: &Quadrilateral) -> (f64, f64) {
    let v = &q.vertices;
    let e = |i: usize| v[i].distance(&v[(i + 1) % 4]);
    (0.5 * (e(0) + e(2)), 0.5 * (e(1) + e(3)))
}

pub fn short_side(q: &Quadrilateral) -> f64 {
    let (a, b) = side_lengths(q);
    a.min(b)
}

pub fn long_side(q: &Quadrilateral) -> f64 {
    let (a, b) = side_lengths(q);
    a.max(b)
}

/// Segment joining the midpoints of the two shorter opposite edges.
pub fn center_line(q: &Quadrilateral) -> (Point2, Point2) {
    let v = &q.vertices;
    let (a, b) = side_lengths(q);
    if a <= b {
        // edges v0-v1 and v2-v3 are the short pair
        (v[0].midpoint(v[1]), v[2].midpoint(v[3]))
    } else {
        (v[3].midpoint(v[0]), v[1].midpoint(v[2]))
    }
}

pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.distance(&a);
    }
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(&lerp(a, b, t))
}

pub fn centerline_distance(p: Point2, q: &Quadrilateral) -> f64 {
    let (a, b) = center_line(q);
    point_segment_distance(p, a, b)
}

/// Rotation by a multiple of a quarter turn, clockwise on screen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuarterTurn {
    #[default]
    R0,
    R90,
    R180,
    R270,
}

impl QuarterTurn {
    pub const ALL: [QuarterTurn; 4] = [Self::R0, Self::R90, Self::R180, Self::R270];

    pub fn radians(self) -> f64 {
        FRAC_PI_2 * self.index() as f64
    }

    pub fn index(self) -> usize {
        match self {
            Self::R0 => 0,
            Self::R90 => 1,
            Self::R180 => 2,
            Self::R270 => 3,
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    /// Size of a `width × height` frame after rotation.
    pub fn rotated_size(self, width: f64, height: f64) -> (f64, f64) {
        match self {
            Self::R0 | Self::R180 => (width, height),
            Self::R90 | Self::R270 => (height, width),
        }
    }

    /// Maps a point of a `width × height` frame into the rotated frame.
    pub fn apply(self, p: Point2, width: f64, height: f64) -> Point2 {
        match self {
            Self::R0 => p,
            Self::R90 => Point2::new(height - p.y, p.x),
            Self::R180 => Point2::new(width - p.x, height - p.y),
            Self::R270 => Point2::new(p.y, width - p.x),
        }
    }
}

/// Scales `q` by `scale`, rotates it inside the scaled `frame` (width,
/// height before rotation), shifts it into a crop starting at `crop_origin`
/// and re-normalizes the vertex order.
pub fn transform_quad(
    q: &Quadrilateral,
    scale: f64,
    rotation: QuarterTurn,
    frame: (f64, f64),
    crop_origin: Point2,
) -> Quadrilateral {
    let out = q.map(|p| {
        let s = Point2::new(p.x * scale, p.y * scale);
        let r = rotation.apply(s, frame.0, frame.1);
        Point2::new(r.x - crop_origin.x, r.y - crop_origin.y)
    });
    if rotation == QuarterTurn::R0 {
        out
    } else {
        out.normalized()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit() -> Quadrilateral {
        Quadrilateral::axis_aligned(0.0, 0.0, 1.0, 1.0)
    }

    #[test]
    fn areas() {
        assert_eq!(polygon_area(&unit()), 1.0);
        let line = Quadrilateral::from_coords([0., 0., 1., 1., 2., 2., 3., 3.]);
        assert_eq!(polygon_area(&line), 0.0);
        let diamond = Quadrilateral::from_coords([0., -1., 1., 0., 0., 1., -1., 0.]);
        assert_relative_eq!(polygon_area(&diamond), 2.0);
    }

    #[test]
    fn intersections() {
        let a = unit();
        assert_relative_eq!(intersection_area(&a, &a), 1.0);
        let b = a.translated(0.5, 0.0);
        assert_relative_eq!(intersection_area(&a, &b), 0.5, epsilon = 1e-12);
        let far = a.translated(3.0, 3.0);
        assert_eq!(intersection_area(&a, &far), 0.0);
        assert_relative_eq!(iou(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &far), 0.0);
    }

    #[test]
    fn counter_clockwise_input_is_accepted() {
        let a = unit();
        let mut rev = a;
        rev.vertices.reverse();
        assert_relative_eq!(iou(&a, &rev), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn non_convex_strict_errors_lenient_uses_hull() {
        // dart: (0,0) (2,1) (0,2) (0.5,1) — last vertex dents inward.
        let dart = Quadrilateral::from_coords([0., 0., 2., 1., 0., 2., 0.5, 1.]);
        assert!(!dart.is_convex());
        assert!(matches!(
            try_intersection_area(&dart, &unit(), ClipMode::Strict),
            Err(GeometryError::NonConvexInput(_))
        ));
        let hull_tri_area = 2.0; // triangle (0,0) (2,1) (0,2)
        assert_relative_eq!(
            intersection_area(&dart, &dart),
            hull_tri_area,
            epsilon = 1e-12
        );
    }

    #[test]
    fn degenerate_iou_is_zero() {
        let p = Quadrilateral::from_coords([1.0; 8]);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &unit()), 0.0);
    }

    #[test]
    fn short_sides() {
        let r = Quadrilateral::axis_aligned(0.0, 0.0, 100.0, 32.0);
        assert_eq!(short_side(&r), 32.0);
        assert_eq!(short_side(&unit()), 1.0);
        let rot = Quadrilateral::rotated_rect(Point2::new(50.0, 50.0), 60.0, 20.0, 30f64.to_radians());
        assert_relative_eq!(short_side(&rot), 20.0, epsilon = 1e-9);
        assert_relative_eq!(long_side(&rot), 60.0, epsilon = 1e-9);
        // a tall rectangle: short pair is the vertical edges' partners
        let tall = Quadrilateral::axis_aligned(0.0, 0.0, 20.0, 80.0);
        assert_eq!(short_side(&tall), 20.0);
    }

    #[test]
    fn centerline_distances() {
        let r = Quadrilateral::axis_aligned(0.0, 0.0, 100.0, 32.0);
        assert_eq!(centerline_distance(Point2::new(50.0, 16.0), &r), 0.0);
        assert_eq!(centerline_distance(Point2::new(0.0, 0.0), &r), 16.0);
        // beyond the right end of the segment (100,16)
        assert_relative_eq!(
            centerline_distance(Point2::new(103.0, 20.0), &r),
            5.0,
            epsilon = 1e-12
        );
        let tall = Quadrilateral::axis_aligned(0.0, 0.0, 32.0, 100.0);
        assert_eq!(centerline_distance(Point2::new(0.0, 50.0), &tall), 16.0);
    }

    #[test]
    fn transforms() {
        let r = Quadrilateral::axis_aligned(10.0, 20.0, 100.0, 32.0);
        let id = transform_quad(&r, 1.0, QuarterTurn::R0, (320.0, 320.0), Point2::default());
        assert_eq!(id, r);
        let half = transform_quad(&r, 0.5, QuarterTurn::R0, (160.0, 160.0), Point2::default());
        assert_eq!(half, Quadrilateral::axis_aligned(5.0, 10.0, 50.0, 16.0));
        let rot = transform_quad(&r, 1.0, QuarterTurn::R180, (320.0, 320.0), Point2::default());
        // point reflection through (160,160), re-listed from top-left
        assert_eq!(rot, Quadrilateral::axis_aligned(210.0, 268.0, 100.0, 32.0));
        for v in r.vertices {
            let reflected = Point2::new(320.0 - v.x, 320.0 - v.y);
            assert!(rot.vertices.contains(&reflected));
        }
        let r90 = transform_quad(&r, 1.0, QuarterTurn::R90, (320.0, 320.0), Point2::new(0.0, 0.0));
        // (x,y) -> (320 - y, x): x range [268, 300], y range [10, 110]
        assert_eq!(r90, Quadrilateral::axis_aligned(268.0, 10.0, 32.0, 100.0));
        assert!(r90.signed_area() > 0.0);
    }

    #[test]
    fn normalized_starts_top_left_clockwise() {
        let q = Quadrilateral::from_coords([0., 1., 1., 1., 1., 0., 0., 0.]);
        let n = q.normalized();
        assert_eq!(n, Quadrilateral::axis_aligned(0.0, 0.0, 1.0, 1.0));
    }
}
