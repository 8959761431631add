//! Planar vector math and convex-shape proximity queries.
//!
//! All shapes here are in world coordinates. Polygons are convex with
//! vertices in counter-clockwise order.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    #[inline]
    pub fn from_angle(theta: f64) -> Self {
        Vec2::new(theta.cos(), theta.sin())
    }

    #[inline]
    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    #[inline]
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Rotate by the angle whose cosine and sine are given.
    #[inline]
    pub fn rotate_cs(self, c: f64, s: f64) -> Vec2 {
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    #[inline]
    pub fn rotate(self, theta: f64) -> Vec2 {
        self.rotate_cs(theta.cos(), theta.sin())
    }

    /// Counter-clockwise perpendicular.
    #[inline]
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    #[inline]
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    #[inline]
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    #[inline]
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl SubAssign for Vec2 {
    #[inline]
    fn sub_assign(&mut self, o: Vec2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    #[inline]
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    #[inline]
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// A convex shape placed in the world.
#[derive(Debug, Clone, Copy)]
pub enum Convex<'a> {
    Circle { center: Vec2, radius: f64 },
    Polygon(&'a [Vec2]),
}

/// Penetration between two shapes. `normal` is the unit direction in which
/// the second shape must move (or the first move against) to separate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub normal: Vec2,
    pub depth: f64,
    pub point: Vec2,
}

impl Contact {
    fn flipped(self) -> Contact {
        Contact {
            normal: -self.normal,
            ..self
        }
    }
}

pub fn closest_point_on_segment(p: Vec2, a: Vec2, b: Vec2) -> Vec2 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return a;
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    a + ab * t
}

#[inline]
fn edge_normal(a: Vec2, b: Vec2) -> Vec2 {
    // outward normal of a CCW edge
    let e = b - a;
    let n = Vec2::new(e.y, -e.x);
    n * (1.0 / n.norm())
}

/// Largest signed distance from `p` to the supporting lines of the edges,
/// together with the edge index. Negative means `p` is strictly inside.
fn max_edge_separation(p: Vec2, verts: &[Vec2]) -> (f64, usize) {
    let n = verts.len();
    let mut best = (f64::NEG_INFINITY, 0);
    for i in 0..n {
        let a = verts[i];
        let b = verts[(i + 1) % n];
        let s = edge_normal(a, b).dot(p - a);
        if s > best.0 {
            best = (s, i);
        }
    }
    best
}

/// Closest boundary point of a convex polygon to `p`.
fn closest_boundary_point(p: Vec2, verts: &[Vec2]) -> Vec2 {
    let n = verts.len();
    let mut best = verts[0];
    let mut best_d = f64::INFINITY;
    for i in 0..n {
        let q = closest_point_on_segment(p, verts[i], verts[(i + 1) % n]);
        let d = (p - q).norm_sq();
        if d < best_d {
            best_d = d;
            best = q;
        }
    }
    best
}

/// Signed distance from a point to a convex polygon (negative inside).
pub fn point_polygon_distance(p: Vec2, verts: &[Vec2]) -> f64 {
    let (sep, _) = max_edge_separation(p, verts);
    if sep <= 0.0 {
        sep
    } else {
        (p - closest_boundary_point(p, verts)).norm()
    }
}

pub fn point_in_polygon(p: Vec2, verts: &[Vec2]) -> bool {
    max_edge_separation(p, verts).0 < 0.0
}

fn circle_circle(c1: Vec2, r1: f64, c2: Vec2, r2: f64) -> Option<Contact> {
    let d = c2 - c1;
    let dist = d.norm();
    let depth = r1 + r2 - dist;
    if depth <= 0.0 {
        return None;
    }
    let normal = if dist > 0.0 {
        d * (1.0 / dist)
    } else {
        Vec2::new(1.0, 0.0)
    };
    Some(Contact {
        normal,
        depth,
        point: c1 + normal * (r1 - 0.5 * depth),
    })
}

/// Circle first, polygon second.
fn circle_polygon(c: Vec2, r: f64, verts: &[Vec2]) -> Option<Contact> {
    let (sep, edge) = max_edge_separation(c, verts);
    if sep > 0.0 {
        let q = closest_boundary_point(c, verts);
        let d = q - c;
        let dist = d.norm();
        let depth = r - dist;
        if depth <= 0.0 {
            return None;
        }
        // dist > 0 because the center is outside the polygon
        Some(Contact {
            normal: d * (1.0 / dist),
            depth,
            point: q,
        })
    } else {
        let n = verts.len();
        let en = edge_normal(verts[edge], verts[(edge + 1) % n]);
        Some(Contact {
            normal: -en,
            depth: r - sep,
            point: c - en * sep,
        })
    }
}

/// Best separating axis among the edge normals of `a` against `b`:
/// (separation, normal, deepest point of `b`).
fn sat_axis(a: &[Vec2], b: &[Vec2]) -> (f64, Vec2, Vec2) {
    let n = a.len();
    let mut best = (f64::NEG_INFINITY, Vec2::ZERO, Vec2::ZERO);
    for i in 0..n {
        let p = a[i];
        let normal = edge_normal(p, a[(i + 1) % n]);
        let mut min_s = f64::INFINITY;
        let mut deepest = b[0];
        for &v in b {
            let s = normal.dot(v - p);
            if s < min_s {
                min_s = s;
                deepest = v;
            }
        }
        if min_s > best.0 {
            best = (min_s, normal, deepest);
        }
    }
    best
}

fn polygon_polygon(a: &[Vec2], b: &[Vec2]) -> Option<Contact> {
    let (sa, na, pa) = sat_axis(a, b);
    if sa >= 0.0 {
        return None;
    }
    let (sb, nb, pb) = sat_axis(b, a);
    if sb >= 0.0 {
        return None;
    }
    if sa >= sb {
        Some(Contact {
            normal: na,
            depth: -sa,
            point: pa,
        })
    } else {
        Some(Contact {
            normal: -nb,
            depth: -sb,
            point: pb,
        })
    }
}

/// Penetration of `b` into `a`, or `None` when they are disjoint or merely touching.
pub fn contact(a: Convex<'_>, b: Convex<'_>) -> Option<Contact> {
    match (a, b) {
        (
            Convex::Circle {
                center: c1,
                radius: r1,
            },
            Convex::Circle {
                center: c2,
                radius: r2,
            },
        ) => circle_circle(c1, r1, c2, r2),
        (Convex::Circle { center, radius }, Convex::Polygon(v)) => {
            circle_polygon(center, radius, v)
        }
        (Convex::Polygon(v), Convex::Circle { center, radius }) => {
            circle_polygon(center, radius, v).map(Contact::flipped)
        }
        (Convex::Polygon(va), Convex::Polygon(vb)) => polygon_polygon(va, vb),
    }
}

fn polygon_gap(a: &[Vec2], b: &[Vec2]) -> f64 {
    let mut best = f64::INFINITY;
    for (poly, other) in [(a, b), (b, a)] {
        let n = poly.len();
        for i in 0..n {
            for &v in other {
                let q = closest_point_on_segment(v, poly[i], poly[(i + 1) % n]);
                best = best.min((v - q).norm_sq());
            }
        }
    }
    best.sqrt()
}

/// Signed distance: positive gap between disjoint shapes, otherwise the
/// negated penetration depth.
pub fn distance(a: Convex<'_>, b: Convex<'_>) -> f64 {
    match (a, b) {
        (
            Convex::Circle {
                center: c1,
                radius: r1,
            },
            Convex::Circle {
                center: c2,
                radius: r2,
            },
        ) => (c2 - c1).norm() - r1 - r2,
        (Convex::Circle { center, radius }, Convex::Polygon(v))
        | (Convex::Polygon(v), Convex::Circle { center, radius }) => {
            point_polygon_distance(center, v) - radius
        }
        (Convex::Polygon(va), Convex::Polygon(vb)) => {
            let (sa, _, _) = sat_axis(va, vb);
            let (sb, _, _) = sat_axis(vb, va);
            let sep = sa.max(sb);
            if sep <= 0.0 {
                sep
            } else {
                polygon_gap(va, vb)
            }
        }
    }
}

/// Far intersection parameter of the ray `o + t*d` (|d| = 1) with a circle,
/// or `None` when the ray misses it.
fn ray_circle_exit(o: Vec2, d: Vec2, c: Vec2, r: f64) -> Option<f64> {
    let oc = o - c;
    let b = oc.dot(d);
    let disc = b * b - (oc.norm_sq() - r * r);
    if disc < 0.0 {
        return None;
    }
    Some(-b + disc.sqrt())
}

/// Far intersection parameter of a ray with the rectangle swept by the edge
/// `a -> b` along its outward normal for `offset`.
fn ray_edge_slab_exit(o: Vec2, d: Vec2, a: Vec2, b: Vec2, offset: f64) -> Option<f64> {
    let e = b - a;
    let len = e.norm();
    let t_axis = e * (1.0 / len);
    let n_axis = edge_normal(a, b);
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (axis, min, max) in [(t_axis, 0.0, len), (n_axis, 0.0, offset)] {
        let p = axis.dot(o - a);
        let v = axis.dot(d);
        if v.abs() < 1e-300 {
            if p < min || p > max {
                return None;
            }
        } else {
            let t0 = (min - p) / v;
            let t1 = (max - p) / v;
            lo = lo.max(t0.min(t1));
            hi = hi.min(t0.max(t1));
        }
    }
    (lo <= hi).then_some(hi)
}

/// Distance along the unit ray `origin + t*dir` at which it leaves the shape
/// dilated by `offset`. The origin must lie inside the shape.
pub fn ray_exit_dilated(origin: Vec2, dir: Vec2, shape: Convex<'_>, offset: f64) -> f64 {
    match shape {
        Convex::Circle { center, radius } => {
            ray_circle_exit(origin, dir, center, radius + offset).unwrap_or(0.0)
        }
        Convex::Polygon(v) => {
            let n = v.len();
            let mut t = 0.0f64;
            for i in 0..n {
                if let Some(x) = ray_circle_exit(origin, dir, v[i], offset) {
                    t = t.max(x);
                }
                if let Some(x) = ray_edge_slab_exit(origin, dir, v[i], v[(i + 1) % n], offset) {
                    t = t.max(x);
                }
            }
            t
        }
    }
}

/// Wrap an angle into [-pi, pi).
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut t = (theta + PI).rem_euclid(TAU) - PI;
    if t >= PI {
        t -= TAU;
    }
    t
}
