//! Tiny 2-vector helpers for the planar tasks.

pub type Vec2 = [f64; 2];

pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn norm(a: Vec2) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    norm(sub(a, b))
}

/// Unit vector in the direction of `a`, or zero if `a` is (near) zero.
pub fn normalize(a: Vec2) -> Vec2 {
    let n = norm(a);
    if n < 1e-12 {
        [0.0, 0.0]
    } else {
        scale(a, 1.0 / n)
    }
}

/// Counter-clockwise perpendicular.
pub fn perp(a: Vec2) -> Vec2 {
    [-a[1], a[0]]
}

pub fn clamp_components(a: Vec2, lo: f64, hi: f64) -> Vec2 {
    [a[0].clamp(lo, hi), a[1].clamp(lo, hi)]
}

/// Distance from point `p` to segment `ab`.
pub fn dist_point_segment(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    if len2 < 1e-24 {
        return dist(p, a);
    }
    let t = (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0);
    dist(p, add(a, scale(ab, t)))
}

/// Minimum distance from segment `ab` to point `c` over the swept motion —
/// used to test whether a straight step passes through a disk.
pub fn segment_clears_disk(a: Vec2, b: Vec2, center: Vec2, radius: f64) -> bool {
    dist_point_segment(center, a, b) >= radius
}
