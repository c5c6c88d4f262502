use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use super::RenderError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const UP: Vec3 = Vec3::new(0.0, 1.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn hadamard(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn abs_max(self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Where the ray from `point` along `light_dir` meets the ground plane
/// `y = ground_y`.
pub fn project_shadow(point: Vec3, light_dir: Vec3, ground_y: f64) -> Result<Vec3, RenderError> {
    if light_dir.y >= 0.0 {
        return Err(RenderError::LightFromBelow(light_dir.y));
    }
    let t = (ground_y - point.y) / light_dir.y;
    Ok(point + light_dir * t)
}

/// Mirror image of `point` across the plane `n . p = d` (`n` unit length).
pub fn reflect_point(point: Vec3, normal: Vec3, offset: f64) -> Vec3 {
    point - normal * (2.0 * (normal.dot(point) - offset))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

pub(crate) const EPS: f64 = 1e-7;

/// Nearest positive hit distance and outward normal.
pub(crate) fn hit_sphere(ray: &Ray, center: Vec3, radius: f64) -> Option<(f64, Vec3)> {
    let oc = ray.origin - center;
    let b = oc.dot(ray.dir);
    let c = oc.dot(oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = if -b - s > EPS { -b - s } else { -b + s };
    if t <= EPS {
        return None;
    }
    let n = (ray.at(t) - center) * (1.0 / radius);
    Some((t, n))
}

/// Axis-aligned box given by centre and half extents (slab method).
pub(crate) fn hit_box(ray: &Ray, center: Vec3, half: Vec3) -> Option<(f64, Vec3)> {
    let o = (ray.origin - center).to_array();
    let d = ray.dir.to_array();
    let h = half.to_array();
    let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis_in = 0;
    let mut axis_out = 0;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > h[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut t0, mut t1) = ((-h[a] - o[a]) * inv, (h[a] - o[a]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > tmin {
            tmin = t0;
            axis_in = a;
        }
        if t1 < tmax {
            tmax = t1;
            axis_out = a;
        }
    }
    if tmin > tmax || tmax <= EPS {
        return None;
    }
    let (t, axis) = if tmin > EPS {
        (tmin, axis_in)
    } else {
        (tmax, axis_out)
    };
    let mut n = [0.0; 3];
    let p = o[axis] + d[axis] * t;
    n[axis] = p.signum();
    Some((t, Vec3::new(n[0], n[1], n[2])))
}

/// Vertical rectangle facing +z, `half.x` wide and `half.y` tall.
pub(crate) fn hit_billboard(ray: &Ray, center: Vec3, half: Vec3) -> Option<(f64, Vec3)> {
    if ray.dir.z.abs() < 1e-15 {
        return None;
    }
    let t = (center.z - ray.origin.z) / ray.dir.z;
    if t <= EPS {
        return None;
    }
    let p = ray.at(t);
    if (p.x - center.x).abs() > half.x || (p.y - center.y).abs() > half.y {
        return None;
    }
    let n = if ray.dir.z < 0.0 {
        Vec3::new(0.0, 0.0, 1.0)
    } else {
        Vec3::new(0.0, 0.0, -1.0)
    };
    Some((t, n))
}

/// Infinite plane `n . p = d`.
pub(crate) fn hit_plane(ray: &Ray, normal: Vec3, offset: f64) -> Option<f64> {
    let denom = normal.dot(ray.dir);
    if denom.abs() < 1e-15 {
        return None;
    }
    let t = (offset - normal.dot(ray.origin)) / denom;
    (t > EPS).then_some(t)
}
