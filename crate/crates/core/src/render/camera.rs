use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{Ray, Vec3};
use super::RenderError;
use crate::rng::{stream, substream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraPreset {
    Static,
    Dolly,
    Orbit,
    ZoomIn,
    ZoomOut,
}

impl CameraPreset {
    pub const ALL: [CameraPreset; 5] = [
        CameraPreset::Static,
        CameraPreset::Dolly,
        CameraPreset::Orbit,
        CameraPreset::ZoomIn,
        CameraPreset::ZoomOut,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CameraPreset::Static => "static",
            CameraPreset::Dolly => "dolly",
            CameraPreset::Orbit => "orbit",
            CameraPreset::ZoomIn => "zoom_in",
            CameraPreset::ZoomOut => "zoom_out",
        }
    }
}

impl fmt::Display for CameraPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CameraPreset {
    type Err = RenderError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CameraPreset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| RenderError::UnknownPreset(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Vec3,
    pub look_at: Vec3,
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
}

impl CameraPose {
    /// Primary ray through the continuous image coordinate `(u, v)` in
    /// pixels, origin at the top-left corner.
    pub(crate) fn ray(&self, u: f64, v: f64, width: usize, height: usize) -> Ray {
        let forward = (self.look_at - self.position).normalized();
        let right = forward.cross(Vec3::UP).normalized();
        let up = right.cross(forward);
        let half_h = (self.fov_deg.to_radians() * 0.5).tan();
        let half_w = half_h * width as f64 / height as f64;
        let px = (2.0 * u / width as f64 - 1.0) * half_w;
        let py = (1.0 - 2.0 * v / height as f64) * half_h;
        Ray {
            origin: self.position,
            dir: (forward + right * px + up * py).normalized(),
        }
    }

    /// Image coordinate `(u, v)` in pixels of a world point, or `None` when
    /// it lies behind the camera. Inverse of [`CameraPose::ray`].
    pub fn project(&self, p: Vec3, width: usize, height: usize) -> Option<(f64, f64)> {
        let forward = (self.look_at - self.position).normalized();
        let right = forward.cross(Vec3::UP).normalized();
        let up = right.cross(forward);
        let d = p - self.position;
        let z = d.dot(forward);
        if z <= 0.0 {
            return None;
        }
        let half_h = (self.fov_deg.to_radians() * 0.5).tan();
        let half_w = half_h * width as f64 / height as f64;
        let px = d.dot(right) / z / half_w;
        let py = d.dot(up) / z / half_h;
        Some((
            (px + 1.0) * 0.5 * width as f64,
            (1.0 - py) * 0.5 * height as f64,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    pub preset: CameraPreset,
    pub poses: Vec<CameraPose>,
    pub jitter_amplitude: f64,
}

pub const DEFAULT_JITTER: f64 = 0.015;
const ANCHOR: Vec3 = Vec3::new(0.0, 0.6, 0.0);

impl CameraPath {
    /// Same camera for every frame.
    pub fn fixed(pose: CameraPose, frames: usize) -> Self {
        Self {
            preset: CameraPreset::Static,
            poses: vec![pose; frames],
            jitter_amplitude: 0.0,
        }
    }

    /// Point every camera path is built around.
    pub fn anchor() -> Vec3 {
        ANCHOR
    }
}

/// Samples a trajectory with the default jitter amplitude.
pub fn sample_camera_path(
    preset: CameraPreset,
    frames: usize,
    seed: u64,
) -> Result<CameraPath, RenderError> {
    sample_camera_path_with_jitter(preset, frames, seed, DEFAULT_JITTER)
}

/// Base view: azimuth in [-20, 20] degrees, elevation in [18, 32] degrees,
/// distance in [5.5, 6.5] world units from the anchor, 45 degree field of
/// view. Jitter perturbs each frame's position within the image plane of the
/// base view by at most `jitter` along each axis.
pub fn sample_camera_path_with_jitter(
    preset: CameraPreset,
    frames: usize,
    seed: u64,
    jitter: f64,
) -> Result<CameraPath, RenderError> {
    if frames == 0 {
        return Err(RenderError::BadConfig("camera path needs at least one frame".into()));
    }
    let mut rng = substream(seed, stream::CAMERA, 0);
    let azimuth: f64 = rng.gen_range(-20.0f64..20.0).to_radians();
    let elevation: f64 = rng.gen_range(18.0f64..32.0).to_radians();
    let distance: f64 = rng.gen_range(5.5..6.5);
    let fov_deg = 45.0;

    let place = |az: f64, dist: f64| {
        ANCHOR
            + Vec3::new(
                elevation.cos() * az.sin(),
                elevation.sin(),
                elevation.cos() * az.cos(),
            ) * dist
    };
    let base = place(azimuth, distance);
    let forward = (ANCHOR - base).normalized();
    let right = forward.cross(Vec3::UP).normalized();
    let up = right.cross(forward);

    let mut poses = Vec::with_capacity(frames);
    for f in 0..frames {
        let s = if frames > 1 {
            f as f64 / (frames - 1) as f64
        } else {
            0.0
        };
        let mut position = match preset {
            CameraPreset::Static => base,
            CameraPreset::Dolly => base + right * (1.2 * s - 0.6),
            CameraPreset::Orbit => place(azimuth + (s - 0.5) * 30f64.to_radians(), distance),
            CameraPreset::ZoomIn => place(azimuth, distance * (1.15 - 0.35 * s)),
            CameraPreset::ZoomOut => place(azimuth, distance * (0.8 + 0.35 * s)),
        };
        let (jr, ju): (f64, f64) = if jitter > 0.0 {
            (rng.gen_range(-jitter..=jitter), rng.gen_range(-jitter..=jitter))
        } else {
            (0.0, 0.0)
        };
        position = position + right * jr + up * ju;
        poses.push(CameraPose {
            position,
            look_at: ANCHOR,
            fov_deg,
        });
    }
    Ok(CameraPath {
        preset,
        poses,
        jitter_amplitude: jitter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_without_jitter_is_constant() {
        let p = sample_camera_path_with_jitter(CameraPreset::Static, 8, 3, 0.0).unwrap();
        assert_eq!(p.poses.len(), 8);
        assert!(p.poses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn deterministic_per_seed() {
        for preset in CameraPreset::ALL {
            let a = sample_camera_path(preset, 10, 42).unwrap();
            let b = sample_camera_path(preset, 10, 42).unwrap();
            assert_eq!(a, b);
            let c = sample_camera_path(preset, 10, 43).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn zoom_in_approaches_anchor_and_zoom_out_recedes() {
        for seed in 0..20 {
            let d = |p: &CameraPath| -> Vec<f64> {
                p.poses.iter().map(|c| (c.position - CameraPath::anchor()).norm()).collect()
            };
            let zin = d(&sample_camera_path(CameraPreset::ZoomIn, 16, seed).unwrap());
            assert!(zin.windows(2).all(|w| w[1] < w[0]), "{zin:?}");
            let zout = d(&sample_camera_path(CameraPreset::ZoomOut, 16, seed).unwrap());
            assert!(zout.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn jitter_is_bounded() {
        let clean = sample_camera_path_with_jitter(CameraPreset::Orbit, 12, 5, 0.0).unwrap();
        let noisy = sample_camera_path_with_jitter(CameraPreset::Orbit, 12, 5, 0.05).unwrap();
        for (a, b) in clean.poses.iter().zip(&noisy.poses) {
            // two in-plane components, each bounded by the amplitude
            assert!((a.position - b.position).norm() <= 0.05 * 2f64.sqrt() + 1e-12);
        }
    }

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(matches!("crane".parse::<CameraPreset>(), Err(RenderError::UnknownPreset(_))));
        assert_eq!("zoom_out".parse::<CameraPreset>().unwrap(), CameraPreset::ZoomOut);
    }

    #[test]
    fn centre_ray_points_at_anchor() {
        let p = sample_camera_path(CameraPreset::Static, 1, 1).unwrap().poses[0];
        let r = p.ray(48.0, 48.0, 96, 96);
        let to_anchor = (p.look_at - p.position).normalized();
        assert!((r.dir - to_anchor).abs_max() < 1e-12);
    }
}
