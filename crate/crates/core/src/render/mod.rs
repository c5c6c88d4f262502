//! Procedural 2.5D scenes and a CPU ray caster that renders aligned
//! (original, edited, mask) video triplets.
//!
//! Rendering runs twice under identical camera, light and motion: once with
//! the target object present and once with it hidden everywhere (primary
//! visibility, shadow rays, mirror bounces and emitted light). Pixels the
//! target does not influence are therefore computed by exactly the same
//! floating point sequence in both passes and come out bit-identical.

mod camera;
mod dataset;
mod geometry;
mod raycast;
mod scene;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use camera::{sample_camera_path, sample_camera_path_with_jitter, CameraPath, CameraPose, CameraPreset};
pub use dataset::{
    generate_dataset, load_triplet, sample_triplet, valid_view_filter, DatasetConfig, FilterReport,
    MIN_FG_RATIO, MIN_FRAME_FRACTION,
};
pub use geometry::{project_shadow, reflect_point, Vec3};
pub use raycast::{render_triplet, RenderConfig, EMISSION_CUTOFF};
pub use scene::sample_scene;

use crate::io::IoError;
use crate::mask::Mask;
use crate::video::VideoTensor;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("light direction must point downwards (y component {0} >= 0)")]
    LightFromBelow(f64),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("scene is inconsistent with category {category}: {reason}")]
    CategoryMismatch { category: Category, reason: String },
    #[error("target object is not visible in any frame")]
    TargetNotVisible,
    #[error("invalid render configuration: {0}")]
    BadConfig(String),
    #[error("unknown camera preset '{0}'")]
    UnknownPreset(String),
    #[error("mask volume is empty")]
    EmptyMask,
    #[error("valid-view filter rejected {attempts} consecutive candidates for category {category}")]
    FilterExhausted { category: Category, attempts: usize },
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Side-effect taxonomy of the paired dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Common,
    Shadow,
    LightSource,
    Reflection,
    Mirror,
    Translucent,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Common,
        Category::Shadow,
        Category::LightSource,
        Category::Reflection,
        Category::Mirror,
        Category::Translucent,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Common => "common",
            Category::Shadow => "shadow",
            Category::LightSource => "light_source",
            Category::Reflection => "reflection",
            Category::Mirror => "mirror",
            Category::Translucent => "translucent",
        }
    }

    /// Row label used in benchmark tables.
    pub fn title(&self) -> &'static str {
        match self {
            Category::Common => "Common",
            Category::Shadow => "Shadow",
            Category::LightSource => "Light Source",
            Category::Reflection => "Reflection",
            Category::Mirror => "Mirror",
            Category::Translucent => "Translucent",
        }
    }

    /// Categories whose removal must also clear an effect outside the object.
    pub fn has_external_effect(&self) -> bool {
        matches!(
            self,
            Category::Shadow | Category::LightSource | Category::Reflection | Category::Mirror
        )
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category '{s}'"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere,
    /// Axis-aligned; `size` holds the half extents.
    Box,
    /// Vertical rectangle facing the +z axis; `size.x`/`size.y` are half extents.
    Billboard,
}

/// Constant per-frame displacement of an object.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub velocity: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub center: Vec3,
    /// Radius in `x` for spheres, half extents otherwise.
    pub size: Vec3,
    pub color: Vec3,
    /// 1 is opaque.
    pub alpha: f64,
    /// Strength of the radial light the object adds to nearby surfaces.
    pub emission: f64,
    pub motion: Motion,
}

impl ObjectSpec {
    pub fn center_at(&self, frame: usize) -> Vec3 {
        self.center + self.motion.velocity * frame as f64
    }

    /// Bounding radius used for emission falloff.
    pub fn radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere => self.size.x,
            _ => self.size.norm(),
        }
    }

    fn validate(&self, i: usize) -> Result<(), RenderError> {
        let bad = |m: &str| Err(RenderError::InvalidScene(format!("object {i}: {m}")));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must be in (0, 1]");
        }
        if !(self.emission >= 0.0) {
            return bad("emission must be non-negative");
        }
        let s = self.size;
        let positive = match self.shape {
            Shape::Sphere => s.x > 0.0,
            Shape::Billboard => s.x > 0.0 && s.y > 0.0,
            Shape::Box => s.x > 0.0 && s.y > 0.0 && s.z > 0.0,
        };
        if !positive {
            return bad("size must be strictly positive");
        }
        if self.color.to_array().iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("color components must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightSpec {
    /// Unit vector from the light toward the scene.
    pub direction: Vec3,
    pub ambient: f64,
    pub diffuse: f64,
}

impl LightSpec {
    fn validate(&self) -> Result<(), RenderError> {
        if (self.direction.norm() - 1.0).abs() > 1e-9 {
            return Err(RenderError::InvalidScene(format!(
                "light direction must be unit length, |d| = {}",
                self.direction.norm()
            )));
        }
        if self.direction.y >= 0.0 {
            return Err(RenderError::LightFromBelow(self.direction.y));
        }
        if !(0.0..=1.0).contains(&self.ambient) || !(0.0..=1.0).contains(&self.diffuse) {
            return Err(RenderError::InvalidScene(
                "ambient and diffuse must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Reflective plane `normal . p = offset`, optionally bounded to a
/// rectangle `[x_min, x_max] x [y_min, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub normal: Vec3,
    pub offset: f64,
    /// Fraction of the reflected radiance mixed into the surface colour.
    pub attenuation: f64,
    pub tint: Vec3,
    pub bounds: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub category: Category,
    pub objects: Vec<ObjectSpec>,
    pub target_object_id: usize,
    pub light: LightSpec,
    pub ground_y: f64,
    pub ground_color: Vec3,
    /// Sky colour at the top and at the horizon.
    pub background: [Vec3; 2],
    pub mirror_plane: Option<PlaneSpec>,
    pub water_plane: Option<PlaneSpec>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn target(&self) -> &ObjectSpec {
        &self.objects[self.target_object_id]
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.target_object_id >= self.objects.len() {
            return Err(RenderError::InvalidScene(format!(
                "target index {} out of range for {} objects",
                self.target_object_id,
                self.objects.len()
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            o.validate(i)?;
        }
        self.light.validate()?;
        for p in self.mirror_plane.iter().chain(&self.water_plane) {
            if !(0.0..=1.0).contains(&p.attenuation) || (p.normal.norm() - 1.0).abs() > 1e-9 {
                return Err(RenderError::InvalidScene(
                    "plane needs a unit normal and attenuation in [0, 1]".into(),
                ));
            }
        }
        let mismatch = |reason: &str| {
            Err(RenderError::CategoryMismatch {
                category: self.category,
                reason: reason.into(),
            })
        };
        let target = self.target();
        match self.category {
            Category::Mirror if self.mirror_plane.is_none() => mismatch("mirror plane missing"),
            Category::Reflection if self.water_plane.is_none() => mismatch("water plane missing"),
            Category::LightSource if target.emission <= 0.0 => {
                mismatch("target must have positive emission")
            }
            Category::Translucent if target.alpha >= 1.0 => mismatch("target must be translucent"),
            _ => Ok(()),
        }
    }
}

/// Aligned original / edited / mask videos of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub original: VideoTensor,
    pub edited: VideoTensor,
    pub mask: Mask,
    pub category: Category,
    pub scene_seed: u64,
    pub manifest: BTreeMap<String, String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_round_trips_through_str() {
        for c in Category::ALL {
            assert_eq!(c.as_str().parse::<Category>().unwrap(), c);
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(json, format!("\"{}\"", c.as_str()));
        }
        assert!("smoke".parse::<Category>().is_err());
    }
}
