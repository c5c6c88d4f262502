use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::camera::CameraPath;
use super::geometry::{hit_billboard, hit_box, hit_plane, hit_sphere, Ray, Vec3};
use super::{PlaneSpec, RenderError, SceneSpec, Shape, Triplet};
use crate::mask::Mask;
use crate::video::VideoTensor;

/// Emitted light weaker than this does not reach a surface at all, so the
/// emitted-light footprint of an object has a hard edge.
pub const EMISSION_CUTOFF: f64 = 0.2;

/// Lit surfaces receive at least this fraction of the diffuse term, giving
/// shadow edges a contrast floor even at grazing light.
const LAMBERT_FLOOR: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// 2x2 supersampling per pixel. Off by default: the bit-exact alignment
    /// guarantees assume one sample per pixel.
    #[serde(default)]
    pub supersample: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            height: 96,
            width: 96,
            supersample: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.frames == 0 {
            return Err(RenderError::BadConfig("frames must be at least 1".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(RenderError::BadConfig(format!(
                "resolution {}x{} below the 16 pixel minimum",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Object(usize),
    Ground,
    Mirror,
}

struct FrameScene<'a> {
    scene: &'a SceneSpec,
    centers: Vec<Vec3>,
    hidden: Option<usize>,
}

struct Hit {
    t: f64,
    normal: Vec3,
    surface: Surface,
}

impl<'a> FrameScene<'a> {
    fn new(scene: &'a SceneSpec, frame: usize, hidden: Option<usize>) -> Self {
        Self {
            scene,
            centers: scene.objects.iter().map(|o| o.center_at(frame)).collect(),
            hidden,
        }
    }

    fn active(&self, i: usize) -> bool {
        self.hidden != Some(i)
    }

    fn hit_object(&self, ray: &Ray, i: usize) -> Option<(f64, Vec3)> {
        let o = &self.scene.objects[i];
        let c = self.centers[i];
        match o.shape {
            Shape::Sphere => hit_sphere(ray, c, o.size.x),
            Shape::Box => hit_box(ray, c, o.size),
            Shape::Billboard => hit_billboard(ray, c, o.size),
        }
    }

    fn hit_mirror(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        let m = self.scene.mirror_plane.as_ref()?;
        let t = hit_plane(ray, m.normal, m.offset)?;
        if let Some([x0, x1, y0, y1]) = m.bounds {
            let p = ray.at(t);
            if p.x < x0 || p.x > x1 || p.y < y0 || p.y > y1 {
                return None;
            }
        }
        let n = if m.normal.dot(ray.dir) < 0.0 {
            m.normal
        } else {
            -m.normal
        };
        Some((t, n))
    }

    /// Nearest opaque surface plus every translucent object in front of it,
    /// sorted front to back.
    fn intersect(&self, ray: &Ray) -> (Option<Hit>, Vec<Hit>) {
        let mut best: Option<Hit> = None;
        let mut consider = |h: Hit| {
            if best.as_ref().is_none_or(|b| h.t < b.t) {
                best = Some(h);
            }
        };
        if let Some(t) = hit_plane(ray, Vec3::UP, self.scene.ground_y) {
            consider(Hit {
                t,
                normal: Vec3::UP,
                surface: Surface::Ground,
            });
        }
        if let Some((t, normal)) = self.hit_mirror(ray) {
            consider(Hit {
                t,
                normal,
                surface: Surface::Mirror,
            });
        }
        let mut translucent = Vec::new();
        for (i, o) in self.scene.objects.iter().enumerate() {
            if !self.active(i) {
                continue;
            }
            if let Some((t, normal)) = self.hit_object(ray, i) {
                let h = Hit {
                    t,
                    normal,
                    surface: Surface::Object(i),
                };
                if o.alpha >= 1.0 {
                    consider(h);
                } else {
                    translucent.push(h);
                }
            }
        }
        if let Some(b) = &best {
            translucent.retain(|h| h.t < b.t);
        }
        translucent.sort_by(|a, b| a.t.total_cmp(&b.t));
        (best, translucent)
    }

    fn sky(&self, dir: Vec3) -> Vec3 {
        let s = (dir.y * 2.0).clamp(0.0, 1.0);
        let [top, horizon] = self.scene.background;
        horizon * (1.0 - s) + top * s
    }

    /// Fraction of directional light reaching `p` (product of the
    /// transparencies of everything along the shadow ray).
    fn light_transmittance(&self, p: Vec3) -> f64 {
        let ray = Ray {
            origin: p,
            dir: -self.scene.light.direction,
        };
        let mut trans = 1.0;
        for (i, o) in self.scene.objects.iter().enumerate() {
            if self.active(i) && self.hit_object(&ray, i).is_some() {
                trans *= 1.0 - o.alpha;
            }
        }
        trans
    }

    /// Radial light emitted by active objects, inverse square in the
    /// distance to their centre, clamped to [0, 1] and cut off below
    /// [`EMISSION_CUTOFF`].
    fn emitted_light(&self, p: Vec3, skip: Option<usize>) -> f64 {
        let mut total = 0.0;
        for (i, o) in self.scene.objects.iter().enumerate() {
            if o.emission <= 0.0 || !self.active(i) || skip == Some(i) {
                continue;
            }
            let d = (p - self.centers[i]).norm().max(1e-9);
            let r = o.radius();
            let term = (o.emission * (r * r) / (d * d)).min(1.0);
            if term >= EMISSION_CUTOFF {
                total += term;
            }
        }
        total
    }

    fn direct_light(&self, p: Vec3, n: Vec3, skip: Option<usize>) -> f64 {
        let light = &self.scene.light;
        let cos = n.dot(-light.direction);
        let mut l = light.ambient + self.emitted_light(p, skip);
        if cos > 0.0 && light.diffuse > 0.0 {
            let lam = LAMBERT_FLOOR + (1.0 - LAMBERT_FLOOR) * cos;
            let offset = p + n * 1e-6;
            l += light.diffuse * lam * self.light_transmittance(offset);
        }
        l
    }

    fn reflect(&self, ray: &Ray, hit: &Hit, plane: &PlaneSpec, base: Vec3, depth: u32) -> Vec3 {
        if depth > 0 {
            return base;
        }
        let p = ray.at(hit.t);
        let d = ray.dir;
        let r = d - hit.normal * (2.0 * d.dot(hit.normal));
        let bounced = Ray {
            origin: p + hit.normal * 1e-6,
            dir: r.normalized(),
        };
        let (refl, _) = self.radiance(&bounced, depth + 1);
        base * (1.0 - plane.attenuation) + refl * plane.attenuation
    }

    fn shade(&self, ray: &Ray, hit: &Hit, depth: u32) -> Vec3 {
        let p = ray.at(hit.t);
        match hit.surface {
            Surface::Object(i) => {
                let o = &self.scene.objects[i];
                let base = o.color * self.direct_light(p, hit.normal, Some(i));
                base + o.color * o.emission
            }
            Surface::Ground => {
                let base = self.scene.ground_color * self.direct_light(p, hit.normal, None);
                match &self.scene.water_plane {
                    Some(w) => self.reflect(ray, hit, w, base, depth),
                    None => base,
                }
            }
            Surface::Mirror => {
                let m = self.scene.mirror_plane.as_ref().expect("mirror hit without plane");
                let base = m.tint * self.direct_light(p, hit.normal, None);
                self.reflect(ray, hit, m, base, depth)
            }
        }
    }

    /// Colour along `ray` and the visible coverage of the target object.
    fn radiance(&self, ray: &Ray, depth: u32) -> (Vec3, f64) {
        let target = self.scene.target_object_id;
        let (opaque, translucent) = self.intersect(ray);
        let mut color = Vec3::ZERO;
        let mut trans = 1.0;
        let mut coverage = 0.0;
        for h in &translucent {
            let Surface::Object(i) = h.surface else { unreachable!() };
            let a = self.scene.objects[i].alpha;
            color = color + self.shade(ray, h, depth) * (a * trans);
            if i == target {
                coverage += a * trans;
            }
            trans *= 1.0 - a;
        }
        let back = match &opaque {
            Some(h) => {
                if h.surface == Surface::Object(target) {
                    coverage = 1.0;
                }
                self.shade(ray, h, depth)
            }
            None => self.sky(ray.dir),
        };
        (color + back * trans, coverage)
    }
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn render_pass(
    scene: &SceneSpec,
    camera: &CameraPath,
    cfg: &RenderConfig,
    hidden: Option<usize>,
) -> (VideoTensor, Mask) {
    let (h, w) = (cfg.height, cfg.width);
    let offsets: &[(f64, f64)] = if cfg.supersample {
        &[(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
    } else {
        &[(0.5, 0.5)]
    };
    let mut video = VideoTensor::zeros(cfg.frames, h, w, 3);
    let mut mask = Mask::zeros(cfg.frames, h, w);
    for f in 0..cfg.frames {
        let fs = FrameScene::new(scene, f, hidden);
        let pose = &camera.poses[f];
        for y in 0..h {
            for x in 0..w {
                let mut acc = Vec3::ZERO;
                let mut cov = 0.0;
                for &(dx, dy) in offsets {
                    let ray = pose.ray(x as f64 + dx, y as f64 + dy, w, h);
                    let (c, k) = fs.radiance(&ray, 0);
                    acc = acc + c;
                    cov += k;
                }
                let n = offsets.len() as f64;
                let px = video.pixel_mut(f, y, x);
                px[0] = quantize(acc.x / n);
                px[1] = quantize(acc.y / n);
                px[2] = quantize(acc.z / n);
                if hidden.is_none() && cov / n >= 0.5 {
                    mask.set(f, y, x, true);
                }
            }
        }
    }
    (video, mask)
}

/// Renders the scene with and without its target object.
///
/// The mask marks pixels where the target is the front-most opaque surface,
/// or, for translucent targets, contributes at least half of the pixel.
/// Colours are quantised to 8-bit levels.
pub fn render_triplet(
    scene: &SceneSpec,
    camera: &CameraPath,
    cfg: &RenderConfig,
) -> Result<Triplet, RenderError> {
    cfg.validate()?;
    scene.validate()?;
    if camera.poses.len() != cfg.frames {
        return Err(RenderError::BadConfig(format!(
            "camera path has {} poses for {} frames",
            camera.poses.len(),
            cfg.frames
        )));
    }
    let (original, mask) = render_pass(scene, camera, cfg, None);
    if !mask.any() {
        return Err(RenderError::TargetNotVisible);
    }
    let (edited, _) = render_pass(scene, camera, cfg, Some(scene.target_object_id));
    let mut manifest = BTreeMap::new();
    manifest.insert("camera_preset".into(), camera.preset.to_string());
    manifest.insert("frames".into(), cfg.frames.to_string());
    manifest.insert("height".into(), cfg.height.to_string());
    manifest.insert("width".into(), cfg.width.to_string());
    Ok(Triplet {
        original,
        edited,
        mask,
        category: scene.category,
        scene_seed: scene.seed,
        manifest,
    })
}
