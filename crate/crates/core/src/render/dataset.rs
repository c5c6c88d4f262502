use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::camera::{sample_camera_path, CameraPreset};
use super::raycast::{render_triplet, RenderConfig};
use super::scene::sample_scene;
use super::{Category, RenderError, Triplet};
use crate::io::{self, Dtype, Manifest, ManifestEntry};
use crate::mask::Mask;
use crate::rng::{derive_seed, stream, substream};

/// A frame counts as showing the target when at least this fraction of its
/// pixels is foreground.
pub const MIN_FG_RATIO: f64 = 0.005;
/// Fraction of frames that must show the target for a view to be kept.
pub const MIN_FRAME_FRACTION: f64 = 0.8;
/// Consecutive rejected candidates tolerated per sample before giving up.
pub const MAX_REJECTIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct FilterReport {
    pub keep: bool,
    pub fg_ratio_per_frame: Vec<f64>,
}

/// Keeps a view when enough frames show enough of the target.
pub fn valid_view_filter(
    mask: &Mask,
    min_fg_ratio: f64,
    min_frame_fraction: f64,
) -> Result<FilterReport, RenderError> {
    if mask.is_empty() {
        return Err(RenderError::EmptyMask);
    }
    if !(0.0..=1.0).contains(&min_fg_ratio) || !(0.0..=1.0).contains(&min_frame_fraction) {
        return Err(RenderError::BadConfig("filter ratios must lie in [0, 1]".into()));
    }
    let px = (mask.height() * mask.width()) as f64;
    let ratios: Vec<f64> = (0..mask.frames())
        .map(|t| mask.frame_count(t) as f64 / px)
        .collect();
    let passing = ratios.iter().filter(|&&r| r >= min_fg_ratio).count();
    let keep = passing as f64 / ratios.len() as f64 >= min_frame_fraction;
    Ok(FilterReport {
        keep,
        fg_ratio_per_frame: ratios,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub render: RenderConfig,
    pub master_seed: u64,
    pub min_fg_ratio: f64,
    pub min_frame_fraction: f64,
    /// Restrict generation to these categories (all six when empty).
    #[serde(default)]
    pub categories: Vec<Category>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            render: RenderConfig::default(),
            master_seed: 0,
            min_fg_ratio: MIN_FG_RATIO,
            min_frame_fraction: MIN_FRAME_FRACTION,
            categories: Vec::new(),
        }
    }
}

impl DatasetConfig {
    pub fn categories(&self) -> Vec<Category> {
        if self.categories.is_empty() {
            Category::ALL.to_vec()
        } else {
            self.categories.clone()
        }
    }
}

/// Renders one accepted triplet for `(category, index)`. Candidates that
/// fail the filter (or never show the target) are replaced by the next
/// scene seed.
pub fn sample_triplet(
    category: Category,
    index: u64,
    cfg: &DatasetConfig,
) -> Result<Triplet, RenderError> {
    let first = derive_seed(cfg.master_seed, &format!("{}/{}", stream::SCENE, category), index);
    for attempt in 0..MAX_REJECTIONS as u64 {
        let seed = first.wrapping_add(attempt);
        let scene = sample_scene(category, seed);
        let preset = *CameraPreset::ALL
            .choose(&mut substream(seed, stream::CAMERA, 1))
            .expect("non-empty");
        let camera = sample_camera_path(preset, cfg.render.frames, seed)?;
        let triplet = match render_triplet(&scene, &camera, &cfg.render) {
            Ok(t) => t,
            Err(RenderError::TargetNotVisible) => continue,
            Err(e) => return Err(e),
        };
        if valid_view_filter(&triplet.mask, cfg.min_fg_ratio, cfg.min_frame_fraction)?.keep {
            return Ok(triplet);
        }
    }
    Err(RenderError::FilterExhausted {
        category,
        attempts: MAX_REJECTIONS,
    })
}

/// Writes `count` accepted triplets per category under `out_dir` plus
/// `manifest.json` listing them.
pub fn generate_dataset(
    count: usize,
    cfg: &DatasetConfig,
    out_dir: &Path,
) -> Result<Manifest, RenderError> {
    cfg.render.validate()?;
    let mut manifest = Manifest::default();
    for category in cfg.categories() {
        for i in 0..count {
            let t = sample_triplet(category, i as u64, cfg)?;
            let stem = format!("{}/{:03}", category, i);
            let entry = ManifestEntry {
                original: format!("{stem}_original.rvt"),
                edited: format!("{stem}_edited.rvt"),
                mask: format!("{stem}_mask.rvt"),
                category,
                scene_seed: t.scene_seed,
            };
            io::write_video(&out_dir.join(&entry.original), &t.original, Dtype::U8)?;
            io::write_video(&out_dir.join(&entry.edited), &t.edited, Dtype::U8)?;
            io::write_mask(&out_dir.join(&entry.mask), &t.mask)?;
            manifest.entries.push(entry);
        }
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Loads the triplet an entry refers to, relative to `root`.
pub fn load_triplet(root: &Path, entry: &ManifestEntry) -> Result<Triplet, RenderError> {
    let original = io::read_video(&root.join(&entry.original))?;
    let edited = io::read_video(&root.join(&entry.edited))?;
    let mask = io::read_mask(&root.join(&entry.mask))?;
    if original.dims() != edited.dims()
        || [original.frames(), original.height(), original.width()] != mask.dims()
    {
        return Err(RenderError::BadConfig(format!(
            "triplet {} has misaligned members",
            entry.original
        )));
    }
    Ok(Triplet {
        original,
        edited,
        mask,
        category: entry.category,
        scene_seed: entry.scene_seed,
        manifest: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_extremes() {
        let r = valid_view_filter(&Mask::ones(4, 8, 8), MIN_FG_RATIO, MIN_FRAME_FRACTION).unwrap();
        assert!(r.keep);
        assert!(r.fg_ratio_per_frame.iter().all(|&v| v == 1.0));
        let r = valid_view_filter(&Mask::zeros(4, 8, 8), MIN_FG_RATIO, MIN_FRAME_FRACTION).unwrap();
        assert!(!r.keep);
        assert!(r.fg_ratio_per_frame.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filter_counts_frames_over_threshold() {
        // 3 of 10 frames at ratio 0.02 -> 3/10 < 0.8
        let mut m = Mask::zeros(10, 10, 10);
        for t in 0..3 {
            m.set(t, 0, 0, true);
            m.set(t, 0, 1, true);
        }
        let r = valid_view_filter(&m, 0.005, 0.8).unwrap();
        assert!(!r.keep);
        assert_eq!(r.fg_ratio_per_frame[0], 0.02);
        assert_eq!(r.fg_ratio_per_frame.iter().filter(|&&v| v >= 0.005).count(), 3);
        assert!(valid_view_filter(&m, 0.005, 0.3).unwrap().keep);
    }

    #[test]
    fn filter_rejects_bad_input() {
        assert!(matches!(
            valid_view_filter(&Mask::zeros(0, 4, 4), 0.1, 0.1),
            Err(RenderError::EmptyMask)
        ));
        assert!(valid_view_filter(&Mask::ones(1, 4, 4), 1.5, 0.1).is_err());
    }
}
