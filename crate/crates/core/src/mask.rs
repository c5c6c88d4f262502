//! Binary spatio-temporal masks: the difference mask between a video pair,
//! any-pooling to the patch grid, the training-time augmentations and IoU.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::StreamRng;
use crate::video::{VideoError, VideoTensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MaskError {
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("{0} augmentation needs a non-empty mask")]
    EmptyMask(&'static str),
    #[error("structuring element radius must be at least 1")]
    BadRadius,
    #[error("mask value {0} is not binary")]
    NotBinary(f32),
}

/// Frames x height x width volume of {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    frames: usize,
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            bits: vec![0; frames * height * width],
        }
    }

    pub fn ones(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            bits: vec![1; frames * height * width],
        }
    }

    pub fn from_fn(
        frames: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Self {
        let mut bits = Vec::with_capacity(frames * height * width);
        for t in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    bits.push(f(t, y, x) as u8);
                }
            }
        }
        Self {
            frames,
            height,
            width,
            bits,
        }
    }

    /// Values in frame-major order.
    pub fn from_bits(frames: usize, height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), frames * height * width, "mask length");
        Self {
            frames,
            height,
            width,
            bits: bits.into_iter().map(u8::from).collect(),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }
    pub fn len(&self) -> usize {
        self.bits.len()
    }
    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize) -> bool {
        self.bits[(t * self.height + y) * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, v: bool) {
        self.bits[(t * self.height + y) * self.width + x] = v as u8;
    }

    /// Raw {0,1} bytes in frame-major order.
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn frame_count(&self, t: usize) -> usize {
        let n = self.height * self.width;
        self.bits[t * n..(t + 1) * n].iter().map(|&b| b as usize).sum()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b != 0)
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<(), MaskError> {
        if self.dims() != other.dims() {
            return Err(MaskError::ShapeMismatch(self.dims(), other.dims()));
        }
        Ok(())
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }

    pub fn union(&self, other: &Self) -> Result<Self, MaskError> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &Self) -> Result<Self, MaskError> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn complement(&self) -> Self {
        let mut out = self.clone();
        out.bits.iter_mut().for_each(|b| *b ^= 1);
        out
    }

    fn zip_with(&self, other: &Self, f: impl Fn(u8, u8) -> u8) -> Result<Self, MaskError> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        out.bits
            .iter_mut()
            .zip(&other.bits)
            .for_each(|(a, &b)| *a = f(*a, b));
        Ok(out)
    }

    /// Single-channel video with values 0.0 / 1.0.
    pub fn to_video(&self) -> VideoTensor {
        let data = self.bits.iter().map(|&b| b as f32).collect();
        VideoTensor::new(self.frames, self.height, self.width, 1, data).expect("mask extents")
    }

    /// Converts a single-channel video with values exactly 0 or 1.
    pub fn from_video(v: &VideoTensor) -> Result<Self, MaskError> {
        let mut bits = Vec::with_capacity(v.pixel_count());
        for p in v.data().chunks_exact(v.channels()) {
            let x = p[0];
            if x != 0.0 && x != 1.0 {
                return Err(MaskError::NotBinary(x));
            }
            bits.push(x as u8);
        }
        Ok(Self {
            frames: v.frames(),
            height: v.height(),
            width: v.width(),
            bits,
        })
    }

    /// Mask set where a soft volume strictly exceeds `threshold`.
    pub fn threshold(values: &[f32], dims: [usize; 3], threshold: f32) -> Self {
        assert_eq!(values.len(), dims.iter().product::<usize>());
        Self {
            frames: dims[0],
            height: dims[1],
            width: dims[2],
            bits: values.iter().map(|&v| (v > threshold) as u8).collect(),
        }
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample(&self, temporal: usize, spatial: usize) -> Self {
        Mask::from_fn(
            self.frames * temporal,
            self.height * spatial,
            self.width * spatial,
            |t, y, x| self.get(t / temporal, y / spatial, x / spatial),
        )
    }
}

/// Marks pixels whose channel-vector change between two videos has an
/// L2 norm strictly greater than `delta`. The norm is evaluated in the
/// stored single precision, so a difference equal to `delta as f32` is not
/// marked.
pub fn diff_mask(x0: &VideoTensor, x0_edit: &VideoTensor, delta: f64) -> Result<Mask, MaskError> {
    x0.check_same_shape(x0_edit)?;
    if !(delta > 0.0) {
        return Err(MaskError::BadThreshold(delta));
    }
    let c = x0.channels();
    let delta = delta as f32;
    let bits = x0
        .data()
        .chunks_exact(c)
        .zip(x0_edit.data().chunks_exact(c))
        .map(|(a, b)| {
            let s: f32 = a.iter().zip(b).map(|(&p, &q)| (p - q) * (p - q)).sum();
            (s.sqrt() > delta) as u8
        })
        .collect();
    Ok(Mask {
        frames: x0.frames(),
        height: x0.height(),
        width: x0.width(),
        bits,
    })
}

/// Any-pooling over `temporal x spatial x spatial` blocks. Extents that are
/// not multiples of the strides are zero padded.
pub fn downsample_mask(mask: &Mask, spatial: usize, temporal: usize) -> Mask {
    let (s, st) = (spatial.max(1), temporal.max(1));
    let (f, h, w) = (
        mask.frames.div_ceil(st),
        mask.height.div_ceil(s),
        mask.width.div_ceil(s),
    );
    let mut out = Mask::zeros(f, h, w);
    for t in 0..mask.frames {
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(t, y, x) {
                    out.set(t / st, y / s, x / s, true);
                }
            }
        }
    }
    out
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64, MaskError> {
    a.check_same_shape(b)?;
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&p, &q) in a.bits.iter().zip(&b.bits) {
        inter += (p & q) as usize;
        uni += (p | q) as usize;
    }
    Ok(if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    })
}

/// Mask augmentation applied to the conditioning mask during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tag", content = "radius", rename_all = "snake_case")]
pub enum AugmentKind {
    Original,
    Point,
    Bbox,
    Dilate(usize),
    Erode(usize),
}

impl AugmentKind {
    pub fn name(&self) -> &'static str {
        match self {
            AugmentKind::Original => "original",
            AugmentKind::Point => "point",
            AugmentKind::Bbox => "bbox",
            AugmentKind::Dilate(_) => "dilate",
            AugmentKind::Erode(_) => "erode",
        }
    }

    /// Uniform over the five kinds; dilate/erode radius uniform in 1..=5 at
    /// a 96-pixel frame width, scaled proportionally for other widths.
    pub fn sample(rng: &mut StreamRng, frame_width: usize) -> Self {
        let max_r = ((5 * frame_width) as f64 / 96.0).round().max(1.0) as usize;
        match rng.gen_range(0..5) {
            0 => AugmentKind::Original,
            1 => AugmentKind::Point,
            2 => AugmentKind::Bbox,
            3 => AugmentKind::Dilate(rng.gen_range(1..=max_r)),
            _ => AugmentKind::Erode(rng.gen_range(1..=max_r)),
        }
    }
}

pub fn augment(mask: &Mask, kind: AugmentKind, rng: &mut StreamRng) -> Result<Mask, MaskError> {
    match kind {
        AugmentKind::Original => Ok(mask.clone()),
        AugmentKind::Point => {
            if !mask.any() {
                return Err(MaskError::EmptyMask("point"));
            }
            Ok(point(mask, rng))
        }
        AugmentKind::Bbox => {
            if !mask.any() {
                return Err(MaskError::EmptyMask("bbox"));
            }
            Ok(bbox(mask))
        }
        AugmentKind::Dilate(r) if r >= 1 => Ok(dilate(mask, r)),
        AugmentKind::Erode(r) if r >= 1 => Ok(erode(mask, r)),
        AugmentKind::Dilate(_) | AugmentKind::Erode(_) => Err(MaskError::BadRadius),
    }
}

/// One pixel per non-empty frame, uniformly chosen among the set pixels.
pub fn point(mask: &Mask, rng: &mut StreamRng) -> Mask {
    let mut out = Mask::zeros(mask.frames, mask.height, mask.width);
    let n = mask.height * mask.width;
    for t in 0..mask.frames {
        let set: Vec<usize> = (0..n).filter(|&i| mask.bits[t * n + i] != 0).collect();
        if let Some(&i) = set.choose(rng) {
            out.bits[t * n + i] = 1;
        }
    }
    out
}

/// Per-frame tight bounding rectangle, filled.
pub fn bbox(mask: &Mask) -> Mask {
    let mut out = Mask::zeros(mask.frames, mask.height, mask.width);
    for t in 0..mask.frames {
        let mut lo = (usize::MAX, usize::MAX);
        let mut hi = (0, 0);
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(t, y, x) {
                    lo = (lo.0.min(y), lo.1.min(x));
                    hi = (hi.0.max(y), hi.1.max(x));
                }
            }
        }
        if lo.0 == usize::MAX {
            continue;
        }
        for y in lo.0..=hi.0 {
            for x in lo.1..=hi.1 {
                out.set(t, y, x, true);
            }
        }
    }
    out
}

/// Separable running max (or min) over a `(2r+1)` window per row, then per
/// column. Pixels outside the frame are neutral for the operation.
fn morph(mask: &Mask, r: usize, dilate: bool) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let mut out = Mask::zeros(mask.frames, h, w);
    let mut tmp = vec![0u8; h * w];
    let combine = |acc: u8, v: u8| if dilate { acc | v } else { acc & v };
    let neutral = if dilate { 0 } else { 1 };
    for t in 0..mask.frames {
        let frame = &mask.bits[t * h * w..(t + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r).min(w - 1);
                tmp[y * w + x] = frame[y * w + lo..=y * w + hi]
                    .iter()
                    .fold(neutral, |a, &v| combine(a, v));
            }
        }
        let dst = &mut out.bits[t * h * w..(t + 1) * h * w];
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            for x in 0..w {
                dst[y * w + x] = (lo..=hi).fold(neutral, |a, yy| combine(a, tmp[yy * w + x]));
            }
        }
    }
    out
}

/// Per-frame dilation with a square structuring element of radius `r`.
pub fn dilate(mask: &Mask, r: usize) -> Mask {
    morph(mask, r, true)
}

/// Per-frame erosion with a square structuring element of radius `r`;
/// out-of-frame pixels count as set.
pub fn erode(mask: &Mask, r: usize) -> Mask {
    morph(mask, r, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn brute_morph(m: &Mask, r: usize, dil: bool) -> Mask {
        let r = r as isize;
        Mask::from_fn(m.frames(), m.height(), m.width(), |t, y, x| {
            let mut acc = !dil;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= m.height() as isize || xx >= m.width() as isize {
                        continue;
                    }
                    let v = m.get(t, yy as usize, xx as usize);
                    acc = if dil { acc || v } else { acc && v };
                }
            }
            acc
        })
    }

    #[test]
    fn diff_mask_identical_is_empty() {
        let v = VideoTensor::from_fn(2, 4, 4, 3, |t, y, x, c| ((t + y + x + c) % 5) as f32 / 5.0);
        assert!(!diff_mask(&v, &v, 0.09).unwrap().any());
    }

    #[test]
    fn diff_mask_strict_threshold_boundary() {
        let a = VideoTensor::zeros(1, 3, 3, 3);
        let mut b = a.clone();
        b.pixel_mut(0, 1, 1)[0] = 0.09;
        assert!(!diff_mask(&a, &b, 0.09).unwrap().any());
        b.pixel_mut(0, 1, 1)[0] = 0.1;
        let m = diff_mask(&a, &b, 0.09).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(0, 1, 1));
    }

    #[test]
    fn diff_mask_rejects_mismatch_and_bad_delta() {
        let a = VideoTensor::zeros(1, 3, 3, 3);
        let b = VideoTensor::zeros(1, 3, 4, 3);
        assert!(matches!(diff_mask(&a, &b, 0.1), Err(MaskError::Video(_))));
        assert_eq!(diff_mask(&a, &a, 0.0), Err(MaskError::BadThreshold(0.0)));
    }

    #[test]
    fn downsample_any_pooling() {
        let z = Mask::zeros(4, 8, 8);
        assert!(!downsample_mask(&z, 2, 2).any());
        let mut m = Mask::zeros(4, 8, 8);
        m.set(3, 5, 2, true);
        let d = downsample_mask(&m, 4, 2);
        assert_eq!(d.dims(), [2, 2, 2]);
        assert_eq!(d.count(), 1);
        assert!(d.get(1, 1, 0));
        // padding for non-divisible extents
        assert_eq!(downsample_mask(&Mask::ones(3, 5, 5), 2, 2).dims(), [2, 3, 3]);
    }

    #[test]
    fn downsample_matches_block_scan() {
        let mut rng = substream(3, "test", 0);
        let m = Mask::from_fn(16, 32, 32, |_, _, _| rng.gen_bool(0.02));
        let d = downsample_mask(&m, 2, 1);
        let expect = Mask::from_fn(16, 16, 16, |t, y, x| {
            (0..2).any(|dy| (0..2).any(|dx| m.get(t, 2 * y + dy, 2 * x + dx)))
        });
        assert_eq!(d, expect);
    }

    #[test]
    fn dilate_single_pixel_gives_square() {
        let mut m = Mask::zeros(1, 5, 5);
        m.set(0, 2, 2, true);
        let d = dilate(&m, 1);
        assert_eq!(d.count(), 9);
        for y in 1..4 {
            for x in 1..4 {
                assert!(d.get(0, y, x));
            }
        }
    }

    #[test]
    fn bbox_of_l_shape() {
        let mut m = Mask::zeros(1, 6, 6);
        for y in 1..5 {
            m.set(0, y, 1, true);
        }
        for x in 1..4 {
            m.set(0, 4, x, true);
        }
        let b = bbox(&m);
        assert_eq!(b.count(), 4 * 3);
        assert!(b.get(0, 1, 3) && !b.get(0, 0, 1) && !b.get(0, 4, 4));
    }

    #[test]
    fn morphology_matches_brute_force_on_all_small_masks() {
        // every 4x4 mask exhaustively, radii 1 and 2
        for code in 0u32..(1 << 16) {
            let m = Mask::from_fn(1, 4, 4, |_, y, x| code >> (y * 4 + x) & 1 == 1);
            for r in 1..=2 {
                assert_eq!(dilate(&m, r), brute_morph(&m, r, true));
                assert_eq!(erode(&m, r), brute_morph(&m, r, false));
            }
        }
    }

    #[test]
    fn closing_contains_original() {
        let mut rng = substream(9, "test", 0);
        for _ in 0..200 {
            let m = Mask::from_fn(2, 8, 8, |_, _, _| rng.gen_bool(0.3));
            for r in 1..=3 {
                assert!(m.is_subset_of(&erode(&dilate(&m, r), r)));
            }
        }
    }

    #[test]
    fn point_picks_one_set_pixel_per_frame() {
        let mut rng = substream(1, "test", 0);
        let mut m = Mask::zeros(3, 6, 6);
        m.set(0, 1, 1, true);
        m.set(0, 4, 2, true);
        m.set(2, 5, 5, true);
        let p = point(&m, &mut rng);
        assert_eq!(p.frame_count(0), 1);
        assert_eq!(p.frame_count(1), 0);
        assert_eq!(p.frame_count(2), 1);
        assert!(p.is_subset_of(&m));
    }

    #[test]
    fn augment_errors() {
        let mut rng = substream(1, "test", 0);
        let z = Mask::zeros(2, 4, 4);
        assert_eq!(augment(&z, AugmentKind::Point, &mut rng), Err(MaskError::EmptyMask("point")));
        assert_eq!(augment(&z, AugmentKind::Bbox, &mut rng), Err(MaskError::EmptyMask("bbox")));
        assert_eq!(augment(&z, AugmentKind::Dilate(0), &mut rng), Err(MaskError::BadRadius));
        assert_eq!(augment(&z, AugmentKind::Original, &mut rng).unwrap(), z);
    }

    #[test]
    fn iou_cases() {
        let full = Mask::ones(1, 4, 4);
        let left = Mask::from_fn(1, 4, 4, |_, _, x| x < 2);
        let right = left.complement();
        assert_eq!(iou(&full, &full).unwrap(), 1.0);
        assert_eq!(iou(&left, &right).unwrap(), 0.0);
        assert_eq!(iou(&left, &full).unwrap(), 0.5);
        assert_eq!(iou(&Mask::zeros(1, 2, 2), &Mask::zeros(1, 2, 2)).unwrap(), 1.0);
        assert!(iou(&full, &Mask::ones(1, 4, 5)).is_err());
    }

    #[test]
    fn sample_covers_all_kinds_with_scaled_radius() {
        let mut rng = substream(4, "test", 0);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..500 {
            let k = AugmentKind::sample(&mut rng, 192);
            if let AugmentKind::Dilate(r) | AugmentKind::Erode(r) = k {
                assert!((1..=10).contains(&r));
            }
            seen.insert(k.name());
        }
        assert_eq!(seen.len(), 5);
    }
}
