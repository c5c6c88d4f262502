//! Paired and unpaired evaluation: PSNR/SSIM against ground truth, closed-form
//! proxies for temporal quality, copy-and-paste pair construction and
//! per-category reports.

mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{
    background_consistency, default_window, masked_psnr, motion_smoothness, psnr, ssim, ssim_default,
    temporal_flicker, PSNR_CAP, SSIM_K1, SSIM_K2, SSIM_WINDOW,
};

use crate::io::Manifest;
use crate::mask::{dilate, Mask};
use crate::render::{load_triplet, Category, RenderError};
use crate::rng::{stream, substream};
use crate::train::{composite, sample, TrainError, COMPOSITE_THRESHOLD};
use crate::model::RoseModel;
use crate::video::VideoTensor;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("video shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),
    #[error("SSIM window {window} must be odd and fit a {height}x{width} frame")]
    BadWindow { window: usize, height: usize, width: usize },
    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("{0} is empty")]
    EmptyRegion(&'static str),
    #[error("pasted mask lies entirely outside the destination frame")]
    MaskClippedOut,
    #[error("non-finite metric value for {0}")]
    NonFinite(String),
    #[error("benchmark directory has no entries")]
    EmptyBenchmark,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    SyntheticPaired,
    RealisticPaired,
    RealisticUnpaired,
}

impl Subset {
    pub fn is_paired(self) -> bool {
        !matches!(self, Subset::RealisticUnpaired)
    }
}

impl std::str::FromStr for Subset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "synthetic_paired" => Ok(Subset::SyntheticPaired),
            "realistic_paired" => Ok(Subset::RealisticPaired),
            "realistic_unpaired" => Ok(Subset::RealisticUnpaired),
            other => Err(format!("unknown subset {other:?}")),
        }
    }
}

/// One evaluation case; `output` is filled in by the method under test.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub input: VideoTensor,
    pub mask: Mask,
    pub ground_truth: Option<VideoTensor>,
    pub output: Option<VideoTensor>,
}

/// Pastes the pixels of `src` under `src_mask` into `dst`, shifted by
/// `offset = (dy, dx)` and clipped to the frame. The untouched `dst` is the
/// ground truth.
pub fn build_copy_paste_pair(
    src: &VideoTensor,
    src_mask: &Mask,
    dst: &VideoTensor,
    offset: (i64, i64),
) -> Result<EvalPair, BenchError> {
    let [f, h, w, c] = dst.dims();
    if src.frames() != f || src.channels() != c {
        return Err(BenchError::ShapeMismatch(src.dims(), dst.dims()));
    }
    if src_mask.dims() != [src.frames(), src.height(), src.width()] {
        return Err(BenchError::ShapeMismatch(
            src.dims(),
            [src_mask.frames(), src_mask.height(), src_mask.width(), c],
        ));
    }
    let mut input = dst.clone();
    let mut mask = Mask::zeros(f, h, w);
    for t in 0..f {
        for y in 0..src.height() {
            for x in 0..src.width() {
                if !src_mask.get(t, y, x) {
                    continue;
                }
                let (ty, tx) = (y as i64 + offset.0, x as i64 + offset.1);
                if ty < 0 || tx < 0 || ty >= h as i64 || tx >= w as i64 {
                    continue;
                }
                let (ty, tx) = (ty as usize, tx as usize);
                input.pixel_mut(t, ty, tx).copy_from_slice(src.pixel(t, y, x));
                mask.set(t, ty, tx, true);
            }
        }
    }
    if src_mask.any() && !mask.any() {
        return Err(BenchError::MaskClippedOut);
    }
    Ok(EvalPair {
        input,
        mask,
        ground_truth: Some(dst.clone()),
        output: None,
    })
}

/// Uniform offset keeping the whole mask (every frame) inside an
/// `height x width` frame.
pub fn sample_paste_offset(
    mask: &Mask,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Result<(i64, i64), BenchError> {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for t in 0..mask.frames() {
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(t, y, x) {
                    (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
                }
            }
        }
    }
    if y0 == usize::MAX {
        return Err(BenchError::EmptyRegion("paste mask"));
    }
    if y1 - y0 >= height || x1 - x0 >= width {
        return Err(BenchError::MaskClippedOut);
    }
    let dy = rng.gen_range(-(y0 as i64)..=(height - 1 - y1) as i64);
    let dx = rng.gen_range(-(x0 as i64)..=(width - 1 - x1) as i64);
    Ok((dy, dx))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Present on paired subsets only.
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub flicker: f64,
    pub bg_consistency: f64,
    pub motion_smoothness: f64,
}

/// Metrics of one evaluated pair.
pub fn evaluate_pair(pair: &EvalPair) -> Result<MetricRow, BenchError> {
    let out = pair.output.as_ref().ok_or(BenchError::EmptyRegion("model output"))?;
    let (p, s) = match &pair.ground_truth {
        Some(gt) => (Some(psnr(out, gt)?), Some(ssim_default(out, gt)?)),
        None => (None, None),
    };
    // flicker is measured away from the edit, where nothing should change
    let background = dilate(&pair.mask, 2).complement();
    let row = MetricRow {
        psnr: p,
        ssim: s,
        flicker: temporal_flicker(out, &background)?,
        bg_consistency: background_consistency(&pair.input, out, &pair.mask)?,
        motion_smoothness: motion_smoothness(out)?,
    };
    Ok(row)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub samples: usize,
    pub metrics: MetricRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub subset: Subset,
    pub rows: Vec<ReportRow>,
    pub mean: ReportRow,
    /// Per-sample metrics in evaluation order.
    pub samples: Vec<(Category, MetricRow)>,
}

fn mean_of(rows: impl Iterator<Item = MetricRow> + Clone) -> MetricRow {
    let n = rows.clone().count() as f64;
    let avg = |f: &dyn Fn(&MetricRow) -> f64| rows.clone().map(|r| f(&r)).sum::<f64>() / n;
    let avg_opt = |f: &dyn Fn(&MetricRow) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = rows.clone().map(|r| f(&r)).collect();
        v.map(|v| v.iter().sum::<f64>() / n)
    };
    MetricRow {
        psnr: avg_opt(&|r| r.psnr),
        ssim: avg_opt(&|r| r.ssim),
        flicker: avg(&|r| r.flicker),
        bg_consistency: avg(&|r| r.bg_consistency),
        motion_smoothness: avg(&|r| r.motion_smoothness),
    }
}

impl MetricReport {
    /// Category rows in taxonomy order plus the mean over category rows.
    pub fn aggregate(subset: Subset, samples: Vec<(Category, MetricRow)>) -> Result<Self, BenchError> {
        if samples.is_empty() {
            return Err(BenchError::EmptyBenchmark);
        }
        let mut by_cat: BTreeMap<Category, Vec<MetricRow>> = BTreeMap::new();
        for (c, m) in &samples {
            by_cat.entry(*c).or_default().push(*m);
        }
        let rows: Vec<ReportRow> = by_cat
            .iter()
            .map(|(c, v)| ReportRow {
                label: c.title().to_string(),
                samples: v.len(),
                metrics: mean_of(v.iter().copied()),
            })
            .collect();
        let mean = ReportRow {
            label: "Mean".into(),
            samples: samples.len(),
            metrics: mean_of(rows.iter().map(|r| r.metrics)),
        };
        let report = Self {
            subset,
            rows,
            mean,
            samples,
        };
        for r in report.rows.iter().chain([&report.mean]) {
            let m = &r.metrics;
            let vals = [
                m.psnr.unwrap_or(0.0),
                m.ssim.unwrap_or(0.0),
                m.flicker,
                m.bg_consistency,
                m.motion_smoothness,
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(BenchError::NonFinite(r.label.clone()));
            }
        }
        Ok(report)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        w.write_record(["category", "samples", "psnr", "ssim", "lpips", "flicker", "bg_consistency", "motion_smoothness"])
            .expect("in-memory write");
        for r in self.rows.iter().chain([&self.mean]) {
            let m = &r.metrics;
            w.write_record([
                r.label.clone(),
                r.samples.to_string(),
                opt(m.psnr),
                opt(m.ssim),
                "n/a".into(),
                format!("{:.4}", m.flicker),
                format!("{:.4}", m.bg_consistency),
                format!("{:.4}", m.motion_smoothness),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# flicker: mean |frame difference| outside the dilated mask (lower is better)\n\
             # bg_consistency: PSNR(input, output) outside the mask, dB\n\
             # motion_smoothness: 1 / (1 + mean |second temporal difference|)\n\
             # lpips: not computed"
        );
        let _ = writeln!(
            s,
            "{:<14}{:>8}{:>9}{:>8}{:>7}{:>9}{:>9}{:>9}",
            "Category", "Samples", "PSNR", "SSIM", "LPIPS", "Flicker", "BG", "Smooth"
        );
        let opt = |v: Option<f64>, p: usize| v.map_or("n/a".to_string(), |v| format!("{v:.p$}"));
        for r in self.rows.iter().chain([&self.mean]) {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{:<14}{:>8}{:>9}{:>8}{:>7}{:>9.4}{:>9.2}{:>9.4}",
                r.label,
                r.samples,
                opt(m.psnr, 2),
                opt(m.ssim, 4),
                "n/a",
                m.flicker,
                m.bg_consistency,
                m.motion_smoothness
            );
        }
        s
    }
}

/// Loads the evaluation cases of `subset` from a generated benchmark
/// directory. Realistic pairs paste each entry's object into the edited
/// (object-free) video of the next entry of the same category; the unpaired
/// subset drops the ground truth.
pub fn load_cases(bench_dir: &Path, subset: Subset, seed: u64) -> Result<Vec<(Category, EvalPair)>, BenchError> {
    let manifest = Manifest::load(&bench_dir.join("manifest.json"))?;
    if manifest.entries.is_empty() {
        return Err(BenchError::EmptyBenchmark);
    }
    let mut out = Vec::new();
    for category in Category::ALL {
        let entries: Vec<_> = manifest.entries_for(category).collect();
        for (i, e) in entries.iter().enumerate() {
            let t = load_triplet(bench_dir, e)?;
            let pair = match subset {
                Subset::SyntheticPaired => EvalPair {
                    input: t.original,
                    mask: t.mask,
                    ground_truth: Some(t.edited),
                    output: None,
                },
                Subset::RealisticPaired | Subset::RealisticUnpaired => {
                    let host = load_triplet(bench_dir, entries[(i + 1) % entries.len()])?;
                    let mut rng = substream(seed, stream::BENCH, out.len() as u64);
                    let offset = sample_paste_offset(&t.mask, host.edited.height(), host.edited.width(), &mut rng)?;
                    let mut p = build_copy_paste_pair(&t.original, &t.mask, &host.edited, offset)?;
                    if subset == Subset::RealisticUnpaired {
                        p.ground_truth = None;
                    }
                    p
                }
            };
            out.push((category, pair));
        }
    }
    Ok(out)
}

/// Object remover evaluated by [`run_benchmark`].
pub trait Remover {
    fn remove(&self, pair: &EvalPair, index: usize) -> Result<VideoTensor, BenchError>;
}

/// Returns the input unchanged.
pub struct Identity;

impl Remover for Identity {
    fn remove(&self, pair: &EvalPair, _: usize) -> Result<VideoTensor, BenchError> {
        Ok(pair.input.clone())
    }
}

/// Returns the ground truth (or the input when there is none).
pub struct Oracle;

impl Remover for Oracle {
    fn remove(&self, pair: &EvalPair, _: usize) -> Result<VideoTensor, BenchError> {
        Ok(pair.ground_truth.clone().unwrap_or_else(|| pair.input.clone()))
    }
}

/// DDIM sampling followed by compositing onto the input.
pub struct ModelRemover<'a> {
    pub model: &'a RoseModel<f32>,
    pub sample_steps: usize,
    pub seed: u64,
}

impl Remover for ModelRemover<'_> {
    fn remove(&self, pair: &EvalPair, index: usize) -> Result<VideoTensor, BenchError> {
        let seed = crate::rng::derive_seed(self.seed, stream::SAMPLE, index as u64);
        let s = sample(self.model, &pair.input, &pair.mask, self.sample_steps, seed)?;
        Ok(composite(&s.erased, &pair.input, &pair.mask, &s.d_hat, COMPOSITE_THRESHOLD)?)
    }
}

pub fn run_benchmark(
    remover: &dyn Remover,
    cases: Vec<(Category, EvalPair)>,
    subset: Subset,
) -> Result<MetricReport, BenchError> {
    let mut samples = Vec::with_capacity(cases.len());
    for (i, (category, mut pair)) in cases.into_iter().enumerate() {
        pair.output = Some(remover.remove(&pair, i)?);
        samples.push((category, evaluate_pair(&pair)?));
    }
    MetricReport::aggregate(subset, samples)
}
