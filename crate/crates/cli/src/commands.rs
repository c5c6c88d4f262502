use std::path::Path;

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use rose_core::bench::{
    evaluate_pair, load_cases, run_benchmark, EvalPair, Identity, MetricRow, ModelRemover, Oracle, Remover,
    Subset,
};
use rose_core::io::{self, Dtype, Manifest};
use rose_core::mask::{augment, AugmentKind};
use rose_core::model::{default_taps, load_checkpoint, save_checkpoint, ModelConfig, RoseModel};
use rose_core::render::{generate_dataset, load_triplet, valid_view_filter, Category, DatasetConfig};
use rose_core::rng::{stream, substream};
use rose_core::train::{
    composite, sample, train_with, write_trace_csv, TrainConfig, TrainSample, COMPOSITE_THRESHOLD,
};
use rose_core::video::VideoTensor;

use crate::config::{ensure_dir, record_run, usage, CliError, Layered};
use crate::{Command, Common};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate {
            common,
            count,
            frames,
            height,
            width,
            categories,
        } => {
            let mut l = Layered::load(&GenerateJob::default(), common.config.as_deref())?;
            l.set("master_seed", common.seed);
            l.set("count", count);
            l.set("frames", frames);
            l.set("height", height);
            l.set("width", width);
            l.set("categories", categories);
            generate(&common, l.build()?)
        }
        Command::Filter {
            common,
            data,
            min_fg_ratio,
            min_frame_fraction,
        } => {
            let mut l = Layered::load(&FilterJob::default(), common.config.as_deref())?;
            l.set("min_fg_ratio", min_fg_ratio);
            l.set("min_frame_fraction", min_frame_fraction);
            filter(&common, &data, l.build()?)
        }
        Command::Augment {
            common,
            mask,
            kind,
            radius,
        } => {
            let mut l = Layered::load(&AugmentJob::default(), common.config.as_deref())?;
            if let Some(k) = kind {
                let kind = match (k.as_str(), radius) {
                    ("original" | "point" | "bbox", _) => serde_json::json!({ "tag": k }),
                    ("dilate" | "erode", Some(r)) => serde_json::json!({ "tag": k, "radius": r }),
                    ("dilate" | "erode", None) => return Err(usage(format!("--kind {k} needs --radius"))),
                    _ => return Err(usage(format!("unknown augmentation {k:?}"))),
                };
                l.set("kind", Some(kind));
            }
            augment_cmd(&common, &mask, l.build()?)
        }
        Command::Train {
            common,
            data,
            steps,
            lr,
            lambda,
            conditioning,
            categories,
            limit,
        } => {
            let mut l = Layered::load(&TrainJob::default(), common.config.as_deref())?;
            l.set("train.seed", common.seed);
            l.set("train.steps", steps);
            l.set("train.lr", lr);
            l.set("train.lambda", lambda);
            l.set("train.conditioning", conditioning);
            l.set("categories", categories);
            l.set("limit", limit);
            train_cmd(&common, &data, l.build()?)
        }
        Command::Infer {
            common,
            checkpoint,
            video,
            mask,
            steps,
            threshold,
        } => {
            let mut l = Layered::load(&InferJob::default(), common.config.as_deref())?;
            l.set("seed", common.seed);
            l.set("steps", steps);
            l.set("threshold", threshold);
            infer(&common, &checkpoint, &video, &mask, l.build()?)
        }
        Command::Eval {
            common,
            input,
            output,
            mask,
            gt,
        } => eval(&common, &input, &output, &mask, gt.as_deref()),
        Command::Bench {
            common,
            bench_dir,
            subset,
            checkpoint,
            method,
            steps,
        } => {
            let mut l = Layered::load(&BenchJob::default(), common.config.as_deref())?;
            l.set("seed", common.seed);
            l.set("subset", subset);
            l.set("method", method);
            l.set("steps", steps);
            bench(&common, &bench_dir, checkpoint.as_deref(), l.build()?)
        }
    }
}

fn data<T>(r: anyhow::Result<T>) -> Result<T> {
    r.map_err(CliError::Data)
}

#[derive(Debug, Serialize, Deserialize)]
struct GenerateJob {
    #[serde(flatten)]
    dataset: DatasetConfig,
    /// Triplets per category.
    count: usize,
}

impl Default for GenerateJob {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            count: 10,
        }
    }
}

fn generate(common: &Common, job: GenerateJob) -> Result<()> {
    if job.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    data((|| {
        ensure_dir(&common.out)?;
        let manifest = generate_dataset(job.count, &job.dataset, &common.out)?;
        eprintln!("wrote {} triplets to {}", manifest.entries.len(), common.out.display());
        record_run(&common.out, Some(manifest), "generate", &job, job.dataset.master_seed)
    })())
}

#[derive(Debug, Serialize, Deserialize)]
struct FilterJob {
    min_fg_ratio: f64,
    min_frame_fraction: f64,
}

impl Default for FilterJob {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            min_fg_ratio: d.min_fg_ratio,
            min_frame_fraction: d.min_frame_fraction,
        }
    }
}

#[derive(Debug, Serialize)]
struct FilterVerdict {
    mask: String,
    keep: bool,
    fg_ratio_per_frame: Vec<f64>,
}

fn filter(common: &Common, root: &Path, job: FilterJob) -> Result<()> {
    data((|| {
        let input = Manifest::load(&root.join("manifest.json"))?;
        ensure_dir(&common.out)?;
        let mut kept = Manifest::default();
        let mut verdicts = Vec::new();
        for e in &input.entries {
            let mask = io::read_mask(&root.join(&e.mask))?;
            let r = valid_view_filter(&mask, job.min_fg_ratio, job.min_frame_fraction)?;
            if r.keep {
                for f in [&e.original, &e.edited, &e.mask] {
                    let bytes = io::read_bytes(&root.join(f))?;
                    let dst = common.out.join(f);
                    if let Some(p) = dst.parent() {
                        ensure_dir(p)?;
                    }
                    io::write_atomic(&dst, &bytes)?;
                }
                kept.entries.push(e.clone());
            }
            verdicts.push(FilterVerdict {
                mask: e.mask.clone(),
                keep: r.keep,
                fg_ratio_per_frame: r.fg_ratio_per_frame,
            });
        }
        io::write_atomic(&common.out.join("filter_report.json"), &pretty(&verdicts)?)?;
        eprintln!("kept {} of {} triplets", kept.entries.len(), input.entries.len());
        record_run(&common.out, Some(kept), "filter", &job, common.seed.unwrap_or(0))
    })())
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct AugmentJob {
    /// Sampled from the augmentation stream when absent.
    kind: Option<AugmentKind>,
}

fn augment_cmd(common: &Common, mask_path: &Path, job: AugmentJob) -> Result<()> {
    let seed = common.seed.unwrap_or(0);
    data((|| {
        let mask = io::read_mask(mask_path)?;
        let mut rng = substream(seed, stream::AUGMENT, 0);
        let kind = job.kind.unwrap_or_else(|| AugmentKind::sample(&mut rng, mask.width()));
        let out = augment(&mask, kind, &mut rng)?;
        ensure_dir(&common.out)?;
        io::write_mask(&common.out.join("mask.rvt"), &out)?;
        io::write_atomic(&common.out.join("augment.json"), &pretty(&kind)?)?;
        record_run(&common.out, None, "augment", &job, seed)
    })())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct ModelSpec {
    patch: [usize; 3],
    dim: usize,
    depth: usize,
    heads: usize,
    mlp_ratio: usize,
    diffusion_steps: usize,
    beta_start: f64,
    beta_end: f64,
    eps_clip: f64,
    sigma_data: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let m = ModelConfig::micro(16, 96, 96, [8, 4, 4], 32);
        Self {
            patch: m.patch,
            dim: m.dim,
            depth: m.depth,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            diffusion_steps: m.diffusion_steps,
            beta_start: m.beta_start,
            beta_end: m.beta_end,
            eps_clip: m.eps_clip,
            sigma_data: m.sigma_data,
        }
    }
}

impl ModelSpec {
    fn config(&self, dims: [usize; 4], train: &TrainConfig) -> ModelConfig {
        let taps = default_taps(self.depth);
        ModelConfig {
            frames: dims[0],
            height: dims[1],
            width: dims[2],
            channels: dims[3],
            patch: self.patch,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            predictor_hidden: (self.dim * taps.len() / 4).max(1),
            taps,
            lambda: train.lambda,
            diffusion_steps: self.diffusion_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            conditioning: train.conditioning,
            eps_clip: self.eps_clip,
            sigma_data: self.sigma_data,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainJob {
    model: ModelSpec,
    train: TrainConfig,
    /// Restrict training to these categories (all when empty).
    categories: Vec<Category>,
    limit: Option<usize>,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    steps: usize,
    params: usize,
    initial_probe_loss: f64,
    final_probe_loss: f64,
}

fn train_cmd(common: &Common, root: &Path, job: TrainJob) -> Result<()> {
    job.train.validate().map_err(|e| usage(e.to_string()))?;
    data((|| {
        let manifest = Manifest::load(&root.join("manifest.json"))?;
        let mut samples = Vec::new();
        for e in &manifest.entries {
            if !job.categories.is_empty() && !job.categories.contains(&e.category) {
                continue;
            }
            if job.limit.is_some_and(|n| samples.len() >= n) {
                break;
            }
            samples.push(TrainSample::from_triplet(&load_triplet(root, e)?)?);
        }
        let first = samples.first().ok_or_else(|| anyhow!("no training triplets selected"))?;
        let cfg = job.model.config(first.original.dims(), &job.train);
        let model = RoseModel::new(cfg, job.train.seed)?;
        let outcome = train_with(model, &samples, &job.train, |state, row| {
            if (state.step) % 100 == 0 {
                eprintln!(
                    "step {:>6}  diffusion {:.5}  mask {:.5}",
                    row.step, state.running_diffusion, state.running_mask
                );
            }
        })?;
        ensure_dir(&common.out)?;
        save_checkpoint(&outcome.model, &common.out.join("checkpoint.ckpt"))?;
        let mut csv = Vec::new();
        write_trace_csv(&outcome.trace, &mut csv)?;
        io::write_atomic(&common.out.join("loss.csv"), &csv)?;
        let summary = TrainSummary {
            steps: outcome.trace.len(),
            params: outcome.model.param_count(),
            initial_probe_loss: outcome.initial_probe_loss,
            final_probe_loss: outcome.final_probe_loss,
        };
        io::write_atomic(&common.out.join("train_summary.json"), &pretty(&summary)?)?;
        record_run(&common.out, None, "train", &job, job.train.seed)
    })())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct InferJob {
    seed: u64,
    steps: usize,
    threshold: f64,
}

impl Default for InferJob {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 50,
            threshold: COMPOSITE_THRESHOLD as f64,
        }
    }
}

fn infer(common: &Common, ckpt: &Path, video: &Path, mask: &Path, job: InferJob) -> Result<()> {
    if !(job.threshold > 0.0 && job.threshold < 1.0) {
        return Err(usage("--threshold must lie in (0, 1)"));
    }
    data((|| {
        let model = load_checkpoint(ckpt).context("loading checkpoint")?;
        let v = io::read_video(video)?;
        let m = io::read_mask(mask)?;
        let s = sample(&model, &v, &m, job.steps, job.seed)?;
        let out = composite(&s.erased, &v, &m, &s.d_hat, job.threshold as f32)?;
        let [f, h, w] = m.dims();
        let d_hat = VideoTensor::new(f, h, w, 1, s.d_hat.data().to_vec())?;
        ensure_dir(&common.out)?;
        io::write_video(&common.out.join("erased.rvt"), &s.erased, Dtype::F32)?;
        io::write_video(&common.out.join("composite.rvt"), &out, Dtype::F32)?;
        io::write_video(&common.out.join("d_hat.rvt"), &d_hat, Dtype::F32)?;
        record_run(&common.out, None, "infer", &job, job.seed)
    })())
}

fn eval(common: &Common, input: &Path, output: &Path, mask: &Path, gt: Option<&Path>) -> Result<()> {
    data((|| {
        let pair = EvalPair {
            input: io::read_video(input)?,
            mask: io::read_mask(mask)?,
            ground_truth: gt.map(io::read_video).transpose()?,
            output: Some(io::read_video(output)?),
        };
        let metrics: MetricRow = evaluate_pair(&pair)?;
        ensure_dir(&common.out)?;
        io::write_atomic(&common.out.join("metrics.json"), &pretty(&metrics)?)?;
        println!("{}", String::from_utf8_lossy(&pretty(&metrics)?));
        record_run(&common.out, None, "eval", &(), common.seed.unwrap_or(0))
    })())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct BenchJob {
    seed: u64,
    subset: Subset,
    /// `model` (needs --checkpoint), `identity` or `oracle`.
    method: String,
    steps: usize,
}

impl Default for BenchJob {
    fn default() -> Self {
        Self {
            seed: 0,
            subset: Subset::SyntheticPaired,
            method: "model".into(),
            steps: 50,
        }
    }
}

fn bench(common: &Common, root: &Path, ckpt: Option<&Path>, job: BenchJob) -> Result<()> {
    let model = match (job.method.as_str(), ckpt) {
        ("model", Some(p)) => Some(data(load_checkpoint(p).context("loading checkpoint"))?),
        ("model", None) => return Err(usage("bench with method \"model\" needs --checkpoint")),
        ("identity" | "oracle", _) => None,
        (m, _) => return Err(usage(format!("unknown method {m:?}"))),
    };
    data((|| {
        let cases = load_cases(root, job.subset, job.seed)?;
        let remover: Box<dyn Remover + '_> = match (&model, job.method.as_str()) {
            (Some(m), _) => Box::new(ModelRemover {
                model: m,
                sample_steps: job.steps,
                seed: job.seed,
            }),
            (None, "oracle") => Box::new(Oracle),
            _ => Box::new(Identity),
        };
        let report = run_benchmark(remover.as_ref(), cases, job.subset)?;
        ensure_dir(&common.out)?;
        io::write_atomic(&common.out.join("report.csv"), report.to_csv().as_bytes())?;
        io::write_atomic(&common.out.join("report.txt"), report.to_table().as_bytes())?;
        io::write_atomic(&common.out.join("report.json"), &pretty(&report)?)?;
        print!("{}", report.to_table());
        record_run(&common.out, None, "bench", &job, job.seed)
    })())
}

fn pretty<T: Serialize>(v: &T) -> anyhow::Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}
