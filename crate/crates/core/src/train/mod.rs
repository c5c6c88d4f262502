//! Training loop, DDIM sampling and compositing.

mod adam;
mod infer;

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use infer::{composite, ddim_timesteps, sample, Sampled, COMPOSITE_THRESHOLD};

use crate::mask::{augment, diff_mask, downsample_mask, AugmentKind, Mask, MaskError};
use crate::model::{build_condition_input, loss, Conditioning, ModelError, RoseModel};
use crate::render::Triplet;
use crate::rng::{stream, substream};
use crate::tensor::{Tape, Tensor};
use crate::video::VideoTensor;

/// Threshold of the difference mask that supervises the predictor.
pub const DIFF_DELTA: f64 = 0.09;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("sample {index} has extents {found:?}, model expects {expected:?}")]
    ResolutionMismatch {
        index: usize,
        expected: [usize; 4],
        found: [usize; 4],
    },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<crate::video::VideoError> for TrainError {
    fn from(e: crate::video::VideoError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub conditioning: Conditioning,
    pub lambda: f64,
    /// Fixed (timestep, noise) draws per sample for the probe loss.
    pub probes_per_sample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            seed: 0,
            augment: true,
            conditioning: Conditioning::Reference,
            lambda: 0.5,
            probes_per_sample: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.into()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        Ok(())
    }
}

/// One training example with its supervision precomputed.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub original: VideoTensor,
    pub edited: VideoTensor,
    pub mask: Mask,
    /// Full-resolution difference mask of the pair.
    pub d0: Mask,
}

impl TrainSample {
    pub fn new(original: VideoTensor, edited: VideoTensor, mask: Mask) -> Result<Self, TrainError> {
        let d0 = diff_mask(&original, &edited, DIFF_DELTA)?;
        Ok(Self {
            original,
            edited,
            mask,
            d0,
        })
    }

    pub fn from_triplet(t: &Triplet) -> Result<Self, TrainError> {
        Self::new(t.original.clone(), t.edited.clone(), t.mask.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub diffusion_loss: f64,
    pub mask_loss: f64,
    pub total: f64,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// A fixed noising draw used to measure the diffusion loss outside training.
#[derive(Clone, Debug)]
pub struct Probe {
    pub sample: usize,
    pub t: usize,
    pub eps: Tensor<f32>,
}

/// `per_sample` probes per sample with timesteps stratified over `[1, T]`.
pub fn make_probes(
    data: &[TrainSample],
    steps: usize,
    per_sample: usize,
    seed: u64,
) -> Vec<Probe> {
    let mut out = Vec::with_capacity(data.len() * per_sample);
    for (i, s) in data.iter().enumerate() {
        let mut rng = substream(seed, "probe", i as u64);
        for k in 0..per_sample {
            let lo = k * steps / per_sample + 1;
            let hi = ((k + 1) * steps / per_sample).max(lo);
            let t = rng.gen_range(lo..=hi);
            out.push(Probe {
                sample: i,
                t,
                eps: normal_tensor(&mut rng, &s.edited.dims()),
            });
        }
    }
    out
}

/// Mean diffusion loss over `probes`, conditioning on the unaugmented mask.
pub fn probe_loss(
    model: &RoseModel<f32>,
    data: &[TrainSample],
    probes: &[Probe],
) -> Result<f64, TrainError> {
    if probes.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for p in probes {
        let s = &data[p.sample];
        let x_t = model.schedule().add_noise(&video_tensor(&s.edited), p.t, &p.eps)?;
        let cond = build_condition_input(
            &tensor_video(x_t),
            &s.original,
            &s.mask,
            model.config().conditioning,
        )?;
        let pred = model.predict(&cond, p.t)?;
        let n = pred.eps_hat.len() as f64;
        acc += pred
            .eps_hat
            .data()
            .iter()
            .zip(p.eps.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n;
    }
    Ok(acc / probes.len() as f64)
}

/// Step counter, parameters, optimiser moments and running loss averages.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub model: RoseModel<f32>,
    pub optimizer: Adam,
    pub running_diffusion: f64,
    pub running_mask: f64,
}

const RUNNING_DECAY: f64 = 0.98;

impl TrainState {
    pub fn new(mut model: RoseModel<f32>, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        model.set_conditioning(cfg.conditioning);
        let optimizer = Adam::new(model.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Self {
            step: 0,
            model,
            optimizer,
            running_diffusion: 0.0,
            running_mask: 0.0,
        })
    }

    /// One optimisation step over `batch_size` freshly drawn examples.
    pub fn step(&mut self, data: &[TrainSample], cfg: &TrainConfig) -> Result<TraceRow, TrainError> {
        let step = self.step;
        let model = &self.model;
        let mcfg = model.config();
        let mut grads: Vec<Tensor<f32>> =
            model.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let (mut diff_sum, mut mask_sum) = (0.0, 0.0);
        for b in 0..cfg.batch_size {
            let draw = (step * cfg.batch_size + b) as u64;
            let mut rng = substream(cfg.seed, stream::TRAIN, draw);
            let s = &data[rng.gen_range(0..data.len())];
            let t = rng.gen_range(1..=mcfg.diffusion_steps);
            let eps = normal_tensor(&mut rng, &s.edited.dims());
            let cond_mask = if cfg.augment {
                let mut arng = substream(cfg.seed, stream::AUGMENT, draw);
                let kind = AugmentKind::sample(&mut arng, s.mask.width());
                match augment(&s.mask, kind, &mut arng) {
                    Ok(m) => m,
                    Err(MaskError::EmptyMask(_)) => s.mask.clone(),
                    Err(e) => return Err(e.into()),
                }
            } else {
                s.mask.clone()
            };
            let d_t = downsample_mask(&s.d0, mcfg.patch[1], mcfg.patch[0]);
            let x_t = model.schedule().add_noise(&video_tensor(&s.edited), t, &eps)?;
            let cond = build_condition_input(&tensor_video(x_t), &s.original, &cond_mask, cfg.conditioning)?;

            let mut tape = Tape::new();
            let leaves = model.leaves(&mut tape, true);
            let fwd = model.forward(&mut tape, &leaves, &cond, t)?;
            let e = tape.constant(eps);
            let terms = loss(&mut tape, e, fwd.eps_hat, fwd.d_hat, &d_t, cfg.lambda)?;
            let (d, m) = (
                tape.value(terms.diffusion).item() as f64,
                tape.value(terms.mask).item() as f64,
            );
            if !(d.is_finite() && m.is_finite()) {
                return Err(TrainError::NonFiniteLoss { step });
            }
            diff_sum += d;
            mask_sum += m;
            let g = tape.backward(terms.total)?;
            for (acc, v) in grads.iter_mut().zip(&leaves) {
                let gv = g.get(*v).expect("leaf gradient");
                for (a, x) in acc.data_mut().iter_mut().zip(gv.data()) {
                    *a += x;
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f32;
        for g in &mut grads {
            for x in g.data_mut() {
                *x *= inv;
            }
            if !g.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
        }
        self.optimizer.update(self.model.params_mut(), &grads);
        let nb = cfg.batch_size as f64;
        let row = TraceRow {
            step,
            diffusion_loss: diff_sum / nb,
            mask_loss: mask_sum / nb,
            total: (diff_sum + mask_sum) / nb,
        };
        if step == 0 {
            self.running_diffusion = row.diffusion_loss;
            self.running_mask = row.mask_loss;
        } else {
            self.running_diffusion =
                RUNNING_DECAY * self.running_diffusion + (1.0 - RUNNING_DECAY) * row.diffusion_loss;
            self.running_mask = RUNNING_DECAY * self.running_mask + (1.0 - RUNNING_DECAY) * row.mask_loss;
        }
        self.step += 1;
        Ok(row)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: RoseModel<f32>,
    pub trace: Vec<TraceRow>,
    /// Probe diffusion loss before the first and after the last step.
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
}

pub fn check_dataset(model: &RoseModel<f32>, data: &[TrainSample]) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let c = model.config();
    let expected = [c.frames, c.height, c.width, c.channels];
    for (index, s) in data.iter().enumerate() {
        for found in [s.original.dims(), s.edited.dims()] {
            if found != expected {
                return Err(TrainError::ResolutionMismatch {
                    index,
                    expected,
                    found,
                });
            }
        }
        if s.mask.dims() != expected[..3] || s.d0.dims() != expected[..3] {
            return Err(TrainError::ResolutionMismatch {
                index,
                expected,
                found: [s.mask.frames(), s.mask.height(), s.mask.width(), 1],
            });
        }
    }
    Ok(())
}

/// Runs `cfg.steps` optimisation steps; `on_step` sees every trace row.
pub fn train_with(
    model: RoseModel<f32>,
    data: &[TrainSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainState, &TraceRow),
) -> Result<TrainOutcome, TrainError> {
    check_dataset(&model, data)?;
    let mut state = TrainState::new(model, cfg)?;
    let probes = make_probes(
        data,
        state.model.config().diffusion_steps,
        cfg.probes_per_sample,
        cfg.seed,
    );
    let initial_probe_loss = probe_loss(&state.model, data, &probes)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let row = state.step(data, cfg)?;
        on_step(&state, &row);
        trace.push(row);
    }
    let final_probe_loss = probe_loss(&state.model, data, &probes)?;
    Ok(TrainOutcome {
        model: state.model,
        trace,
        initial_probe_loss,
        final_probe_loss,
    })
}

pub fn train(
    model: RoseModel<f32>,
    data: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with(model, data, cfg, |_, _| {})
}

fn normal_tensor(rng: &mut crate::rng::StreamRng, dims: &[usize; 4]) -> Tensor<f32> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(dims.to_vec(), data).expect("sizes match")
}

pub(crate) fn video_tensor(v: &VideoTensor) -> Tensor<f32> {
    Tensor::new(v.dims().to_vec(), v.data().to_vec()).expect("sizes match")
}

pub(crate) fn tensor_video(t: Tensor<f32>) -> VideoTensor {
    let s = t.shape().to_vec();
    VideoTensor::new(s[0], s[1], s[2], s[3], t.into_data()).expect("sizes match")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy() -> (RoseModel<f32>, Vec<TrainSample>) {
        let cfg = ModelConfig::micro(4, 8, 8, [2, 4, 4], 8);
        let model = RoseModel::new(cfg, 0).unwrap();
        let original = VideoTensor::from_fn(4, 8, 8, 3, |t, y, x, c| {
            0.1 + 0.02 * (t + y + x + c) as f32
        });
        let mut edited = original.clone();
        let mask = Mask::from_fn(4, 8, 8, |_, y, x| (2..5).contains(&y) && (3..6).contains(&x));
        for t in 0..4 {
            for y in 2..5 {
                for x in 3..6 {
                    edited.pixel_mut(t, y, x).fill(0.9);
                }
            }
        }
        let s = TrainSample::new(original, edited, mask).unwrap();
        (model, vec![s])
    }

    fn short(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            probes_per_sample: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (model, data) = toy();
        let a = train(model.clone(), &data, &short(3)).unwrap();
        let b = train(model, &data, &short(3)).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model.to_bytes().unwrap(), b.model.to_bytes().unwrap());
    }

    #[test]
    fn zero_lambda_gives_zero_mask_trace() {
        let (model, data) = toy();
        let cfg = TrainConfig {
            lambda: 0.0,
            ..short(3)
        };
        let out = train(model, &data, &cfg).unwrap();
        assert!(out.trace.iter().all(|r| r.mask_loss == 0.0));
        assert!(out.trace.iter().all(|r| r.diffusion_loss.is_finite()));
    }

    #[test]
    fn invalid_configs_and_data_are_rejected() {
        let (model, data) = toy();
        assert!(matches!(
            train(model.clone(), &data, &short(0)),
            Err(TrainError::BadConfig(_))
        ));
        let cfg = TrainConfig {
            lr: 0.0,
            ..short(1)
        };
        assert!(train(model.clone(), &data, &cfg).is_err());
        assert!(matches!(
            train(model.clone(), &[], &short(1)),
            Err(TrainError::EmptyDataset)
        ));
        let other = RoseModel::new(ModelConfig::micro(4, 8, 16, [2, 4, 4], 8), 0).unwrap();
        assert!(matches!(
            train(other, &data, &short(1)),
            Err(TrainError::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn conditioning_mode_is_recorded_in_the_model() {
        let (model, data) = toy();
        let cfg = TrainConfig {
            conditioning: Conditioning::Baseline,
            ..short(1)
        };
        let out = train(model, &data, &cfg).unwrap();
        assert_eq!(out.model.config().conditioning, Conditioning::Baseline);
    }

    #[test]
    fn probes_are_stratified() {
        let (_, data) = toy();
        let p = make_probes(&data, 1000, 4, 3);
        let ts: Vec<usize> = p.iter().map(|p| p.t).collect();
        for (k, t) in ts.iter().enumerate() {
            assert!(*t > k * 250 && *t <= (k + 1) * 250, "{ts:?}");
        }
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let rows = [TraceRow {
            step: 0,
            diffusion_loss: 0.5,
            mask_loss: 0.25,
            total: 0.75,
        }];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,diffusion_loss,mask_loss,total\n0,0.5,0.25,0.75\n"
        );
    }
}
