use rand::Rng;
use rand_distr::StandardNormal;

use super::TrainError;
use crate::mask::{dilate, Mask};
use crate::model::{build_condition_input, ModelError, RoseModel};
use crate::rng::{stream, substream};
use crate::tensor::Tensor;
use crate::video::VideoTensor;

pub const COMPOSITE_THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    /// Final clean estimate, clamped to `[0, 1]`.
    pub erased: VideoTensor,
    /// Predictor output of the last denoising step, `[F, H, W]`.
    pub d_hat: Tensor<f32>,
}

/// `steps` timesteps evenly covering `[1, total]`, largest first.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (1..=steps).rev().map(|k| (k * total).div_ceil(steps)).collect()
}

/// Deterministic (eta = 0) DDIM trajectory from pure noise, conditioned on
/// `(video, mask)` at every step.
pub fn sample(
    model: &RoseModel<f32>,
    video: &VideoTensor,
    mask: &Mask,
    steps: usize,
    seed: u64,
) -> Result<Sampled, TrainError> {
    let cfg = model.config();
    let expected = [cfg.frames, cfg.height, cfg.width, cfg.channels];
    if video.dims() != expected {
        return Err(TrainError::ResolutionMismatch {
            index: 0,
            expected,
            found: video.dims(),
        });
    }
    if mask.dims() != expected[..3] {
        return Err(TrainError::ResolutionMismatch {
            index: 0,
            expected,
            found: [mask.frames(), mask.height(), mask.width(), cfg.channels],
        });
    }
    if steps == 0 || steps > cfg.diffusion_steps {
        return Err(ModelError::TimestepOutOfRange {
            t: steps,
            steps: cfg.diffusion_steps,
        }
        .into());
    }
    let schedule = model.schedule();
    let mut rng = substream(seed, stream::SAMPLE, 0);
    let n = video.data().len();
    let mut x: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let ts = ddim_timesteps(cfg.diffusion_steps, steps);
    let mut x0 = Vec::new();
    let mut d_hat = Tensor::zeros(expected[..3].to_vec());
    for (i, &t) in ts.iter().enumerate() {
        let x_t = VideoTensor::new(expected[0], expected[1], expected[2], expected[3], x.clone())?;
        let cond = build_condition_input(&x_t, video, mask, cfg.conditioning)?;
        let pred = model.predict(&cond, t)?;
        d_hat = pred.d_hat;
        x0 = pred.x0_hat.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = match ts.get(i + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt() as f32, (1.0 - ab_prev).sqrt() as f32);
        for (xi, &x0i) in x.iter_mut().zip(&x0) {
            let eps = ((*xi as f64 - sa * x0i as f64) / sb) as f32;
            *xi = pa * x0i + pb * eps;
        }
    }
    let erased = VideoTensor::new(expected[0], expected[1], expected[2], expected[3], x0)?;
    Ok(Sampled { erased, d_hat })
}

/// Takes `erased` inside `mask | (d_hat > threshold)` and `original`
/// elsewhere, with a linear feather of two pixels (Chebyshev distance) around
/// the union: weight 1 inside, 1/2 at distance 1, 0 from distance 2 on.
pub fn composite(
    erased: &VideoTensor,
    original: &VideoTensor,
    mask: &Mask,
    d_hat: &Tensor<f32>,
    threshold: f32,
) -> Result<VideoTensor, TrainError> {
    erased.check_same_shape(original).map_err(ModelError::from)?;
    let [f, h, w, c] = original.dims();
    if mask.dims() != [f, h, w] || d_hat.shape() != [f, h, w] {
        return Err(ModelError::ShapeMismatch {
            what: "composite mask",
            expected: vec![f, h, w],
            found: if mask.dims() != [f, h, w] {
                mask.dims().to_vec()
            } else {
                d_hat.shape().to_vec()
            },
        }
        .into());
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(TrainError::BadConfig(format!(
            "composite threshold {threshold} outside (0, 1)"
        )));
    }
    let predicted = Mask::threshold(d_hat.data(), [f, h, w], threshold);
    let union = mask.union(&predicted)?;
    let ring = dilate(&union, 1);
    let mut out = original.clone();
    let src = erased.data();
    for (i, px) in out.data_mut().chunks_exact_mut(c).enumerate() {
        let e = &src[i * c..(i + 1) * c];
        if union.bits()[i] != 0 {
            for (o, v) in px.iter_mut().zip(e) {
                *o = v.clamp(0.0, 1.0);
            }
        } else if ring.bits()[i] != 0 {
            for (o, v) in px.iter_mut().zip(e) {
                *o = 0.5 * v.clamp(0.0, 1.0) + 0.5 * *o;
            }
        }
    }
    Ok(out)
}
