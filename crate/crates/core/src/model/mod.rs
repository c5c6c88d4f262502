//! Patchified diffusion transformer with reference conditioning and an
//! auxiliary difference-mask predictor.
//!
//! The denoiser reads `[x_t; V; M]` (noisy sample, conditioning video, mask)
//! and predicts the noise. The transformer head emits, per pixel and
//! channel, a correction `r`, a gate `g` in `(0, 1)` and a fill `u`. The
//! base image keeps the video outside the mask and takes the fill inside
//! it, `B = (1 - M) V + M u`, so the mask supplies the sharp object outline
//! and `u` only needs the (smooth) background. The clean-video estimate
//! blends the base with the noisy observation `y = x_t / sqrt(ab)`:
//!
//! `x0_hat = B + r + g * w(t) * (y - B)`, with `w = s^2 / (s^2 + (1 - ab) / ab)`
//!
//! the Wiener weight for a residual of scale `s` (`sigma_data`). The noise
//! estimate follows as `(x_t - sqrt(ab) x0_hat) / sqrt(1 - ab)`, clipped to
//! `[-eps_clip, eps_clip]`. Untouched pixels are reproduced once the gate
//! closes on them; edited pixels can pass fine detail straight from `x_t`,
//! which a token of width `dim` cannot carry for a whole patch.

mod checkpoint;
mod patch;
mod schedule;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use patch::{patchify, unpatchify};
pub use schedule::NoiseSchedule;

use crate::io::IoError;
use crate::mask::{Mask, MaskError};
use crate::rng::{stream, substream};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use crate::video::{VideoError, VideoTensor};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("{what} shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("timestep {t} outside [1, {steps}]")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("loss weight must be a non-negative number, got {0}")]
    NegativeLambda(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// How the conditioning video enters the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Full video, object pixels included.
    #[default]
    Reference,
    /// Mask-and-inpaint: the video with masked pixels zeroed.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patch extents `(p_t, p_h, p_w)`.
    pub patch: [usize; 3],
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Blocks whose outputs feed the mask predictor.
    pub taps: Vec<usize>,
    pub predictor_hidden: usize,
    pub lambda: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub conditioning: Conditioning,
    pub eps_clip: f64,
    /// Residual scale of the observation skip.
    #[serde(default = "default_sigma_data")]
    pub sigma_data: f64,
}

fn default_sigma_data() -> f64 {
    0.5
}

/// Middle and last block.
pub fn default_taps(depth: usize) -> Vec<usize> {
    let mut taps = vec![(depth.saturating_sub(1)) / 2, depth.saturating_sub(1)];
    taps.dedup();
    taps
}

impl ModelConfig {
    /// Small configuration for desk-scale experiments.
    pub fn micro(frames: usize, height: usize, width: usize, patch: [usize; 3], dim: usize) -> Self {
        let depth = 2;
        let taps = default_taps(depth);
        Self {
            frames,
            height,
            width,
            channels: 3,
            patch,
            dim,
            depth,
            heads: 2,
            mlp_ratio: 4,
            predictor_hidden: (dim * taps.len() / 4).max(1),
            taps,
            lambda: 0.5,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            conditioning: Conditioning::Reference,
            eps_clip: 5.0,
            sigma_data: default_sigma_data(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::BadConfig(m));
        let ext = [self.frames, self.height, self.width];
        for i in 0..3 {
            if ext[i] == 0 || self.patch[i] == 0 || ext[i] % self.patch[i] != 0 {
                return bad(format!(
                    "extents {ext:?} must be positive multiples of patch {:?}",
                    self.patch
                ));
            }
        }
        if self.channels == 0 || self.dim == 0 || self.depth == 0 || self.heads == 0 {
            return bad("channels, dim, depth and heads must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.mlp_ratio == 0 || self.predictor_hidden == 0 {
            return bad("mlp_ratio and predictor_hidden must be positive".into());
        }
        if self.taps.is_empty() || self.taps.iter().any(|&t| t >= self.depth) {
            return bad(format!("tap layers {:?} must lie in [0, {})", self.taps, self.depth));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ModelError::NegativeLambda(self.lambda));
        }
        if !(self.eps_clip > 0.0) {
            return bad("eps_clip must be positive".into());
        }
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)?;
        Ok(())
    }

    /// Token grid `(F_p, H_p, W_p)`.
    pub fn grid(&self) -> [usize; 3] {
        [
            self.frames / self.patch[0],
            self.height / self.patch[1],
            self.width / self.patch[2],
        ]
    }

    pub fn tokens(&self) -> usize {
        self.grid().iter().product()
    }

    fn patch_volume(&self) -> usize {
        self.patch.iter().product()
    }

    /// Condition channels: noisy sample, video, mask.
    pub fn cond_channels(&self) -> usize {
        2 * self.channels + 1
    }

    pub fn d_total(&self) -> usize {
        self.dim * self.taps.len()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, ModelError> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zero,
    Xavier,
}

/// Name and shape of every parameter, in declaration (and checkpoint) order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    param_layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.dim;
    let mut out = Vec::new();
    let mut p = |n: String, s: Vec<usize>, i: Init| out.push((n, s, i));
    p("embed.w".into(), vec![cfg.patch_volume() * cfg.cond_channels(), d], Init::Xavier);
    p("embed.b".into(), vec![d], Init::Zero);
    p("time.w1".into(), vec![d, d], Init::Xavier);
    p("time.b1".into(), vec![d], Init::Zero);
    p("time.w2".into(), vec![d, d], Init::Xavier);
    p("time.b2".into(), vec![d], Init::Zero);
    let hidden = d * cfg.mlp_ratio;
    for i in 0..cfg.depth {
        p(format!("block{i}.mod.w"), vec![d, 6 * d], Init::Zero);
        p(format!("block{i}.mod.b"), vec![6 * d], Init::Zero);
        p(format!("block{i}.qkv.w"), vec![d, 3 * d], Init::Xavier);
        p(format!("block{i}.qkv.b"), vec![3 * d], Init::Zero);
        p(format!("block{i}.proj.w"), vec![d, d], Init::Xavier);
        p(format!("block{i}.proj.b"), vec![d], Init::Zero);
        p(format!("block{i}.mlp.w1"), vec![d, hidden], Init::Xavier);
        p(format!("block{i}.mlp.b1"), vec![hidden], Init::Zero);
        p(format!("block{i}.mlp.w2"), vec![hidden, d], Init::Xavier);
        p(format!("block{i}.mlp.b2"), vec![d], Init::Zero);
    }
    let pout = cfg.patch_volume() * 3 * cfg.channels;
    p("final.mod.w".into(), vec![d, 2 * d], Init::Zero);
    p("final.mod.b".into(), vec![2 * d], Init::Zero);
    p("head.w".into(), vec![d, pout], Init::Zero);
    p("head.b".into(), vec![pout], Init::Zero);
    p("pred.w1".into(), vec![cfg.d_total(), cfg.predictor_hidden], Init::Xavier);
    p("pred.b1".into(), vec![cfg.predictor_hidden], Init::Zero);
    p("pred.w2".into(), vec![cfg.predictor_hidden, 1], Init::Zero);
    p("pred.b2".into(), vec![1], Init::Zero);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoseModel<T> {
    config: ModelConfig,
    schedule: NoiseSchedule,
    params: Vec<Tensor<T>>,
}

/// Values produced by a forward pass evaluated off-tape.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub eps_hat: Tensor<T>,
    pub x0_hat: Tensor<T>,
    pub d_hat: Tensor<T>,
    pub d_grid: Tensor<T>,
}

/// Handles of a forward pass recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Noise estimate `[F, H, W, C]`.
    pub eps_hat: Var,
    /// Clean-video estimate `[F, H, W, C]`.
    pub x0_hat: Var,
    /// Difference-mask estimate `[F, H, W]` in `[0, 1]`.
    pub d_hat: Var,
    /// Predictor output on the token grid `[F_p, H_p, W_p]`.
    pub d_grid: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub diffusion: Var,
    /// The mask term already weighted by lambda.
    pub mask: Var,
}

impl<T: Scalar> RoseModel<T> {
    /// DiT-style initialisation: Xavier-uniform projections, zero biases,
    /// zero modulation, output head and final predictor layer. An untrained
    /// model therefore has a half-open gate, a zero fill and predicts 0.5
    /// everywhere.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = substream(seed, stream::INIT, 0);
        let params = param_layout(&config)
            .into_iter()
            .map(|(_, shape, init)| match init {
                Init::Zero => Tensor::zeros(shape),
                Init::Xavier => xavier(&shape, &mut rng),
            })
            .collect();
        Ok(Self {
            schedule: config.schedule()?,
            config,
            params,
        })
    }

    /// Every parameter drawn from `N(0, std^2)`; used to exercise all
    /// gradient paths in tests.
    pub fn with_random_params(config: ModelConfig, seed: u64, std: f64) -> Result<Self, ModelError> {
        let mut m = Self::new(config, seed)?;
        let mut rng = substream(seed, stream::INIT, 1);
        let normal = Normal::new(0.0, std).map_err(|e| ModelError::BadConfig(e.to_string()))?;
        for p in &mut m.params {
            for v in p.data_mut() {
                *v = T::from_f64(normal.sample(&mut rng));
            }
        }
        Ok(m)
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(ModelError::BadConfig(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in specs.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    what: "parameter",
                    expected: shape.clone(),
                    found: p.shape().to_vec(),
                })
                .map_err(|e| ModelError::BadConfig(format!("{name}: {e}")));
            }
        }
        Ok(Self {
            schedule: config.schedule()?,
            config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Training decides how the video plane enters the model.
    pub fn set_conditioning(&mut self, mode: Conditioning) {
        self.config.conditioning = mode;
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> RoseModel<U> {
        RoseModel {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter as a leaf.
    pub fn leaves(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Forward pass off-tape.
    pub fn predict(&self, cond: &Tensor<T>, t: usize) -> Result<Prediction<T>, ModelError> {
        let mut tape = Tape::new();
        let params = self.leaves(&mut tape, false);
        let f = self.forward(&mut tape, &params, cond, t)?;
        Ok(Prediction {
            eps_hat: tape.value(f.eps_hat).clone(),
            x0_hat: tape.value(f.x0_hat).clone(),
            d_hat: tape.value(f.d_hat).clone(),
            d_grid: tape.value(f.d_grid).clone(),
        })
    }

    /// Records a forward pass. `params` must come from [`RoseModel::leaves`]
    /// (or equivalent, in declaration order); `cond` is `[F, H, W, 2C+1]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        cond: &Tensor<T>,
        t: usize,
    ) -> Result<Forward, ModelError> {
        let cfg = &self.config;
        let c = cfg.channels;
        let dims = [cfg.frames, cfg.height, cfg.width, cfg.cond_channels()];
        if cond.shape() != dims {
            return Err(ModelError::ShapeMismatch {
                what: "condition input",
                expected: dims.to_vec(),
                found: cond.shape().to_vec(),
            });
        }
        if params.len() != self.params.len() {
            return Err(ModelError::BadConfig(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let ab = self.schedule.alpha_bar(t)?;
        let mut next = params.iter().copied();
        let mut p = move || next.next().expect("parameter count checked above");

        // patch embedding plus fixed positional code
        let tokens = tape.constant(patchify(cond, cfg.patch)?);
        let (w, b) = (p(), p());
        let h = linear(tape, tokens, w, b)?;
        let pos = tape.constant(positional_embedding(cfg));
        let mut h = tape.add(h, pos)?;

        // timestep embedding
        let te = tape.constant(timestep_embedding(t, cfg.dim));
        let (w1, b1, w2, b2) = (p(), p(), p(), p());
        let e = linear(tape, te, w1, b1)?;
        let e = tape.silu(e)?;
        let e = linear(tape, e, w2, b2)?;
        let cvec = tape.silu(e)?;

        let mut tapped = Vec::new();
        for i in 0..cfg.depth {
            let (mw, mb) = (p(), p());
            let m = linear(tape, cvec, mw, mb)?;
            let m = tape.reshape(m, &[6 * cfg.dim])?;
            let part = |tape: &mut Tape<T>, k: usize| tape.slice(m, 0, k * cfg.dim, cfg.dim);
            let (sh1, sc1, g1) = (part(tape, 0)?, part(tape, 1)?, part(tape, 2)?);
            let (sh2, sc2, g2) = (part(tape, 3)?, part(tape, 4)?, part(tape, 5)?);

            let a = tape.layer_norm(h, 1e-6)?;
            let a = modulate(tape, a, sh1, sc1)?;
            let (qw, qb, ow, ob) = (p(), p(), p(), p());
            let a = attention(tape, a, qw, qb, ow, ob, cfg.heads)?;
            let a = tape.mul(a, g1)?;
            h = tape.add(h, a)?;

            let m2 = tape.layer_norm(h, 1e-6)?;
            let m2 = modulate(tape, m2, sh2, sc2)?;
            let (fw1, fb1, fw2, fb2) = (p(), p(), p(), p());
            let m2 = linear(tape, m2, fw1, fb1)?;
            let m2 = tape.gelu(m2)?;
            let m2 = linear(tape, m2, fw2, fb2)?;
            let m2 = tape.mul(m2, g2)?;
            h = tape.add(h, m2)?;

            if cfg.taps.contains(&i) {
                tapped.push(h);
            }
        }

        // output head: per-pixel correction and observation gate
        let (fw, fb) = (p(), p());
        let fm = linear(tape, cvec, fw, fb)?;
        let fm = tape.reshape(fm, &[2 * cfg.dim])?;
        let sh = tape.slice(fm, 0, 0, cfg.dim)?;
        let sc = tape.slice(fm, 0, cfg.dim, cfg.dim)?;
        let o = tape.layer_norm(h, 1e-6)?;
        let o = modulate(tape, o, sh, sc)?;
        let (hw, hb) = (p(), p());
        let o = linear(tape, o, hw, hb)?;
        let [fp, hp, wp] = cfg.grid();
        let [pt, ph, pw] = cfg.patch;
        let o = tape.reshape(o, &[fp, hp, wp, pt, ph, pw, 3 * c])?;
        let o = tape.permute(o, &[0, 3, 1, 4, 2, 5, 6])?;
        let o = tape.reshape(o, &[cfg.frames, cfg.height, cfg.width, 3 * c])?;
        let r = tape.slice(o, 3, 0, c)?;
        let gate = tape.slice(o, 3, c, c)?;
        let gate = tape.sigmoid(gate)?;
        let fill = tape.slice(o, 3, 2 * c, c)?;

        // base: the video outside the mask, the predicted fill inside it
        let (x_t, video, mask) = split_condition(cond, c);
        let keep: Vec<T> = video
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| T::from_f64(v.to_f64() * (1.0 - m)))
            .collect();
        let keep = tape.constant(Tensor::new(video.shape().to_vec(), keep)?);
        let inside: Vec<T> = mask.iter().map(|&m| T::from_f64(m)).collect();
        let inside = tape.constant(Tensor::new(video.shape().to_vec(), inside)?);
        let fill = tape.mul(fill, inside)?;
        let base = tape.add(keep, fill)?;

        let (sa, ss) = (ab.sqrt(), (1.0 - ab).sqrt());
        let s2 = cfg.sigma_data * cfg.sigma_data;
        let w = s2 / (s2 + (1.0 - ab) / ab);
        let wy: Vec<T> = x_t.data().iter().map(|&x| T::from_f64(w * x.to_f64() / sa)).collect();
        let wy = tape.constant(Tensor::new(x_t.shape().to_vec(), wy)?);
        let wb = tape.scale(base, w)?;
        let skip = tape.sub(wy, wb)?;
        let gated = tape.mul(gate, skip)?;
        let x0_hat = tape.add(base, r)?;
        let x0_hat = tape.add(x0_hat, gated)?;
        let xs: Vec<T> = x_t.data().iter().map(|&x| T::from_f64(x.to_f64() / ss)).collect();
        let xs = tape.constant(Tensor::new(x_t.shape().to_vec(), xs)?);
        let corr = tape.scale(x0_hat, -sa / ss)?;
        let eps = tape.add(xs, corr)?;
        let eps_hat = tape.clamp(eps, -cfg.eps_clip, cfg.eps_clip)?;

        // difference-mask predictor
        let feats = if tapped.len() == 1 {
            tapped[0]
        } else {
            tape.concat(&tapped, 1)?
        };
        let (pw1, pb1, pw2, pb2) = (p(), p(), p(), p());
        let q = linear(tape, feats, pw1, pb1)?;
        let q = tape.gelu(q)?;
        let q = linear(tape, q, pw2, pb2)?;
        let q = tape.sigmoid(q)?;
        let d_grid = tape.reshape(q, &[fp, hp, wp])?;
        let d_hat = tape.trilinear(d_grid, [cfg.frames, cfg.height, cfg.width])?;

        Ok(Forward {
            eps_hat,
            x0_hat,
            d_hat,
            d_grid,
        })
    }
}

/// `MSE(eps, eps_hat) + lambda * MSE(d_hat, d_gt)`, with `d_gt`
/// nearest-neighbour resampled to the resolution of `d_hat`.
pub fn loss<T: Scalar>(
    tape: &mut Tape<T>,
    eps: Var,
    eps_hat: Var,
    d_hat: Var,
    d_gt: &Mask,
    lambda: f64,
) -> Result<LossTerms, ModelError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(ModelError::NegativeLambda(lambda));
    }
    let diffusion = tape.mse(eps, eps_hat)?;
    let target: Vec<T> = d_gt.bits().iter().map(|&b| T::from_f64(b as f64)).collect();
    let target = tape.constant(Tensor::new(d_gt.dims().to_vec(), target)?);
    let shape = tape.shape(d_hat).to_vec();
    if shape.len() != 3 {
        return Err(ModelError::ShapeMismatch {
            what: "mask prediction",
            expected: d_gt.dims().to_vec(),
            found: shape,
        });
    }
    let target = tape.nearest(target, [shape[0], shape[1], shape[2]])?;
    let m = tape.mse(d_hat, target)?;
    let mask = tape.scale(m, lambda)?;
    let total = tape.add(diffusion, mask)?;
    Ok(LossTerms {
        total,
        diffusion,
        mask,
    })
}

/// Stacks `[x_t; V; M]` along channels. In baseline mode the video plane is
/// `V * (1 - M)`.
pub fn build_condition_input(
    x_t: &VideoTensor,
    video: &VideoTensor,
    mask: &Mask,
    mode: Conditioning,
) -> Result<Tensor<f32>, ModelError> {
    x_t.check_same_shape(video)?;
    let [f, h, w, c] = video.dims();
    if mask.dims() != [f, h, w] {
        return Err(ModelError::ShapeMismatch {
            what: "mask",
            expected: vec![f, h, w],
            found: mask.dims().to_vec(),
        });
    }
    let cc = 2 * c + 1;
    let mut out = Vec::with_capacity(f * h * w * cc);
    for (i, (xp, vp)) in x_t
        .data()
        .chunks_exact(c)
        .zip(video.data().chunks_exact(c))
        .enumerate()
    {
        let m = mask.bits()[i] != 0;
        out.extend_from_slice(xp);
        if m && mode == Conditioning::Baseline {
            out.extend(std::iter::repeat_n(0.0, c));
        } else {
            out.extend_from_slice(vp);
        }
        out.push(if m { 1.0 } else { 0.0 });
    }
    Ok(Tensor::new(vec![f, h, w, cc], out)?)
}

/// Noisy sample, conditioning video and the mask repeated per channel.
fn split_condition<T: Scalar>(cond: &Tensor<T>, c: usize) -> (Tensor<T>, Tensor<T>, Vec<f64>) {
    let s = cond.shape();
    let shape = vec![s[0], s[1], s[2], c];
    let mut x = Vec::with_capacity(cond.len() / s[3] * c);
    let mut v = Vec::with_capacity(x.capacity());
    let mut m = Vec::with_capacity(x.capacity());
    for px in cond.data().chunks_exact(s[3]) {
        x.extend_from_slice(&px[..c]);
        v.extend_from_slice(&px[c..2 * c]);
        m.extend(std::iter::repeat(px[2 * c].to_f64()).take(c));
    }
    (
        Tensor::new(shape.clone(), x).expect("sizes match"),
        Tensor::new(shape, v).expect("sizes match"),
        m,
    )
}

fn xavier<T: Scalar>(shape: &[usize], rng: &mut crate::rng::StreamRng) -> Tensor<T> {
    let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-limit..limit))).collect();
    Tensor::new(shape.to_vec(), data).expect("sizes match")
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn modulate<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var, TensorError> {
    let s = tape.shift(scale, 1.0)?;
    let y = tape.mul(x, s)?;
    tape.add(y, shift)
}

fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    qkv_w: Var,
    qkv_b: Var,
    out_w: Var,
    out_b: Var,
    heads: usize,
) -> Result<Var, TensorError> {
    let (l, d) = {
        let s = tape.shape(x);
        (s[0], s[1])
    };
    let dh = d / heads;
    let qkv = linear(tape, x, qkv_w, qkv_b)?;
    let qkv = tape.reshape(qkv, &[l, 3, heads, dh])?;
    let qkv = tape.permute(qkv, &[1, 2, 0, 3])?;
    let mut pick = |k: usize| -> Result<Var, TensorError> {
        let s = tape.slice(qkv, 0, k, 1)?;
        tape.reshape(s, &[heads, l, dh])
    };
    let (q, k, v) = (pick(0)?, pick(1)?, pick(2)?);
    let q = tape.scale(q, 1.0 / (dh as f64).sqrt())?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let attn = tape.softmax(scores)?;
    let o = tape.matmul(attn, v)?;
    let o = tape.permute(o, &[1, 0, 2])?;
    let o = tape.reshape(o, &[l, d])?;
    linear(tape, o, out_w, out_b)
}

fn sinusoid(pos: f64, k: usize, width: usize) -> f64 {
    // channel k of a width-`width` code: sin/cos pairs with geometric frequencies
    let pair = k / 2;
    let freq = (-(10_000f64).ln() * (2 * pair) as f64 / width.max(1) as f64).exp();
    if k % 2 == 0 {
        (pos * freq).sin()
    } else {
        (pos * freq).cos()
    }
}

/// `[1, dim]` sinusoidal code of a timestep.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let data = (0..dim).map(|k| T::from_f64(sinusoid(t as f64, k, dim))).collect();
    Tensor::new(vec![1, dim], data).expect("sizes match")
}

/// `[L, dim]` fixed 3D positional code. Channel `j` encodes the frame, row
/// or column index for `j % 3 == 0, 1, 2`.
pub fn positional_embedding<T: Scalar>(cfg: &ModelConfig) -> Tensor<T> {
    let [fp, hp, wp] = cfg.grid();
    let d = cfg.dim;
    let width = d.div_ceil(3);
    let mut data = Vec::with_capacity(fp * hp * wp * d);
    for a in 0..fp {
        for b in 0..hp {
            for c in 0..wp {
                let coord = [a, b, c];
                for j in 0..d {
                    data.push(T::from_f64(sinusoid(coord[j % 3] as f64, j / 3, width)));
                }
            }
        }
    }
    Tensor::new(vec![fp * hp * wp, d], data).expect("sizes match")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::micro(4, 8, 8, [2, 4, 4], 12)
    }

    fn cond_for(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = substream(seed, "test", 0);
        let n = cfg.frames * cfg.height * cfg.width * cfg.cond_channels();
        let data = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(
            vec![cfg.frames, cfg.height, cfg.width, cfg.cond_channels()],
            data,
        )
        .unwrap()
    }

    #[test]
    fn default_taps_are_middle_and_last() {
        assert_eq!(default_taps(2), vec![0, 1]);
        assert_eq!(default_taps(4), vec![1, 3]);
        assert_eq!(default_taps(1), vec![0]);
    }

    #[test]
    fn fresh_model_predicts_half_and_half_open_gate() {
        let cfg = tiny();
        let m = RoseModel::<f64>::new(cfg.clone(), 1).unwrap();
        let cond = cond_for(&cfg, 2);
        let t = 400;
        let p = m.predict(&cond, t).unwrap();
        assert!(p.d_hat.data().iter().all(|&v| v == 0.5));
        // zero head: r = 0, fill = 0, g = 1/2
        let ab = m.schedule().alpha_bar(t).unwrap();
        let w = 0.25 / (0.25 + (1.0 - ab) / ab);
        for (i, &x0) in p.x0_hat.data().iter().enumerate() {
            let px = &cond.data()[(i / 3) * 7..(i / 3 + 1) * 7];
            let (x, v, mask) = (px[i % 3], px[3 + i % 3], px[6]);
            let base = v * (1.0 - mask);
            let expect = base + 0.5 * w * (x / ab.sqrt() - base);
            assert!((x0 - expect).abs() < 1e-12);
        }
        assert_eq!(p.d_grid.shape(), &[2, 2, 2]);
        assert_eq!(p.d_hat.shape(), &[4, 8, 8]);
    }

    #[test]
    fn outputs_have_expected_ranges() {
        let cfg = tiny();
        let m = RoseModel::<f64>::with_random_params(cfg.clone(), 4, 0.5).unwrap();
        let p = m.predict(&cond_for(&cfg, 5), 10).unwrap();
        assert!(p.d_hat.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(p.eps_hat.data().iter().all(|&v| v.abs() <= cfg.eps_clip));
        assert_eq!(p.eps_hat.shape(), &[4, 8, 8, 3]);
    }

    #[test]
    fn single_patch_gives_constant_mask() {
        let cfg = ModelConfig::micro(2, 4, 4, [2, 4, 4], 6);
        let m = RoseModel::<f64>::with_random_params(cfg.clone(), 7, 0.5).unwrap();
        let p = m.predict(&cond_for(&cfg, 1), 3).unwrap();
        let v0 = p.d_hat.data()[0];
        assert!(p.d_hat.data().iter().all(|&v| (v - v0).abs() < 1e-12));
        assert_eq!(p.d_grid.shape(), &[1, 1, 1]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny();
        let m = RoseModel::<f32>::with_random_params(cfg.clone(), 4, 0.3).unwrap();
        let cond = cond_for(&cfg, 5).cast::<f32>();
        let a = m.predict(&cond, 77).unwrap();
        let b = m.predict(&cond, 77).unwrap();
        assert_eq!(a.eps_hat, b.eps_hat);
        assert_eq!(a.d_hat, b.d_hat);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny();
        c.taps = vec![2];
        assert!(RoseModel::<f32>::new(c, 0).is_err());
        let mut c = tiny();
        c.patch = [3, 4, 4];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.lambda = -1.0;
        assert!(matches!(c.validate(), Err(ModelError::NegativeLambda(_))));
        let m = RoseModel::<f64>::new(tiny(), 0).unwrap();
        assert!(matches!(
            m.predict(&cond_for(&tiny(), 0), 0),
            Err(ModelError::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn condition_channels_and_modes() {
        let v = VideoTensor::filled(2, 4, 4, 3, 0.7);
        let x = VideoTensor::filled(2, 4, 4, 3, -0.2);
        let m = Mask::from_fn(2, 4, 4, |_, y, _| y < 2);
        let r = build_condition_input(&x, &v, &m, Conditioning::Reference).unwrap();
        assert_eq!(r.shape(), &[2, 4, 4, 7]);
        let b = build_condition_input(&x, &v, &m, Conditioning::Baseline).unwrap();
        for (i, (pr, pb)) in r.data().chunks(7).zip(b.data().chunks(7)).enumerate() {
            let inside = m.bits()[i] != 0;
            assert_eq!(&pr[..3], &[-0.2; 3]);
            assert_eq!(&pr[3..6], &[0.7; 3]);
            assert_eq!(pb[3..6], if inside { [0.0; 3] } else { [0.7; 3] });
            assert_eq!(pr[6], if inside { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn loss_special_cases() {
        let mut tape = Tape::<f64>::new();
        let eps = tape.constant(Tensor::from_f64([2, 2], &[0.1, -0.3, 0.5, 2.0]).unwrap());
        let gt = Mask::from_bits(1, 2, 2, vec![true, false, false, true]);
        let d = tape.constant(Tensor::from_f64([1, 2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap());
        let l = loss(&mut tape, eps, eps, d, &gt, 0.5).unwrap();
        assert!((tape.value(l.total).item() - 0.5).abs() < 1e-15);
        let perfect = tape.constant(Tensor::from_f64([1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = loss(&mut tape, eps, eps, perfect, &gt, 0.5).unwrap();
        assert_eq!(tape.value(l.total).item(), 0.0);
        let other = tape.constant(Tensor::from_f64([2, 2], &[0.0; 4]).unwrap());
        let l = loss(&mut tape, eps, other, d, &gt, 0.0).unwrap();
        let mse = (0.01 + 0.09 + 0.25 + 4.0) / 4.0;
        assert!((tape.value(l.total).item() - mse).abs() < 1e-15);
        assert_eq!(tape.value(l.mask).item(), 0.0);
        assert!(loss(&mut tape, eps, eps, d, &gt, -0.1).is_err());
    }
}
