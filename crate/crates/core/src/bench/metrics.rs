use super::BenchError;
use crate::mask::Mask;
use crate::video::VideoTensor;

/// Reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;

fn same_shape(a: &VideoTensor, b: &VideoTensor) -> Result<(), BenchError> {
    if a.dims() != b.dims() {
        return Err(BenchError::ShapeMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

fn region(mask: &Mask, dims: [usize; 4]) -> Result<(), BenchError> {
    if mask.dims() != dims[..3] {
        return Err(BenchError::ShapeMismatch(
            dims,
            [mask.frames(), mask.height(), mask.width(), dims[3]],
        ));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10 log10(1 / MSE)` over all elements.
pub fn psnr(a: &VideoTensor, b: &VideoTensor) -> Result<f64, BenchError> {
    same_shape(a, b)?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(psnr_from_mse(se / a.data().len() as f64))
}

/// PSNR over the pixels (all channels) where `mask` is set.
pub fn masked_psnr(a: &VideoTensor, b: &VideoTensor, mask: &Mask) -> Result<f64, BenchError> {
    same_shape(a, b)?;
    region(mask, a.dims())?;
    let c = a.channels();
    let (mut se, mut n) = (0.0, 0usize);
    for (i, &m) in mask.bits().iter().enumerate() {
        if m != 0 {
            for k in i * c..(i + 1) * c {
                se += (a.data()[k] as f64 - b.data()[k] as f64).powi(2);
            }
            n += c;
        }
    }
    if n == 0 {
        return Err(BenchError::EmptyRegion("psnr mask"));
    }
    Ok(psnr_from_mse(se / n as f64))
}

/// Largest odd window no larger than the default or the frame.
pub fn default_window(height: usize, width: usize) -> usize {
    let m = SSIM_WINDOW.min(height).min(width);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

fn gaussian(window: usize) -> Vec<f64> {
    let sigma = window as f64 / 6.0;
    let c = (window / 2) as f64;
    let w: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering of an `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean over frames of the channel-averaged SSIM map with a Gaussian
/// window (sigma = window / 6).
pub fn ssim(a: &VideoTensor, b: &VideoTensor, window: usize, k1: f64, k2: f64) -> Result<f64, BenchError> {
    same_shape(a, b)?;
    let [f, h, w, c] = a.dims();
    if window == 0 || window % 2 == 0 || window > h.min(w) {
        return Err(BenchError::BadWindow { window, height: h, width: w });
    }
    let (c1, c2) = ((k1 * 1.0).powi(2), (k2 * 1.0).powi(2));
    let k = gaussian(window);
    let plane = |v: &VideoTensor, t: usize, ch: usize| -> Vec<f64> {
        v.frame(t).iter().skip(ch).step_by(c).map(|&x| x as f64).collect()
    };
    let mut total = 0.0;
    for t in 0..f {
        let mut frame = 0.0;
        for ch in 0..c {
            let (x, y) = (plane(a, t, ch), plane(b, t, ch));
            let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
            let (mx, my) = (filter(&x, h, w, &k), filter(&y, h, w, &k));
            let (exx, eyy, exy) = (
                filter(&prod(&x, &x), h, w, &k),
                filter(&prod(&y, &y), h, w, &k),
                filter(&prod(&x, &y), h, w, &k),
            );
            let mut acc = 0.0;
            for i in 0..mx.len() {
                let (vx, vy, cxy) = (
                    exx[i] - mx[i] * mx[i],
                    eyy[i] - my[i] * my[i],
                    exy[i] - mx[i] * my[i],
                );
                let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2);
                let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
                acc += num / den;
            }
            frame += acc / mx.len() as f64;
        }
        total += frame / c as f64;
    }
    Ok(total / f as f64)
}

/// SSIM with the standard constants and [`default_window`].
pub fn ssim_default(a: &VideoTensor, b: &VideoTensor) -> Result<f64, BenchError> {
    ssim(a, b, default_window(a.height(), a.width()), SSIM_K1, SSIM_K2)
}

/// Mean absolute inter-frame difference over pixels set in `static_mask` in
/// both frames of each pair.
pub fn temporal_flicker(v: &VideoTensor, static_mask: &Mask) -> Result<f64, BenchError> {
    let [f, h, w, c] = v.dims();
    if f < 2 {
        return Err(BenchError::TooFewFrames { need: 2, got: f });
    }
    region(static_mask, v.dims())?;
    let (mut acc, mut n) = (0.0, 0usize);
    for t in 0..f - 1 {
        for y in 0..h {
            for x in 0..w {
                if static_mask.get(t, y, x) && static_mask.get(t + 1, y, x) {
                    let (p, q) = (v.pixel(t, y, x), v.pixel(t + 1, y, x));
                    acc += p.iter().zip(q).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>();
                    n += c;
                }
            }
        }
    }
    if n == 0 {
        return Err(BenchError::EmptyRegion("static mask"));
    }
    Ok(acc / n as f64)
}

/// PSNR between input and output outside `edit_region`.
pub fn background_consistency(
    input: &VideoTensor,
    output: &VideoTensor,
    edit_region: &Mask,
) -> Result<f64, BenchError> {
    region(edit_region, input.dims())?;
    masked_psnr(input, output, &edit_region.complement())
        .map_err(|e| match e {
            BenchError::EmptyRegion(_) => BenchError::EmptyRegion("edit region complement"),
            other => other,
        })
}

/// `1 / (1 + mean |second temporal difference|)`.
pub fn motion_smoothness(v: &VideoTensor) -> Result<f64, BenchError> {
    let f = v.frames();
    if f < 3 {
        return Err(BenchError::TooFewFrames { need: 3, got: f });
    }
    let mut acc = 0.0;
    for t in 1..f - 1 {
        for ((a, b), c) in v.frame(t - 1).iter().zip(v.frame(t)).zip(v.frame(t + 1)) {
            acc += (*a as f64 - 2.0 * *b as f64 + *c as f64).abs();
        }
    }
    let n = (f - 2) * v.frame(0).len();
    Ok(1.0 / (1.0 + acc / n as f64))
}
