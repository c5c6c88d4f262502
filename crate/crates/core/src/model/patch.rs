use super::ModelError;
use crate::tensor::{Scalar, Tensor};

fn grid(shape: &[usize], patch: [usize; 3]) -> Result<[usize; 4], ModelError> {
    if shape.len() != 4 {
        return Err(ModelError::BadConfig(format!(
            "patchify expects [F, H, W, C], got {shape:?}"
        )));
    }
    for i in 0..3 {
        if patch[i] == 0 || shape[i] % patch[i] != 0 {
            return Err(ModelError::BadConfig(format!(
                "extent {} on axis {i} is not divisible by patch size {}",
                shape[i], patch[i]
            )));
        }
    }
    Ok([
        shape[0] / patch[0],
        shape[1] / patch[1],
        shape[2] / patch[2],
        shape[3],
    ])
}

/// Source offset in the `[F, H, W, C]` volume of every element of the
/// `[L, pt*ph*pw*C]` token matrix, row major.
pub(crate) fn patch_map(shape: &[usize], patch: [usize; 3]) -> Result<Vec<usize>, ModelError> {
    let [fp, hp, wp, c] = grid(shape, patch)?;
    let [pt, ph, pw] = patch;
    let (h, w) = (shape[1], shape[2]);
    let mut map = Vec::with_capacity(shape.iter().product());
    for a in 0..fp {
        for b in 0..hp {
            for d in 0..wp {
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let base = (((a * pt + dt) * h + b * ph + dy) * w + d * pw + dx) * c;
                            map.extend(base..base + c);
                        }
                    }
                }
            }
        }
    }
    Ok(map)
}

/// Rearranges `[F, H, W, C]` into tokens `[L, pt*ph*pw*C]` with
/// `L = (F/pt)(H/ph)(W/pw)`, tokens in frame, row, column order.
pub fn patchify<T: Scalar>(x: &Tensor<T>, patch: [usize; 3]) -> Result<Tensor<T>, ModelError> {
    let [fp, hp, wp, c] = grid(x.shape(), patch)?;
    let map = patch_map(x.shape(), patch)?;
    let src = x.data();
    let data = map.iter().map(|&i| src[i]).collect();
    Ok(Tensor::new(
        vec![fp * hp * wp, patch.iter().product::<usize>() * c],
        data,
    )?)
}

/// Inverse of [`patchify`] for an output of extents `dims = [F, H, W, C]`.
pub fn unpatchify<T: Scalar>(
    tokens: &Tensor<T>,
    patch: [usize; 3],
    dims: [usize; 4],
) -> Result<Tensor<T>, ModelError> {
    let [fp, hp, wp, c] = grid(&dims, patch)?;
    let expected = vec![fp * hp * wp, patch.iter().product::<usize>() * c];
    if tokens.shape() != expected.as_slice() {
        return Err(ModelError::ShapeMismatch {
            what: "tokens",
            expected,
            found: tokens.shape().to_vec(),
        });
    }
    let map = patch_map(&dims, patch)?;
    let mut out = vec![T::ZERO; tokens.len()];
    for (k, &i) in map.iter().enumerate() {
        out[i] = tokens.data()[k];
    }
    Ok(Tensor::new(dims.to_vec(), out)?)
}
