use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("step size {0} outside [1e-6, 1e-3]")]
    BadStep(f64),
    #[error("function is not deterministic: {0} vs {1}")]
    NonDeterministic(f64, f64),
    #[error("function output is not a scalar")]
    NotScalar,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn eval<F>(f: &F, xs: &[Tensor<f64>]) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(GradCheckError::NotScalar);
    }
    Ok(v.item())
}

/// Largest relative discrepancy between the tape gradient of a scalar
/// function and its central finite difference, over every coordinate of
/// every input.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(GradCheckError::BadStep(eps));
    }
    let (a, b) = (eval(&f, xs)?, eval(&f, xs)?);
    if a.to_bits() != b.to_bits() {
        return Err(GradCheckError::NonDeterministic(a, b));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = xs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient").data().to_vec();
        for (j, &an) in analytic.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let num = (up - down) / (2.0 * eps);
            let rel = (an - num).abs() / an.abs().max(num.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn rejects_out_of_range_step() {
        let x = Tensor::<f64>::zeros([2]);
        let r = grad_check(|t, v| t.sum(v[0]), &[x], 0.1);
        assert!(matches!(r, Err(GradCheckError::BadStep(_))));
    }

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[5, 3], &mut rng);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&[6], &mut rng);
        let c = random(&[6], &mut rng);
        let err = grad_check(
            move |t, v| {
                let cv = t.constant(c.clone());
                let p = t.mul(v[0], cv)?;
                t.sum(p)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn two_layer_mlp_with_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&[1, 8], &mut rng);
        let w1 = random(&[8, 16], &mut rng);
        let b1 = random(&[16], &mut rng);
        let w2 = random(&[16, 4], &mut rng);
        let target = random(&[1, 4], &mut rng);
        let err = grad_check(
            move |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add(h, v[2])?;
                let h = t.gelu(h)?;
                let y = t.matmul(h, v[3])?;
                let tv = t.constant(target.clone());
                t.mse(y, tv)
            },
            &[x, w1, b1, w2],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::<f64>::zeros([1]);
        let r = grad_check(
            |t, v| {
                calls.set(calls.get() + 1.0);
                let s = t.sum(v[0])?;
                t.shift(s, calls.get())
            },
            &[x],
            1e-5,
        );
        assert!(matches!(r, Err(GradCheckError::NonDeterministic(..))));
    }
}
