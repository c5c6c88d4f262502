use crate::tensor::Tensor;

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &[Tensor<f32>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<f32>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<f32>] {
        &self.v
    }

    /// Applies one update; `grads` pairs with `params` by position.
    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let mut p = vec![Tensor::new([3], vec![1.0f32, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::new([3], vec![0.3f32, -4.0, 1e-3]).unwrap()];
        let mut opt = Adam::new(&p, 0.01, 0.9, 0.999, 1e-8);
        opt.update(&mut p, &g);
        let want = [0.99, -1.99, 0.49];
        for (a, b) in p[0].data().iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = vec![Tensor::new([2], vec![3.0f32, -1.0]).unwrap()];
        let mut opt = Adam::new(&p, 0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let g: Vec<f32> = p[0].data().iter().zip([1.0f32, -2.0]).map(|(x, c)| 2.0 * (x - c)).collect();
            opt.update(&mut p, &[Tensor::new([2], g).unwrap()]);
        }
        assert!((p[0].data()[0] - 1.0).abs() < 1e-3);
        assert!((p[0].data()[1] + 2.0).abs() < 1e-3);
    }
}
