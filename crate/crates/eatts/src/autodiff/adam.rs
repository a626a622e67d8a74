//! Adam optimizer over named parameter sets.

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{EattsError, Result};

/// A trainable tensor with a stable name (used in checkpoints and error
/// reporting).
#[derive(Debug, Clone)]
pub struct NamedParam<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Real> NamedParam<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        NamedParam {
            name: name.into(),
            value,
        }
    }
}

/// Adam state: per-parameter first/second moments plus the shared step count.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[NamedParam<T>], lr: f64) -> AdamState<T> {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m: params
                .iter()
                .map(|p| vec![T::ZERO; p.value.data().len()])
                .collect(),
            v: params
                .iter()
                .map(|p| vec![T::ZERO; p.value.data().len()])
                .collect(),
        }
    }

    /// One Adam update with bias correction. `grads` must align with
    /// `params` element-for-element.
    pub fn step(&mut self, params: &mut [NamedParam<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(EattsError::Contract(format!(
                "adam_step: {} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads.iter()) {
            if p.value.data().len() != g.len() {
                return Err(EattsError::dim(
                    format!("adam_step '{}'", p.name),
                    p.value.shape().dims(),
                    &[g.len()],
                ));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(EattsError::Numeric {
                    name: p.name.clone(),
                    detail: "non-finite gradient".into(),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let corr1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(t as i32)));
        let corr2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(t as i32)));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.epsilon);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.value.data_mut();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + one_m_b1 * g[i];
                v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                let m_hat = m[i] * corr1;
                let v_hat = v[i] * corr2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tensor::Shape;

    fn params() -> Vec<NamedParam<f64>> {
        vec![NamedParam::new(
            "w",
            Tensor::new(Shape::vector(3), vec![1.0, -2.0, 0.5]).unwrap(),
        )]
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = params();
        let mut st = AdamState::new(&ps, 1e-3);
        let before = ps[0].value.data().to_vec();
        for _ in 0..10 {
            st.step(&mut ps, &[vec![0.0; 3]]).unwrap();
        }
        assert_eq!(ps[0].value.data(), &before[..]);
        // Moments stay at zero under zero gradients.
        assert!(st.m[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_gradient_update_approaches_lr_sign() {
        // With g constant, m_hat -> g and v_hat -> g^2, so the per-step
        // update magnitude approaches lr.
        let mut ps = params();
        let lr = 1e-3;
        let mut st = AdamState::new(&ps, lr);
        let g = vec![0.37, -1.9, 4.2];
        let mut prev = ps[0].value.data().to_vec();
        let mut last_delta = vec![0.0; 3];
        for _ in 0..1000 {
            st.step(&mut ps, &[g.clone()]).unwrap();
            let cur = ps[0].value.data().to_vec();
            for i in 0..3 {
                last_delta[i] = cur[i] - prev[i];
            }
            prev = cur;
        }
        for i in 0..3 {
            let expected = -lr * g[i].signum();
            assert!(
                (last_delta[i] - expected).abs() < 1e-3 * lr.max(1.0),
                "delta {} vs {}",
                last_delta[i],
                expected
            );
        }
    }

    #[test]
    fn step_count_increments_by_one() {
        let mut ps = params();
        let mut st = AdamState::new(&ps, 1e-3);
        assert_eq!(st.step_count, 0);
        st.step(&mut ps, &[vec![1.0; 3]]).unwrap();
        assert_eq!(st.step_count, 1);
        st.step(&mut ps, &[vec![1.0; 3]]).unwrap();
        assert_eq!(st.step_count, 2);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut ps = params();
        let mut st = AdamState::new(&ps, 1e-3);
        let err = st.step(&mut ps, &[vec![f64::NAN, 0.0, 0.0]]).unwrap_err();
        assert!(err.to_string().contains("'w'"), "{err}");
    }
}
