use crate::model::grad::Gradients;
use crate::model::{cast, Real, SeqClassifier};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(model: &SeqClassifier<F>, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<F>> = model.params().iter().map(|p| vec![F::zero(); p.len()]).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut SeqClassifier<F>, grads: &Gradients<F>) {
        self.step += 1;
        let b1: F = cast(self.beta1);
        let b2: F = cast(self.beta2);
        let one = F::one();
        let lr_t: F = cast(
            self.learning_rate * (1.0 - self.beta2.powi(self.step)).sqrt() / (1.0 - self.beta1.powi(self.step)),
        );
        let eps: F = cast(self.epsilon);
        for ((param, grad), (m, v)) in model
            .params_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                param[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::Granularity;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut m = SeqClassifier::<f64>::zeros(Granularity::Packet, 2, vec!["a".into()]);
        let mut g = Gradients::zeros_like(&m);
        g.head_b[0] = 4.0;
        g.head_b[1] = -0.5;
        let mut adam = Adam::new(&m, 0.01);
        adam.step(&mut m, &g);
        assert!((m.head_b[0] + 0.01).abs() < 1e-8);
        assert!((m.head_b[1] - 0.01).abs() < 1e-8);
        assert_eq!(m.b[0], 0.0);
    }
}
