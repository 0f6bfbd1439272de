use super::tensor::Module;

const RMSPROP_EPS: f64 = 1e-8;

/// One RMSProp step over every parameter of `m`, then zeroes the gradients.
///
/// `s ← decay·s + (1−decay)·g²`, `θ ← θ − lr·g / (√s + 1e-8)`.
pub fn rmsprop_step<M: Module + ?Sized>(m: &mut M, lr: f64, decay: f64) {
    for p in m.parameters_mut() {
        let value = p.value.data_mut();
        let grad = p.grad.data_mut();
        let state = p.step_state.data_mut();
        for ((v, g), s) in value.iter_mut().zip(grad.iter_mut()).zip(state.iter_mut()) {
            *s = decay * *s + (1.0 - decay) * *g * *g;
            *v -= lr * *g / (libm::sqrt(*s) + RMSPROP_EPS);
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Parameter, Tensor};
    use alloc::vec;
    use alloc::vec::Vec;

    struct One(Parameter);

    impl Module for One {
        fn parameters(&self) -> Vec<&Parameter> {
            vec![&self.0]
        }
        fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut m = One(Parameter::new(Tensor::vector(vec![1.5, -2.0])));
        rmsprop_step(&mut m, 0.01, 0.99);
        assert_eq!(m.0.value.data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_from_rest() {
        let mut m = One(Parameter::new(Tensor::scalar(0.0)));
        m.0.grad.data_mut()[0] = 1.0;
        rmsprop_step(&mut m, 0.01, 0.99);
        let expect = -0.01 * 1.0 / (0.01f64.sqrt() + 1e-8);
        assert!((m.0.value.data()[0] - expect).abs() < 1e-15);
        assert!((m.0.value.data()[0] + 0.1).abs() < 1e-6);
        assert_eq!(m.0.grad.data(), &[0.0]);
    }

    #[test]
    fn repeated_gradient_steps_approach_lr() {
        let mut m = One(Parameter::new(Tensor::scalar(0.0)));
        let mut last = 0.0;
        let mut delta = 0.0;
        for _ in 0..3000 {
            m.0.grad.data_mut()[0] = 0.7;
            rmsprop_step(&mut m, 0.01, 0.99);
            delta = m.0.value.data()[0] - last;
            last = m.0.value.data()[0];
        }
        assert!((delta.abs() - 0.01).abs() < 1e-6, "{delta}");
    }
}
