use super::{Element, Tensor};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(
                "sgd",
                format!("momentum {momentum} outside [0, 1)"),
            ));
        }
        Ok(Sgd {
            momentum: T::from_f64_lossy(momentum),
            velocity: Vec::new(),
        })
    }

    /// Applies one update to `params` (always passed in the same order) and
    /// zeroes their gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid("sgd", format!("invalid learning rate {lr}")));
        }
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(format!("#{i}")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::invalid(
                "sgd",
                "parameter list changed between steps",
            ));
        }
        let lr = T::from_f64_lossy(lr);
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let grad = p.grad.take().expect("checked above");
            for ((vi, gi), pi) in v.iter_mut().zip(&grad).zip(p.data_mut()) {
                *vi = self.momentum * *vi + *gi;
                *pi = *pi - lr * *vi;
            }
            p.grad = Some(vec![T::zero(); grad.len()]);
        }
        Ok(())
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::from_f64(vec![1], &[v]).unwrap();
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn plain_step() {
        let mut p = scalar(1.0, 0.5);
        Sgd::new(0.0).unwrap().step(&mut [&mut p], 0.1).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(p.grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut p = scalar(3.0, 0.0);
        Sgd::new(0.9).unwrap().step(&mut [&mut p], 0.1).unwrap();
        assert_eq!(p.data()[0], 3.0);
    }

    #[test]
    fn momentum_two_steps() {
        // scalar simulation of the recurrence
        let (mut v, mut x) = (0.0f64, 0.0f64);
        for _ in 0..2 {
            v = 0.9 * v + 1.0;
            x -= 0.1 * v;
        }
        assert!((x - -0.29).abs() < 1e-15);

        let mut p = scalar(0.0, 1.0);
        let mut opt = Sgd::new(0.9).unwrap();
        opt.step(&mut [&mut p], 0.1).unwrap();
        p.grad = Some(vec![1.0]);
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert!((p.data()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut p = Tensor::<f64>::zeros(vec![2]);
        assert!(matches!(
            Sgd::new(0.0).unwrap().step(&mut [&mut p], 0.1),
            Err(Error::MissingGradient(_))
        ));
        assert!(Sgd::<f64>::new(1.0).is_err());
    }
}
