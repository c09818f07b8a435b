use num_traits::Zero;

use crate::tensor::{with_dtype, Element, Tensor, TensorError};

/// SGD with heavy-ball momentum in velocity form:
/// `v <- momentum * v + g`, `theta <- theta - lr * v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    lr: f64,
    momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Result<Self, TensorError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TensorError::Validation(format!("learning rate {lr} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TensorError::Validation(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Applies one update. `grads[i]` must be present with `params[i]`'s dims.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<(), TensorError> {
        if grads.len() != params.len() {
            return Err(TensorError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g
                .as_ref()
                .ok_or_else(|| TensorError::Contract(format!("missing gradient for parameter {i}")))?;
            if g.dims() != p.dims() || g.dtype() != p.dtype() {
                return Err(TensorError::shape(
                    "sgd_step",
                    format!("parameter {i} is {:?}<{}>, gradient {:?}<{}>", p.dims(), p.dtype(), g.dims(), g.dtype()),
                ));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(Tensor::zeros_like).collect();
        } else if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.dims() != p.dims())
        {
            return Err(TensorError::Contract("parameter set changed between optimizer steps".into()));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let g = g.as_ref().expect("checked above");
            with_dtype!(p.dtype(), T => {
                let lr = T::of(self.lr);
                let m = T::of(self.momentum);
                let gs = g.typed::<T>();
                let vs = v.typed_mut::<T>();
                for (vv, &gv) in vs.iter_mut().zip(gs) {
                    *vv = if m.is_zero() { gv } else { m * *vv + gv };
                }
                for (pv, &vv) in p.typed_mut::<T>().iter_mut().zip(vs.iter()) {
                    *pv = *pv - lr * vv;
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_f64(&[1], &[v]).unwrap()
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut opt = SgdMomentum::new(0.1, 0.0).unwrap();
        let mut p = vec![scalar(1.0)];
        opt.step(&mut p, &[Some(scalar(1.0))]).unwrap();
        assert_eq!(p[0].to_f64_vec()[0], 1.0 - 0.1 * 1.0);
    }

    #[test]
    fn momentum_recurrence_unrolled() {
        // v1 = 1, theta1 = -0.1; v2 = 0.9 + 1 = 1.9, theta2 = -0.1 - 0.19 = -0.29
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        let mut p = vec![scalar(0.0)];
        opt.step(&mut p, &[Some(scalar(1.0))]).unwrap();
        opt.step(&mut p, &[Some(scalar(1.0))]).unwrap();
        assert!((p[0].to_f64_vec()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut opt = SgdMomentum::new(0.5, 0.9).unwrap();
        let mut p = vec![Tensor::from_f32(&[2], &[3.0, -4.0]).unwrap()];
        let before = p[0].clone();
        opt.step(&mut p, &[Some(Tensor::from_f32(&[2], &[0.0, 0.0]).unwrap())]).unwrap();
        assert!(p[0].bit_eq(&before));
    }

    #[test]
    fn missing_or_misshaped_gradient_is_rejected() {
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        let mut p = vec![scalar(1.0)];
        assert!(matches!(opt.step(&mut p, &[None]), Err(TensorError::Contract(_))));
        let bad = Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap();
        assert!(matches!(opt.step(&mut p, &[Some(bad)]), Err(TensorError::Shape { .. })));
        assert!(SgdMomentum::new(0.0, 0.5).is_err());
        assert!(SgdMomentum::new(0.1, 1.0).is_err());
    }

    #[test]
    fn velocity_dims_track_parameters() {
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        let mut p = vec![Tensor::from_f32(&[2, 2], &[1.0; 4]).unwrap(), scalar(0.0).cast(crate::tensor::DType::F32)];
        let g: Vec<_> = p.iter().map(|t| Some(t.clone())).collect();
        opt.step(&mut p, &g).unwrap();
        for (v, t) in opt.velocity().iter().zip(&p) {
            assert_eq!(v.dims(), t.dims());
        }
    }
}
