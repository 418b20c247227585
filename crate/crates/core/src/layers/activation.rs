use crate::error::{ensure_shape, Result};
use crate::lowrank::sigmoid;
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of [`relu`] given its input. The derivative at zero is taken as 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

pub fn relu_in_place(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

pub fn sigmoid_map(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

/// Gradient of the logistic function given its output `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    ensure_shape(y.shape(), grad_out.shape())?;
    y.zip_map(grad_out, |s, g| g * s * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{normal, rng};
    use crate::layers::gradcheck::{grad_check, GradCheckConfig};

    #[test]
    fn relu_values() {
        let x = Tensor::new(&[4], vec![-1.0, 0.0, 2.0, -0.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0, 0.0]);
        let g = relu_backward(&x, &Tensor::full(&[4], 3.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn sigmoid_gradient() {
        let mut r = rng(60);
        let x = normal(&[10], &mut r);
        let probe = normal(&[10], &mut r);
        let g = sigmoid_backward(&sigmoid_map(&x), &probe).unwrap();
        let rep = grad_check(
            |v| sigmoid_map(v).dot(&probe).unwrap(),
            &x,
            &g,
            &GradCheckConfig::default(),
        );
        assert!(rep.passed(1e-6), "{rep:?}");
        assert_eq!(sigmoid_map(&Tensor::zeros(&[1]))[0], 0.5);
    }
}
