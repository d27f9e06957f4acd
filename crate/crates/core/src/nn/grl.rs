//! Gradient reversal: identity on the way forward, negation on the way back.
//!
//! This is the only place where the adversarial sign flip happens. Feature
//! extractors receive `-∂L_d/∂features` through it, which turns the
//! discriminator's minimisation of `L_d` into a maximisation for them.

use crate::tensor::Tensor;

pub fn grl_forward(input: &Tensor) -> Tensor {
    input.clone()
}

pub fn grl_backward(output_grad: &Tensor) -> Tensor {
    output_grad.neg()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negates_gradient() {
        let g = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        assert_eq!(grl_backward(&g).data(), &[-1.0, 2.0]);
    }

    #[test]
    fn zero_stays_zero() {
        let z = Tensor::zeros(vec![3, 2]);
        assert_eq!(grl_backward(&z), z);
    }

    #[test]
    fn involution_and_identity_forward() {
        let g = Tensor::new(vec![3], vec![0.5, -7.25, 3.0]).unwrap();
        assert!(grl_backward(&grl_backward(&g)).bitwise_eq(&g));
        assert!(grl_forward(&g).bitwise_eq(&g));
    }
}
