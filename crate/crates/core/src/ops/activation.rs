//! Elementwise nonlinearities.

use crate::graph::{Graph, Var};
use crate::tensor::Scalar;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^x)` without overflow for large `x`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

impl<T: Scalar> Graph<T> {
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.op(
            out,
            &[a],
            Box::new(|ctx| {
                let g = ctx.grad.zip_map(ctx.inputs[0], |g, x| if x > T::zero() { g } else { T::zero() });
                vec![Some(g)]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.op(out, &[a], Box::new(|ctx| vec![Some(ctx.grad.zip_map(ctx.output, |g, s| g * s * (T::one() - s)))]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        self.op(
            out,
            &[a],
            Box::new(|ctx| {
                let g = ctx.grad.zip_map(ctx.inputs[0], |g, x| {
                    let s = sigmoid(x);
                    g * s * (T::one() + x * (T::one() - s))
                });
                vec![Some(g)]
            }),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.op(out, &[a], Box::new(|ctx| vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| g * sigmoid(x)))]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn fixed_points() {
        assert_eq!(silu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1], vec![-3.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).item(), 0.0);
    }

    #[test]
    fn softplus_closed_form() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        // no overflow far in the tails
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!(softplus(-1000.0f64) < 1e-300);
        assert!(sigmoid(-1000.0f32).is_finite());
    }

    #[test]
    fn relu_slope_via_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![1], vec![2.0]).unwrap());
        let r = g.relu(x);
        let loss = g.sum(r);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 1.0);
    }
}
