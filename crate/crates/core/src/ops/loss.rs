//! Scalar training objectives.

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{compensated_sum, Scalar, Tensor};

/// Soft Dice loss `1 - (2 sum(p t) + eps) / (sum(p^2) + sum(t^2) + eps)` on raw slices.
pub fn dice_loss_value(pred: &[f64], target: &[f64], eps: f64) -> f64 {
    let inter = compensated_sum(pred.iter().zip(target).map(|(p, t)| p * t));
    let p2 = compensated_sum(pred.iter().map(|p| p * p));
    let t2 = compensated_sum(target.iter().map(|t| t * t));
    1.0 - (2.0 * inter + eps) / (p2 + t2 + eps)
}

impl<T: Scalar> Graph<T> {
    /// Soft Dice loss between a probability map and a binary target.
    pub fn dice_loss(&mut self, pred: Var, target: Var, eps: f64) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(dim_err!(
                "dice_loss: prediction {:?} and target {:?} differ",
                self.shape(pred),
                self.shape(target)
            ));
        }
        let eps = T::from_f64(eps);
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let two = T::from_f64(2.0);
        let sum = |v: &mut dyn Iterator<Item = f64>| T::from_f64(compensated_sum(v));
        let inter = sum(&mut p.iter().zip(t).map(|(a, b)| a.as_f64() * b.as_f64()));
        let p2 = sum(&mut p.iter().map(|a| a.as_f64() * a.as_f64()));
        let t2 = sum(&mut t.iter().map(|b| b.as_f64() * b.as_f64()));
        let num = two * inter + eps;
        let den = p2 + t2 + eps;
        let out = Tensor::scalar(T::one() - num / den);
        Ok(self.op(
            out,
            &[pred, target],
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                let (p, t) = (ctx.inputs[0], ctx.inputs[1]);
                let den2 = den * den;
                // d/dp_i = -(2 t_i den - 2 p_i num) / den^2, symmetric for t.
                let grad_of = |own: &Tensor<T>, other: &Tensor<T>| {
                    own.zip_map(other, |a, b| -g * two * (b * den - a * num) / den2)
                };
                vec![ctx.needs[0].then(|| grad_of(p, t)), ctx.needs[1].then(|| grad_of(t, p))]
            }),
        ))
    }

    /// Mean absolute error over all elements.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(dim_err!(
                "l1_loss: prediction {:?} and target {:?} differ",
                self.shape(pred),
                self.shape(target)
            ));
        }
        let n = T::from_f64(self.value(pred).numel() as f64);
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let total = compensated_sum(p.iter().zip(t).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()));
        let out = Tensor::scalar(T::from_f64(total) / n);
        Ok(self.op(
            out,
            &[pred, target],
            Box::new(move |ctx| {
                let g = ctx.grad.item() / n;
                let sign = |d: T| {
                    if d > T::zero() {
                        g
                    } else if d < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                };
                let gp = ctx.inputs[0].zip_map(ctx.inputs[1], |a, b| sign(a - b));
                let gt = ctx.needs[1].then(|| gp.scale(-T::one()));
                vec![ctx.needs[0].then_some(gp), gt]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dice(p: &[f64], t: &[f64], eps: f64) -> f64 {
        let mut g = Graph::<f64>::new();
        let pv = g.constant(Tensor::new(vec![p.len()], p.to_vec()).unwrap());
        let tv = g.constant(Tensor::new(vec![t.len()], t.to_vec()).unwrap());
        let l = g.dice_loss(pv, tv, eps).unwrap();
        g.value(l).item()
    }

    #[test]
    fn dice_reference_points() {
        assert_eq!(dice(&[0.0, 1.0, 1.0], &[0.0, 1.0, 1.0], 1e-300), 0.0);
        assert_eq!(dice(&[1.0, 0.0], &[0.0, 1.0], 1e-300), 1.0);
        assert!((dice(&[1.0, 1.0], &[1.0, 0.0], 1e-300) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&[1.0, 1.0], &[1.0, 0.0], 0.0), dice_loss_value(&[1.0, 1.0], &[1.0, 0.0], 0.0));
    }

    #[test]
    fn dice_empty_masks_are_smoothed() {
        assert_eq!(dice(&[0.0; 4], &[0.0; 4], 1e-5), 0.0);
    }

    #[test]
    fn dice_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(vec![2]));
        let b = g.constant(Tensor::ones(vec![3]));
        assert!(g.dice_loss(a, b, 1e-5).is_err());
    }

    #[test]
    fn l1_values() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let t = g.constant(Tensor::new(vec![3], vec![0.0, 0.0, 1.0]).unwrap());
        let l = g.l1_loss(p, t).unwrap();
        assert!((g.value(l).item() - 1.0 / 3.0).abs() < 1e-15);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[0.0, 0.0, -1.0 / 3.0]);
    }
}
