//! Composite operations built from the primitive set.

use super::{Result, Tape, Tensor, TensorError, Var};
use crate::scalar::Scalar;

impl<T: Scalar> Tape<T> {
    pub fn scalar_const(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let c = self.scalar_const(c);
        self.mul(x, c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let c = self.scalar_const(c);
        self.add(x, c)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    /// `x @ w (+ b)` for `x: [..., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Repeat the last axis `n` times: `[..., 1] -> [..., n]` or `[...] -> [..., n]`.
    pub fn expand_last(&mut self, x: Var, n: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if shape.last() != Some(&1) {
            shape.push(1);
        }
        let col = self.reshape(x, &shape)?;
        let ones = self.constant(Tensor::ones(&[1, n]));
        self.matmul(col, ones)
    }

    /// Elementwise maximum with zero, via a max over a stacked axis.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        shape.push(1);
        let col = self.reshape(x, &shape)?;
        let zeros = self.constant(Tensor::zeros(&shape));
        let axis = shape.len() - 1;
        let both = self.concat(&[col, zeros], axis)?;
        self.max(both, axis)
    }

    /// `|x|` as `sqrt(x²)`; the gradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let sq = self.square(x)?;
        self.sqrt(sq)
    }

    /// Numerically stable `log(1 + exp(x))`.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let pos = self.relu(x)?;
        let a = self.abs(x)?;
        let na = self.neg(a)?;
        let e = self.exp(na)?;
        let one_p = self.add_scalar(e, T::one())?;
        let l = self.log(one_p)?;
        self.add(pos, l)
    }

    /// Euclidean norm over the last axis (removed).
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let sq = self.square(x)?;
        let axis = self.shape(x).len().checked_sub(1).ok_or(TensorError::InvalidArgument {
            op: "norm_last",
            msg: "scalar input".into(),
        })?;
        let s = self.sum(sq, axis)?;
        self.sqrt(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_abs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[4], &[-2.0, -0.5, 0.5, 3.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 0.5, 3.0]);
        let a = tape.abs(x).unwrap();
        assert_eq!(tape.value(a).data(), &[2.0, 0.5, 0.5, 3.0]);
    }

    #[test]
    fn softplus_is_stable() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(&[3], &[-200.0, 0.0, 200.0]).unwrap());
        let y = tape.softplus(x).unwrap();
        let v = tape.value(y).data();
        assert!(v[0] >= 0.0 && v[0] < 1e-30);
        assert!((v[1] - 2f32.ln()).abs() < 1e-6);
        assert_eq!(v[2], 200.0);
    }

    #[test]
    fn expand_last_repeats() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let y = tape.expand_last(x, 3).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }
}
