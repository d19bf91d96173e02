//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Analytic gradient of the scalar `f` at `x`, zeros where no gradient
/// reaches `x`.
pub fn analytic_grad<T, F>(f: &F, x: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let grads: Gradients<T> = tape.backward(out)?;
    Ok(grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

fn eval<T, F>(f: &F, x: Tensor<T>) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = f(&mut tape, xv)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Contract("finite-difference target must be scalar".into()));
    }
    Ok(v.data()[0])
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_grad<T, F>(f: &F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let two = T::one() + T::one();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        out.data_mut()[i] = (eval(f, plus)? - eval(f, minus)?) / (two * h);
    }
    Ok(out)
}

/// Max over coordinates of `|analytic − fd| / (|fd| + 1e-8)`.
///
/// Intended for `f64` with `h` in `[1e-5, 1e-3]`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x)?;
    let numeric = numeric_grad(&f, x, h)?;
    let floor = T::from(1e-8).unwrap();
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / (n.abs() + floor))
        .fold(T::zero(), T::max))
}
