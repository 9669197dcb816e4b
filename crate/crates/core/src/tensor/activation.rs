use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Elementwise `min(max(x, 0), 6)`.
pub fn relu6<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.debug_assert_finite("relu6 input");
    let six = T::from_f64(6.0);
    input.map(|v| v.max(T::zero()).min(six))
}

/// Gradient passes only where `0 < x < 6`.
pub fn relu6_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Dimension(format!(
            "relu6_backward: input shape {} vs grad shape {}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let six = T::from_f64(6.0);
    let mut g = Tensor::zeros(input.shape());
    for ((gi, &x), &go) in g.data_mut().iter_mut().zip(input.data()).zip(grad_out.data()) {
        if x > T::zero() && x < six {
            *gi = go;
        }
    }
    Ok(g)
}

/// Elementwise `max(x, 0)`.
pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.debug_assert_finite("relu input");
    input.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Dimension(format!(
            "relu_backward: input shape {} vs grad shape {}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let mut g = Tensor::zeros(input.shape());
    for ((gi, &x), &go) in g.data_mut().iter_mut().zip(input.data()).zip(grad_out.data()) {
        if x > T::zero() {
            *gi = go;
        }
    }
    Ok(g)
}
