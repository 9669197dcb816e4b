use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel affine normalization state. Train mode normalizes by batch
/// statistics and folds them into the running estimates; infer mode uses the
/// running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
    pub mode: Mode,
}

impl<T: Element> BatchNormState<T> {
    /// gamma = 1, beta = 0, running mean 0 / var 1.
    pub fn identity(channels: usize, epsilon: f64, momentum: f64) -> Self {
        let vec_shape = super::Shape::new(1, channels, 1, 1);
        BatchNormState {
            gamma: Tensor::filled(vec_shape, T::one()),
            beta: Tensor::zeros(vec_shape),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon,
            momentum,
            mode: Mode::Infer,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }

    fn check<U: Element>(&self, input: &Tensor<U>) -> Result<()> {
        let c = input.shape().c;
        if self.channels() != c
            || self.beta.shape().c != c
            || self.running_mean.len() != c
            || self.running_var.len() != c
        {
            return Err(Error::Dimension(format!(
                "batch_norm: state covers {} channels, input has {}",
                self.channels(),
                c
            )));
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> BatchNormState<U> {
        BatchNormState {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            running_var: self.running_var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            epsilon: self.epsilon,
            momentum: self.momentum,
            mode: self.mode,
        }
    }
}

/// Batch statistics saved by a train-mode forward for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Element> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Normalizes per channel. Train mode computes batch statistics over
/// `(n, h, w)`, updates the running estimates by
/// `running = momentum * running + (1 - momentum) * batch`, and returns the
/// cache the backward pass needs; infer mode returns no cache and leaves the
/// state untouched.
pub fn batch_norm<T: Element>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    state.check(input)?;
    input.debug_assert_finite("batch_norm input");
    match state.mode {
        Mode::Infer => Ok((batch_norm_infer(input, state)?, None)),
        Mode::Train => {
            let s = input.shape();
            let m = (s.n * s.h * s.w) as f64;
            if m == 0.0 {
                return Err(Error::EmptyTensor("batch_norm: no elements per channel".into()));
            }
            let plane = s.h * s.w;
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            for c in 0..s.c {
                let mut sum = 0.0f64;
                for n in 0..s.n {
                    let p = &input.data()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
                    for v in p {
                        sum += v.as_f64();
                    }
                }
                let mu = sum / m;
                let mut sq = 0.0f64;
                for n in 0..s.n {
                    let p = &input.data()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
                    for v in p {
                        let d = v.as_f64() - mu;
                        sq += d * d;
                    }
                }
                mean[c] = T::from_f64(mu);
                var[c] = T::from_f64(sq / m);
            }

            let mut out = Tensor::zeros(s);
            for n in 0..s.n {
                for c in 0..s.c {
                    let g = state.gamma.data()[c];
                    let b = state.beta.data()[c];
                    let inv = T::from_f64(1.0 / (var[c].as_f64() + state.epsilon).sqrt());
                    let mu = mean[c];
                    let start = (n * s.c + c) * plane;
                    for i in 0..plane {
                        let xhat = (input.data()[start + i] - mu) * inv;
                        out.data_mut()[start + i] = g * xhat + b;
                    }
                }
            }

            let keep = T::from_f64(state.momentum);
            let new = T::from_f64(1.0 - state.momentum);
            for c in 0..s.c {
                state.running_mean[c] = keep * state.running_mean[c] + new * mean[c];
                state.running_var[c] = keep * state.running_var[c] + new * var[c];
            }
            Ok((out, Some(BatchNormCache { mean, var })))
        }
    }
}

/// Infer-mode normalization by running statistics; never mutates the state.
pub fn batch_norm_infer<T: Element>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
) -> Result<Tensor<T>> {
    state.check(input)?;
    let s = input.shape();
    let plane = s.h * s.w;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = state.gamma.data()[c];
            let b = state.beta.data()[c];
            let mu = state.running_mean[c];
            let inv = T::from_f64(1.0 / (state.running_var[c].as_f64() + state.epsilon).sqrt());
            let start = (n * s.c + c) * plane;
            for i in 0..plane {
                out.data_mut()[start + i] = g * (input.data()[start + i] - mu) * inv + b;
            }
        }
    }
    Ok(out)
}

/// Gradients of a train-mode batch_norm for input, gamma, and beta.
pub fn batch_norm_backward<T: Element>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    state.check(input)?;
    if input.shape() != grad_out.shape() {
        return Err(Error::Dimension(format!(
            "batch_norm_backward: input shape {} vs grad shape {}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let s = input.shape();
    let plane = s.h * s.w;
    let m = (s.n * plane) as f64;

    let mut grad_input = Tensor::zeros(s);
    let mut grad_gamma = vec![T::zero(); s.c];
    let mut grad_beta = vec![T::zero(); s.c];

    for c in 0..s.c {
        let mu = cache.mean[c].as_f64();
        let inv = 1.0 / (cache.var[c].as_f64() + state.epsilon).sqrt();
        let gamma = state.gamma.data()[c].as_f64();

        // First pass: sums of dy and dy * xhat over the channel.
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            for i in 0..plane {
                let dy = grad_out.data()[start + i].as_f64();
                let xhat = (input.data()[start + i].as_f64() - mu) * inv;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        grad_beta[c] = T::from_f64(sum_dy);
        grad_gamma[c] = T::from_f64(sum_dy_xhat);

        // dx = (gamma * inv / m) * (m * dy - sum_dy - xhat * sum_dy_xhat)
        let scale = gamma * inv / m;
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            for i in 0..plane {
                let dy = grad_out.data()[start + i].as_f64();
                let xhat = (input.data()[start + i].as_f64() - mu) * inv;
                grad_input.data_mut()[start + i] =
                    T::from_f64(scale * (m * dy - sum_dy - xhat * sum_dy_xhat));
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}
