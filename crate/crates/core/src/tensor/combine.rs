use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Stacks tensors along the channel axis, in argument order.
pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Dimension("concat_channels: no inputs".into()))?;
    let s0 = first.shape();
    let mut total_c = 0;
    for (i, t) in inputs.iter().enumerate() {
        let s = t.shape();
        if s.n != s0.n || s.h != s0.h || s.w != s0.w {
            return Err(Error::Dimension(format!(
                "concat_channels: input {i} has shape {s}, expected batch/spatial axes of {s0}"
            )));
        }
        total_c += s.c;
    }
    let out_shape = Shape::new(s0.n, total_c, s0.h, s0.w);
    let plane = s0.h * s0.w;
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s0.n {
        let mut c_off = 0;
        for t in inputs {
            let c = t.shape().c;
            let src = &t.data()[n * c * plane..(n + 1) * c * plane];
            let dst_start = (n * total_c + c_off) * plane;
            out.data_mut()[dst_start..dst_start + c * plane].copy_from_slice(src);
            c_off += c;
        }
    }
    Ok(out)
}

/// Splits the output gradient back into per-input gradients.
pub fn concat_channels_backward<T: Element>(
    input_shapes: &[Shape],
    grad_out: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let total_c: usize = input_shapes.iter().map(|s| s.c).sum();
    let s0 = input_shapes
        .first()
        .ok_or_else(|| Error::Dimension("concat_channels_backward: no inputs".into()))?;
    let expected = Shape::new(s0.n, total_c, s0.h, s0.w);
    if grad_out.shape() != expected {
        return Err(Error::Dimension(format!(
            "concat_channels_backward: grad shape {} vs expected {}",
            grad_out.shape(),
            expected
        )));
    }
    let plane = s0.h * s0.w;
    let mut grads: Vec<Tensor<T>> = input_shapes.iter().map(|&s| Tensor::zeros(s)).collect();
    for n in 0..s0.n {
        let mut c_off = 0;
        for (s, g) in input_shapes.iter().zip(grads.iter_mut()) {
            let src_start = (n * total_c + c_off) * plane;
            let dst_start = n * s.c * plane;
            g.data_mut()[dst_start..dst_start + s.c * plane]
                .copy_from_slice(&grad_out.data()[src_start..src_start + s.c * plane]);
            c_off += s.c;
        }
    }
    Ok(grads)
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "add: shapes {} and {} differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

/// Both addends receive the output gradient unchanged.
pub fn add_backward<T: Element>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_stacks_channel_counts() {
        let a = Tensor::<f32>::filled(Shape::new(1, 2, 2, 2), 1.0);
        let b = Tensor::<f32>::filled(Shape::new(1, 3, 2, 2), 2.0);
        let out = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 5, 2, 2));
        assert_eq!(out.at(0, 1, 0, 0), 1.0);
        assert_eq!(out.at(0, 2, 0, 0), 2.0);
    }

    #[test]
    fn add_zero_is_identity() {
        let a = Tensor::<f32>::filled(Shape::new(2, 1, 2, 2), 3.5);
        let z = Tensor::<f32>::zeros(a.shape());
        assert_eq!(add(&a, &z).unwrap(), a);
    }

    #[test]
    fn concat_backward_splits_ones_into_ones() {
        let shapes = [Shape::new(1, 2, 2, 2), Shape::new(1, 1, 2, 2)];
        let g = Tensor::<f32>::filled(Shape::new(1, 3, 2, 2), 1.0);
        let parts = concat_channels_backward(&shapes, &g).unwrap();
        assert!(parts[0].data().iter().all(|&v| v == 1.0));
        assert!(parts[1].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 3));
        assert!(add(&a, &b).is_err());
        assert!(concat_channels(&[&a, &b]).is_err());
    }
}
