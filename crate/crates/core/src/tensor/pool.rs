use super::{axis_geometry, check_nonempty_spatial, Element, Padding, Shape, Tensor};
use crate::error::{Error, Result};

fn pool_geometry<T: Element>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Shape, usize, usize)> {
    if window == 0 {
        return Err(Error::Config("pool: window must be >= 1".into()));
    }
    let s = input.shape();
    let gy = axis_geometry(s.h, window, stride, 1, padding)?;
    let gx = axis_geometry(s.w, window, stride, 1, padding)?;
    Ok((Shape::new(s.n, s.c, gy.out, gx.out), gy.before, gx.before))
}

/// Average pooling. Padded positions are excluded from the denominator.
pub fn avg_pool<T: Element>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    check_nonempty_spatial(input, "avg_pool")?;
    let s = input.shape();
    let (out_shape, pad_y, pad_x) = pool_geometry(input, window, stride, padding)?;
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..out_shape.h {
                for x in 0..out_shape.w {
                    let mut sum = T::zero();
                    let mut count = 0usize;
                    for i in 0..window {
                        let iy = (y * stride + i) as isize - pad_y as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for j in 0..window {
                            let ix = (x * stride + j) as isize - pad_x as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            sum += input.at(n, c, iy as usize, ix as usize);
                            count += 1;
                        }
                    }
                    out.set(n, c, y, x, sum / T::from_f64(count as f64));
                }
            }
        }
    }
    Ok(out)
}

/// Distributes each output gradient uniformly over its window.
pub fn avg_pool_backward<T: Element>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let (out_shape, pad_y, pad_x) = pool_geometry(input, window, stride, padding)?;
    if grad_out.shape() != out_shape {
        return Err(Error::Dimension(format!(
            "avg_pool_backward: grad shape {} vs expected {}",
            grad_out.shape(),
            out_shape
        )));
    }
    let mut grad = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..out_shape.h {
                for x in 0..out_shape.w {
                    let mut members = Vec::with_capacity(window * window);
                    for i in 0..window {
                        let iy = (y * stride + i) as isize - pad_y as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for j in 0..window {
                            let ix = (x * stride + j) as isize - pad_x as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            members.push((iy as usize, ix as usize));
                        }
                    }
                    let share = grad_out.at(n, c, y, x) / T::from_f64(members.len() as f64);
                    for (iy, ix) in members {
                        let v = grad.at(n, c, iy, ix) + share;
                        grad.set(n, c, iy, ix, v);
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Max pooling; ties broken toward the first index in row-major scan order.
pub fn max_pool<T: Element>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    check_nonempty_spatial(input, "max_pool")?;
    let s = input.shape();
    let (out_shape, pad_y, pad_x) = pool_geometry(input, window, stride, padding)?;
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..out_shape.h {
                for x in 0..out_shape.w {
                    let mut best: Option<T> = None;
                    for i in 0..window {
                        let iy = (y * stride + i) as isize - pad_y as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for j in 0..window {
                            let ix = (x * stride + j) as isize - pad_x as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let v = input.at(n, c, iy as usize, ix as usize);
                            if best.map_or(true, |b| v > b) {
                                best = Some(v);
                            }
                        }
                    }
                    out.set(
                        n,
                        c,
                        y,
                        x,
                        best.ok_or_else(|| {
                            Error::Dimension("max_pool: window has no valid taps".into())
                        })?,
                    );
                }
            }
        }
    }
    Ok(out)
}

/// Routes each output gradient to the argmax of its window (first index wins tie).
pub fn max_pool_backward<T: Element>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let (out_shape, pad_y, pad_x) = pool_geometry(input, window, stride, padding)?;
    if grad_out.shape() != out_shape {
        return Err(Error::Dimension(format!(
            "max_pool_backward: grad shape {} vs expected {}",
            grad_out.shape(),
            out_shape
        )));
    }
    let mut grad = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..out_shape.h {
                for x in 0..out_shape.w {
                    let mut best: Option<(T, usize, usize)> = None;
                    for i in 0..window {
                        let iy = (y * stride + i) as isize - pad_y as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for j in 0..window {
                            let ix = (x * stride + j) as isize - pad_x as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let v = input.at(n, c, iy as usize, ix as usize);
                            if best.map_or(true, |(b, _, _)| v > b) {
                                best = Some((v, iy as usize, ix as usize));
                            }
                        }
                    }
                    if let Some((_, iy, ix)) = best {
                        let v = grad.at(n, c, iy, ix) + grad_out.at(n, c, y, x);
                        grad.set(n, c, iy, ix, v);
                    }
                }
            }
        }
    }
    Ok(grad)
}

#[inline]
fn cell_bounds(i: usize, input: usize, output: usize) -> (usize, usize) {
    (i * input / output, (i + 1) * input / output)
}

/// Partitions the spatial extent into `out_h x out_w` near-equal cells
/// (boundary index `floor(i * dim / out)`) and averages each cell.
pub fn adaptive_avg_pool<T: Element>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    check_nonempty_spatial(input, "adaptive_avg_pool")?;
    let s = input.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension("adaptive_avg_pool: output dims must be >= 1".into()));
    }
    if out_h > s.h || out_w > s.w {
        return Err(Error::Dimension(format!(
            "adaptive_avg_pool: output {out_h}x{out_w} exceeds input {}x{}",
            s.h, s.w
        )));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..out_h {
                let (y0, y1) = cell_bounds(y, s.h, out_h);
                for x in 0..out_w {
                    let (x0, x1) = cell_bounds(x, s.w, out_w);
                    let mut sum = 0.0f64;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            sum += input.at(n, c, iy, ix).as_f64();
                        }
                    }
                    let count = ((y1 - y0) * (x1 - x0)) as f64;
                    out.set(n, c, y, x, T::from_f64(sum / count));
                }
            }
        }
    }
    Ok(out)
}

pub fn adaptive_avg_pool_backward<T: Element>(
    input_shape: Shape,
    out_h: usize,
    out_w: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = input_shape;
    if grad_out.shape() != Shape::new(s.n, s.c, out_h, out_w) {
        return Err(Error::Dimension(format!(
            "adaptive_avg_pool_backward: grad shape {} vs expected {}x{}",
            grad_out.shape(),
            out_h,
            out_w
        )));
    }
    let mut grad = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..out_h {
                let (y0, y1) = cell_bounds(y, s.h, out_h);
                for x in 0..out_w {
                    let (x0, x1) = cell_bounds(x, s.w, out_w);
                    let share = grad_out.at(n, c, y, x)
                        / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let v = grad.at(n, c, iy, ix) + share;
                            grad.set(n, c, iy, ix, v);
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_max_and_avg() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let mx = max_pool(&t, 2, 2, Padding::Valid).unwrap();
        assert_eq!(mx.data(), &[4.0]);
        let av = avg_pool(&t, 2, 2, Padding::Valid).unwrap();
        assert_eq!(av.data(), &[2.5]);
    }

    #[test]
    fn window_larger_than_input_is_error() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        assert!(max_pool(&t, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn adaptive_global_is_mean_and_full_is_identity() {
        let data: Vec<f32> = (0..36).map(|v| v as f32).collect();
        let t = Tensor::from_vec(Shape::new(1, 1, 6, 6), data.clone()).unwrap();
        let g = adaptive_avg_pool(&t, 1, 1).unwrap();
        let mean: f32 = data.iter().sum::<f32>() / 36.0;
        assert!((g.data()[0] - mean).abs() < 1e-6);
        let id = adaptive_avg_pool(&t, 6, 6).unwrap();
        assert_eq!(id.data(), t.data());
    }

    #[test]
    fn adaptive_matches_cell_average_oracle() {
        // 6x6 ramp pooled to 3x3: each cell is a 2x2 block.
        let data: Vec<f32> = (0..36).map(|v| v as f32).collect();
        let t = Tensor::from_vec(Shape::new(1, 1, 6, 6), data).unwrap();
        let out = adaptive_avg_pool(&t, 3, 3).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let mut sum = 0.0f32;
                for iy in (2 * y)..(2 * y + 2) {
                    for ix in (2 * x)..(2 * x + 2) {
                        sum += t.at(0, 0, iy, ix);
                    }
                }
                assert!((out.at(0, 0, y, x) - sum / 4.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn max_pool_tie_breaks_to_first_index() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![5.0f32, 5.0, 5.0, 5.0]).unwrap();
        let g = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
        let back = max_pool_backward(&t, 2, 2, Padding::Valid, &g).unwrap();
        assert_eq!(back.data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
