use super::{check_nonempty_spatial, Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Source coordinate and blend weights for one output index under the
/// align-corners=false convention: `src = (i + 0.5) * in/out - 0.5`, clamped
/// to the valid range.
#[inline]
fn sample_axis(i: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let scale = input as f64 / output as f64;
    let src = (i as f64 + 0.5) * scale - 0.5;
    let src = src.max(0.0);
    let i0 = (src.floor() as usize).min(input - 1);
    let i1 = (i0 + 1).min(input - 1);
    let frac = (src - i0 as f64).min(1.0);
    (i0, i1, frac)
}

/// Bilinear resampling to `out_h x out_w`, edge-clamped. Linear in the input,
/// so the backward pass is the transpose map.
pub fn bilinear_resize<T: Element>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    check_nonempty_spatial(input, "bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension("bilinear_resize: output dims must be >= 1".into()));
    }
    let s = input.shape();
    if out_h == s.h && out_w == s.w {
        return Ok(input.clone());
    }

    let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|y| sample_axis(y, s.h, out_h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|x| sample_axis(x, s.w, out_w)).collect();

    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v00 = input.at(n, c, y0, x0).as_f64();
                    let v01 = input.at(n, c, y0, x1).as_f64();
                    let v10 = input.at(n, c, y1, x0).as_f64();
                    let v11 = input.at(n, c, y1, x1).as_f64();
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    out.set(n, c, y, x, T::from_f64(top + (bot - top) * fy));
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of [`bilinear_resize`]: scatters each output gradient onto its
/// four source taps with the same blend weights.
pub fn bilinear_resize_backward<T: Element>(
    input_shape: Shape,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = input_shape;
    let g = grad_out.shape();
    if g.n != s.n || g.c != s.c {
        return Err(Error::Dimension(format!(
            "bilinear_resize_backward: grad {} incompatible with input {}",
            g, s
        )));
    }
    if g.h == s.h && g.w == s.w {
        return Ok(grad_out.clone());
    }
    let ys: Vec<(usize, usize, f64)> = (0..g.h).map(|y| sample_axis(y, s.h, g.h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..g.w).map(|x| sample_axis(x, s.w, g.w)).collect();

    let mut grad: Tensor<T> = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let go = grad_out.at(n, c, y, x).as_f64();
                    let mut scatter = |iy: usize, ix: usize, w: f64| {
                        let v = grad.at(n, c, iy, ix).as_f64() + go * w;
                        grad.set(n, c, iy, ix, T::from_f64(v));
                    };
                    scatter(y0, x0, (1.0 - fy) * (1.0 - fx));
                    scatter(y0, x1, (1.0 - fy) * fx);
                    scatter(y1, x0, fy * (1.0 - fx));
                    scatter(y1, x1, fy * fx);
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
    fn constant_stays_constant_under_upscale() {
        let t = Tensor::<f32>::filled(Shape::new(1, 1, 2, 2), 3.25);
        let out = bilinear_resize(&t, 5, 7).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn same_size_is_identity() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        let out = bilinear_resize(&t, 2, 2).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn two_by_two_to_four_by_four_matches_sampling_formula() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        let out = bilinear_resize(&t, 4, 4).unwrap();
        // Independent scalar evaluation of the sampling rule per output pixel.
        for y in 0..4 {
            for x in 0..4 {
                let sy = ((y as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
                let sx = ((x as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let at = |yy: usize, xx: usize| t.at(0, 0, yy, xx) as f64;
                let expect = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x1) * (1.0 - fy) * fx
                    + at(y1, x0) * fy * (1.0 - fx)
                    + at(y1, x1) * fy * fx;
                assert!(
                    (out.at(0, 0, y, x) as f64 - expect).abs() < 1e-6,
                    "mismatch at ({y},{x})"
                );
            }
        }
    }

    #[test]
    fn downscale_of_coordinate_ramp_is_exact() {
        // f(x, y) = 1 + 2x + 3y sampled at pixel centers; a 2:1 downscale
        // samples at src = 2i + 0.5, which stays interior, so the bilinear
        // reconstruction reproduces the ramp exactly.
        let (h, w) = (8usize, 8usize);
        let mut t = Tensor::<f32>::zeros(Shape::new(1, 1, h, w));
        for y in 0..h {
            for x in 0..w {
                t.set(0, 0, y, x, 1.0 + 2.0 * x as f32 + 3.0 * y as f32);
            }
        }
        let out = bilinear_resize(&t, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let sx = 2.0 * x as f32 + 0.5;
                let sy = 2.0 * y as f32 + 0.5;
                let expect = 1.0 + 2.0 * sx + 3.0 * sy;
                assert!((out.at(0, 0, y, x) - expect).abs() < 1e-6);
            }
        }
    }
}
