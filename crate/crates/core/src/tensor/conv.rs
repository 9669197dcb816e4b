//! Dense, depthwise, and pointwise 2-D convolution (cross-correlation, no
//! kernel flip) with explicit backward passes.

use rayon::prelude::*;

use super::{
    axis_geometry, check_nonempty_spatial, ConvSpec, Element, Grouping, KernelShape, KernelTensor,
    Shape, Tensor,
};
use crate::error::{Error, Result};

/// Gradients produced by a convolution backward pass.
pub struct ConvGrads<T: Element> {
    pub input: Tensor<T>,
    pub kernel: Vec<T>,
    pub bias: Option<Vec<T>>,
}

fn conv_output_shape<T: Element>(
    input: &Tensor<T>,
    kernel: KernelShape,
    spec: &ConvSpec,
) -> Result<(Shape, usize, usize)> {
    let s = input.shape();
    let gy = axis_geometry(s.h, kernel.kh, spec.stride, spec.dilation, spec.padding)?;
    let gx = axis_geometry(s.w, kernel.kw, spec.stride, spec.dilation, spec.padding)?;
    Ok((Shape::new(s.n, kernel.out_c, gy.out, gx.out), gy.before, gx.before))
}

fn check_dense<T: Element>(input: &Tensor<T>, kernel: &KernelTensor<T>) -> Result<()> {
    let s = input.shape();
    let k = kernel.shape();
    if k.in_c != s.c {
        return Err(Error::Dimension(format!(
            "conv2d: kernel in-channel axis ({}) does not match input channel axis ({})",
            k.in_c, s.c
        )));
    }
    Ok(())
}

fn check_depthwise<T: Element>(input: &Tensor<T>, kernel: &KernelTensor<T>) -> Result<()> {
    let s = input.shape();
    let k = kernel.shape();
    if k.in_c != 1 {
        return Err(Error::Dimension(format!(
            "depthwise_conv2d: kernel depth axis must be 1, got {}",
            k.in_c
        )));
    }
    if k.out_c != s.c {
        return Err(Error::Dimension(format!(
            "depthwise_conv2d: kernel channel axis ({}) does not match input channel axis ({})",
            k.out_c, s.c
        )));
    }
    Ok(())
}

/// Dense 2-D convolution over `(n, c, h, w)` input with an
/// `(out_c, in_c, kh, kw)` filter bank.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &KernelTensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if spec.groups != Grouping::Dense {
        return Err(Error::Config(
            "conv2d: spec.groups must be dense; use depthwise_conv2d for depthwise".into(),
        ));
    }
    check_nonempty_spatial(input, "conv2d")?;
    check_dense(input, kernel)?;
    if let Some(b) = bias {
        if b.len() != kernel.shape().out_c {
            return Err(Error::Dimension(format!(
                "conv2d: bias length {} does not match kernel out-channel axis {}",
                b.len(),
                kernel.shape().out_c
            )));
        }
    }
    input.debug_assert_finite("conv2d input");

    let s = input.shape();
    let k = kernel.shape();
    let (out_shape, pad_y, pad_x) = conv_output_shape(input, k, spec)?;

    if k.kh == 1 && k.kw == 1 && spec.stride == 1 {
        return pointwise_forward(input, kernel, bias, out_shape);
    }

    let mut out = Tensor::zeros(out_shape);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let in_data = input.data();
    let k_data = kernel.data();
    let plane = s.h * s.w;

    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(p, out_plane)| {
            let n = p / k.out_c;
            let o = p % k.out_c;
            let b = bias.map(|b| b[o]).unwrap_or_else(T::zero);
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = b;
                    for l in 0..s.c {
                        let in_plane = &in_data[(n * s.c + l) * plane..(n * s.c + l + 1) * plane];
                        let k_base = k.index(o, l, 0, 0);
                        for i in 0..k.kh {
                            let iy = (y * spec.stride + i * spec.dilation) as isize - pad_y as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            let row = &in_plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                            let k_row = &k_data[k_base + i * k.kw..k_base + (i + 1) * k.kw];
                            for j in 0..k.kw {
                                let ix =
                                    (x * spec.stride + j * spec.dilation) as isize - pad_x as isize;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                acc += row[ix as usize] * k_row[j];
                            }
                        }
                    }
                    out_plane[y * ow + x] = acc;
                }
            }
        });
    Ok(out)
}

/// 1x1 stride-1 fast path: a channel-mixing matrix applied per pixel.
fn pointwise_forward<T: Element>(
    input: &Tensor<T>,
    kernel: &KernelTensor<T>,
    bias: Option<&[T]>,
    out_shape: Shape,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let k = kernel.shape();
    let plane = s.h * s.w;
    let in_data = input.data();
    let k_data = kernel.data();
    let mut out = Tensor::zeros(out_shape);

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(p, out_plane)| {
            let n = p / k.out_c;
            let o = p % k.out_c;
            if let Some(b) = bias {
                out_plane.iter_mut().for_each(|v| *v = b[o]);
            }
            for l in 0..s.c {
                let wgt = k_data[o * k.in_c + l];
                let in_plane = &in_data[(n * s.c + l) * plane..(n * s.c + l + 1) * plane];
                for (ov, iv) in out_plane.iter_mut().zip(in_plane) {
                    *ov += wgt * *iv;
                }
            }
        });
    Ok(out)
}

/// Backward pass of [`conv2d`]: gradients for input, kernel, and bias.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &KernelTensor<T>,
    has_bias: bool,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    check_dense(input, kernel)?;
    let s = input.shape();
    let k = kernel.shape();
    let (out_shape, pad_y, pad_x) = conv_output_shape(input, k, spec)?;
    if grad_out.shape() != out_shape {
        return Err(Error::Dimension(format!(
            "conv2d_backward: grad shape {} does not match forward output {}",
            grad_out.shape(),
            out_shape
        )));
    }

    let (oh, ow) = (out_shape.h, out_shape.w);
    let plane = s.h * s.w;
    let go = grad_out.data();

    let grad_bias = has_bias.then(|| {
        (0..k.out_c)
            .map(|o| {
                let mut acc = T::zero();
                for n in 0..s.n {
                    let g = &go[(n * k.out_c + o) * oh * ow..(n * k.out_c + o + 1) * oh * ow];
                    for v in g {
                        acc += *v;
                    }
                }
                acc
            })
            .collect::<Vec<T>>()
    });

    // Kernel gradient: independent per output channel.
    let k_per_out = k.in_c * k.kh * k.kw;
    let mut grad_kernel = vec![T::zero(); k.count()];
    grad_kernel
        .par_chunks_mut(k_per_out)
        .enumerate()
        .for_each(|(o, gk)| {
            for n in 0..s.n {
                let g_plane = &go[(n * k.out_c + o) * oh * ow..(n * k.out_c + o + 1) * oh * ow];
                for y in 0..oh {
                    for x in 0..ow {
                        let g = g_plane[y * ow + x];
                        if g == T::zero() {
                            continue;
                        }
                        for l in 0..s.c {
                            let in_plane =
                                &input.data()[(n * s.c + l) * plane..(n * s.c + l + 1) * plane];
                            for i in 0..k.kh {
                                let iy = (y * spec.stride + i * spec.dilation) as isize
                                    - pad_y as isize;
                                if iy < 0 || iy >= s.h as isize {
                                    continue;
                                }
                                for j in 0..k.kw {
                                    let ix = (x * spec.stride + j * spec.dilation) as isize
                                        - pad_x as isize;
                                    if ix < 0 || ix >= s.w as isize {
                                        continue;
                                    }
                                    gk[(l * k.kh + i) * k.kw + j] +=
                                        g * in_plane[iy as usize * s.w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });

    // Input gradient: scatter, independent per batch item.
    let mut grad_input = Tensor::zeros(s);
    grad_input
        .data_mut()
        .par_chunks_mut(s.c * plane)
        .enumerate()
        .for_each(|(n, gi)| {
            for o in 0..k.out_c {
                let g_plane = &go[(n * k.out_c + o) * oh * ow..(n * k.out_c + o + 1) * oh * ow];
                for y in 0..oh {
                    for x in 0..ow {
                        let g = g_plane[y * ow + x];
                        if g == T::zero() {
                            continue;
                        }
                        for l in 0..s.c {
                            for i in 0..k.kh {
                                let iy = (y * spec.stride + i * spec.dilation) as isize
                                    - pad_y as isize;
                                if iy < 0 || iy >= s.h as isize {
                                    continue;
                                }
                                for j in 0..k.kw {
                                    let ix = (x * spec.stride + j * spec.dilation) as isize
                                        - pad_x as isize;
                                    if ix < 0 || ix >= s.w as isize {
                                        continue;
                                    }
                                    gi[(l * s.h + iy as usize) * s.w + ix as usize] +=
                                        g * kernel.at(o, l, i, j);
                                }
                            }
                        }
                    }
                }
            }
        });

    Ok(ConvGrads { input: grad_input, kernel: grad_kernel, bias: grad_bias })
}

/// Depthwise 2-D convolution: channel `i` of the output depends only on
/// channel `i` of the input.
pub fn depthwise_conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &KernelTensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if spec.groups != Grouping::Depthwise {
        return Err(Error::Config("depthwise_conv2d: spec.groups must be depthwise".into()));
    }
    check_nonempty_spatial(input, "depthwise_conv2d")?;
    check_depthwise(input, kernel)?;
    input.debug_assert_finite("depthwise_conv2d input");

    let s = input.shape();
    let k = kernel.shape();
    let (out_shape, pad_y, pad_x) = conv_output_shape(input, k, spec)?;
    let (oh, ow) = (out_shape.h, out_shape.w);
    let plane = s.h * s.w;
    let in_data = input.data();

    let mut out = Tensor::zeros(out_shape);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(p, out_plane)| {
            // plane index maps to (n, c); depthwise output channel == input channel
            let c = p % s.c;
            let in_plane = &in_data[p * plane..(p + 1) * plane];
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = T::zero();
                    for i in 0..k.kh {
                        let iy = (y * spec.stride + i * spec.dilation) as isize - pad_y as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let row = &in_plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                        for j in 0..k.kw {
                            let ix = (x * spec.stride + j * spec.dilation) as isize - pad_x as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            acc += row[ix as usize] * kernel.at(c, 0, i, j);
                        }
                    }
                    out_plane[y * ow + x] = acc;
                }
            }
        });
    Ok(out)
}

/// Backward pass of [`depthwise_conv2d`].
pub fn depthwise_conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &KernelTensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    check_depthwise(input, kernel)?;
    let s = input.shape();
    let k = kernel.shape();
    let (out_shape, pad_y, pad_x) = conv_output_shape(input, k, spec)?;
    if grad_out.shape() != out_shape {
        return Err(Error::Dimension(format!(
            "depthwise_conv2d_backward: grad shape {} does not match forward output {}",
            grad_out.shape(),
            out_shape
        )));
    }
    let (oh, ow) = (out_shape.h, out_shape.w);
    let plane = s.h * s.w;
    let go = grad_out.data();

    let k_per_c = k.kh * k.kw;
    let mut grad_kernel = vec![T::zero(); k.count()];
    grad_kernel.par_chunks_mut(k_per_c).enumerate().for_each(|(c, gk)| {
        for n in 0..s.n {
            let g_plane = &go[(n * s.c + c) * oh * ow..(n * s.c + c + 1) * oh * ow];
            let in_plane = &input.data()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
            for y in 0..oh {
                for x in 0..ow {
                    let g = g_plane[y * ow + x];
                    if g == T::zero() {
                        continue;
                    }
                    for i in 0..k.kh {
                        let iy = (y * spec.stride + i * spec.dilation) as isize - pad_y as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for j in 0..k.kw {
                            let ix =
                                (x * spec.stride + j * spec.dilation) as isize - pad_x as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            gk[i * k.kw + j] += g * in_plane[iy as usize * s.w + ix as usize];
                        }
                    }
                }
            }
        }
    });

    let mut grad_input = Tensor::zeros(s);
    grad_input
        .data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(p, gi)| {
            let c = p % s.c;
            let g_plane = &go[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let g = g_plane[y * ow + x];
                    if g == T::zero() {
                        continue;
                    }
                    for i in 0..k.kh {
                        let iy = (y * spec.stride + i * spec.dilation) as isize - pad_y as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for j in 0..k.kw {
                            let ix =
                                (x * spec.stride + j * spec.dilation) as isize - pad_x as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            gi[iy as usize * s.w + ix as usize] += g * kernel.at(c, 0, i, j);
                        }
                    }
                }
            }
        });

    Ok(ConvGrads { input: grad_input, kernel: grad_kernel, bias: None })
}

/// 1x1 channel-mixing convolution; spatial dims unchanged.
pub fn pointwise_conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &KernelTensor<T>,
) -> Result<Tensor<T>> {
    let k = kernel.shape();
    if k.kh != 1 || k.kw != 1 {
        return Err(Error::Dimension(format!(
            "pointwise_conv2d: kernel spatial axes must be 1x1, got {}x{}",
            k.kh, k.kw
        )));
    }
    conv2d(input, kernel, None, &ConvSpec::pointwise())
}

/// Backward pass of [`pointwise_conv2d`].
pub fn pointwise_conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &KernelTensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward(input, kernel, false, &ConvSpec::pointwise(), grad_out)
}
