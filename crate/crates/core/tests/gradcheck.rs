//! Finite-difference verification of every layer primitive's backward pass,
//! a direct nested-loop convolution oracle, and an end-to-end check on a
//! micro arrangement. All oracles run on f64 tensors with h = 1e-3.

use cmsnet_core::graph::{build_arrangement, ArrangementConfig};
use cmsnet_core::map::ClassMap;
use cmsnet_core::tensor::{
    self, BatchNormState, ConvSpec, KernelShape, KernelTensor, Mode, Padding, Shape,
    Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    let data: Vec<f64> = (0..shape.count()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn rand_kernel(rng: &mut ChaCha8Rng, shape: KernelShape) -> KernelTensor<f64> {
    let data: Vec<f64> = (0..shape.count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    KernelTensor::from_vec(shape, data).unwrap()
}

/// Weighted-sum functional of an op output: L = sum(out * w). Its gradient
/// with respect to the output is w, so each backward can be driven directly.
fn weighted(out: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Central finite differences of `f` with respect to one coordinate of `data`.
fn central_diff(data: &mut [f64], idx: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = data[idx];
    data[idx] = orig + H;
    let plus = f(data);
    data[idx] = orig - H;
    let minus = f(data);
    data[idx] = orig;
    (plus - minus) / (2.0 * H)
}

fn assert_grads_match(analytic: &[f64], check: impl Fn(usize) -> f64, what: &str) {
    let mut worst = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let n = check(i);
        let e = rel_err(a, n);
        if e > worst {
            worst = e;
        }
        assert!(e < TOL, "{what}: coord {i} analytic {a} vs numeric {n} (rel {e:.2e})");
    }
    println!("{what}: max rel err {worst:.3e}");
}

fn check_conv_case(seed: u64, in_shape: Shape, k: KernelShape, spec: ConvSpec, bias: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rand_tensor(&mut rng, in_shape, -1.0, 1.0);
    let kernel = rand_kernel(&mut rng, k);
    let bias_vec: Option<Vec<f64>> =
        bias.then(|| (0..k.out_c).map(|_| rng.gen_range(-0.5..0.5)).collect());
    let out = tensor::conv2d(&input, &kernel, bias_vec.as_deref(), &spec).unwrap();
    let w = rand_tensor(&mut rng, out.shape(), -1.0, 1.0);

    let grads = tensor::conv2d_backward(&input, &kernel, bias.into(), &spec, &w).unwrap();

    let in_data = input.data().to_vec();
    let eval_in = |d: &[f64]| {
        let t = Tensor::from_vec(in_shape, d.to_vec()).unwrap();
        weighted(&tensor::conv2d(&t, &kernel, bias_vec.as_deref(), &spec).unwrap(), &w)
    };
    assert_grads_match(
        grads.input.data(),
        |i| central_diff(&mut in_data.clone(), i, eval_in),
        &format!("conv2d input (seed {seed})"),
    );

    let k_data = kernel.data().to_vec();
    let eval_k = |d: &[f64]| {
        let kt = KernelTensor::from_vec(k, d.to_vec()).unwrap();
        weighted(&tensor::conv2d(&input, &kt, bias_vec.as_deref(), &spec).unwrap(), &w)
    };
    assert_grads_match(
        &grads.kernel,
        |i| central_diff(&mut k_data.clone(), i, eval_k),
        &format!("conv2d kernel (seed {seed})"),
    );

    if let (Some(gb), Some(bv)) = (grads.bias.as_ref(), bias_vec.as_ref()) {
        let b_data = bv.clone();
        let eval_b = |d: &[f64]| {
            weighted(&tensor::conv2d(&input, &kernel, Some(d), &spec).unwrap(), &w)
        };
        assert_grads_match(
            gb,
            |i| central_diff(&mut b_data.clone(), i, eval_b),
            &format!("conv2d bias (seed {seed})"),
        );
    }
}

#[test]
fn conv2d_gradients_stride_dilation_padding_matrix() {
    check_conv_case(
        1,
        Shape::new(2, 3, 6, 6),
        KernelShape::new(4, 3, 3, 3),
        ConvSpec::dense(1, 1, Padding::SameCeil),
        true,
    );
    check_conv_case(
        2,
        Shape::new(1, 2, 7, 7),
        KernelShape::new(3, 2, 3, 3),
        ConvSpec::dense(2, 1, Padding::SameCeil),
        false,
    );
    check_conv_case(
        3,
        Shape::new(1, 2, 8, 8),
        KernelShape::new(2, 2, 3, 3),
        ConvSpec::dense(1, 2, Padding::SameCeil),
        true,
    );
    check_conv_case(
        4,
        Shape::new(1, 1, 6, 6),
        KernelShape::new(2, 1, 3, 3),
        ConvSpec::dense(1, 1, Padding::Valid),
        false,
    );
}

#[test]
fn depthwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for spec in [
        ConvSpec::depthwise(1, 1, Padding::SameCeil),
        ConvSpec::depthwise(2, 1, Padding::SameCeil),
        ConvSpec::depthwise(1, 2, Padding::SameCeil),
    ] {
        let in_shape = Shape::new(2, 3, 6, 6);
        let k = KernelShape::new(3, 1, 3, 3);
        let input = rand_tensor(&mut rng, in_shape, -1.0, 1.0);
        let kernel = rand_kernel(&mut rng, k);
        let out = tensor::depthwise_conv2d(&input, &kernel, &spec).unwrap();
        let w = rand_tensor(&mut rng, out.shape(), -1.0, 1.0);
        let grads = tensor::depthwise_conv2d_backward(&input, &kernel, &spec, &w).unwrap();

        let eval_in = |d: &[f64]| {
            let t = Tensor::from_vec(in_shape, d.to_vec()).unwrap();
            weighted(&tensor::depthwise_conv2d(&t, &kernel, &spec).unwrap(), &w)
        };
        assert_grads_match(
            grads.input.data(),
            |i| central_diff(&mut input.data().to_vec(), i, eval_in),
            "depthwise input",
        );
        let eval_k = |d: &[f64]| {
            let kt = KernelTensor::from_vec(k, d.to_vec()).unwrap();
            weighted(&tensor::depthwise_conv2d(&input, &kt, &spec).unwrap(), &w)
        };
        assert_grads_match(
            &grads.kernel,
            |i| central_diff(&mut kernel.data().to_vec(), i, eval_k),
            "depthwise kernel",
        );
    }
}

#[test]
fn depthwise_equals_block_diagonal_dense() {
    // Depthwise over 3 channels == dense conv whose kernel is block-diagonal
    // across channels, to 1e-6.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let input = rand_tensor(&mut rng, Shape::new(1, 3, 7, 7), -1.0, 1.0);
    let dw_kernel = rand_kernel(&mut rng, KernelShape::new(3, 1, 3, 3));
    let dw = tensor::depthwise_conv2d(&input, &dw_kernel, &ConvSpec::depthwise(1, 1, Padding::SameCeil))
        .unwrap();

    let mut dense = KernelTensor::zeros(KernelShape::new(3, 3, 3, 3));
    for c in 0..3 {
        for i in 0..3 {
            for j in 0..3 {
                let v = dw_kernel.at(c, 0, i, j);
                let idx = KernelShape::new(3, 3, 3, 3).index(c, c, i, j);
                dense.data_mut()[idx] = v;
            }
        }
    }
    let dn = tensor::conv2d(&input, &dense, None, &ConvSpec::dense(1, 1, Padding::SameCeil)).unwrap();
    for (a, b) in dw.data().iter().zip(dn.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn pointwise_delegates_to_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = rand_tensor(&mut rng, Shape::new(2, 4, 5, 5), -1.0, 1.0);
    let kernel = rand_kernel(&mut rng, KernelShape::new(3, 4, 1, 1));
    let a = tensor::pointwise_conv2d(&input, &kernel).unwrap();
    let b = tensor::conv2d(&input, &kernel, None, &ConvSpec::pointwise()).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn relu6_gradient_including_hand_values() {
    // Away from the kinks at 0 and 6 the derivative is exact.
    let vals = vec![3.0f64, 7.0, -2.0, 5.5, 0.5, 6.5];
    let input = Tensor::from_vec(Shape::new(1, 1, 1, 6), vals.clone()).unwrap();
    let w = Tensor::filled(input.shape(), 1.0);
    let g = tensor::relu6_backward(&input, &w).unwrap();
    assert_eq!(g.data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    let eval = |d: &[f64]| {
        let t = Tensor::from_vec(input.shape(), d.to_vec()).unwrap();
        weighted(&tensor::relu6(&t), &w)
    };
    assert_grads_match(
        g.data(),
        |i| central_diff(&mut vals.clone(), i, eval),
        "relu6",
    );
}

#[test]
fn batch_norm_gradients_train_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shape = Shape::new(2, 3, 4, 4);
    let input = rand_tensor(&mut rng, shape, -2.0, 2.0);
    let mut state = BatchNormState::<f64>::identity(3, 1e-3, 0.99);
    state.mode = Mode::Train;
    for v in state.gamma.data_mut() {
        *v = rng.gen_range(0.5..1.5);
    }
    for v in state.beta.data_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let (out, cache) = tensor::batch_norm(&input, &mut state.clone()).unwrap();
    let cache = cache.unwrap();
    let w = rand_tensor(&mut rng, out.shape(), -1.0, 1.0);
    let (gx, ggamma, gbeta) = tensor::batch_norm_backward(&input, &state, &cache, &w).unwrap();

    let eval_in = |d: &[f64]| {
        let t = Tensor::from_vec(shape, d.to_vec()).unwrap();
        let (o, _) = tensor::batch_norm(&t, &mut state.clone()).unwrap();
        weighted(&o, &w)
    };
    assert_grads_match(
        gx.data(),
        |i| central_diff(&mut input.data().to_vec(), i, eval_in),
        "batch_norm input",
    );

    let eval_gamma = |d: &[f64]| {
        let mut st = state.clone();
        st.gamma.data_mut().copy_from_slice(d);
        let (o, _) = tensor::batch_norm(&input, &mut st).unwrap();
        weighted(&o, &w)
    };
    assert_grads_match(
        &ggamma,
        |i| central_diff(&mut state.gamma.data().to_vec(), i, eval_gamma),
        "batch_norm gamma",
    );

    let eval_beta = |d: &[f64]| {
        let mut st = state.clone();
        st.beta.data_mut().copy_from_slice(d);
        let (o, _) = tensor::batch_norm(&input, &mut st).unwrap();
        weighted(&o, &w)
    };
    assert_grads_match(
        &gbeta,
        |i| central_diff(&mut state.beta.data().to_vec(), i, eval_beta),
        "batch_norm beta",
    );
}

#[test]
fn pooling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let shape = Shape::new(1, 2, 6, 6);
    let input = rand_tensor(&mut rng, shape, -1.0, 1.0);

    let avg = tensor::avg_pool(&input, 2, 2, Padding::Valid).unwrap();
    let w = rand_tensor(&mut rng, avg.shape(), -1.0, 1.0);
    let g = tensor::avg_pool_backward(&input, 2, 2, Padding::Valid, &w).unwrap();
    let eval = |d: &[f64]| {
        let t = Tensor::from_vec(shape, d.to_vec()).unwrap();
        weighted(&tensor::avg_pool(&t, 2, 2, Padding::Valid).unwrap(), &w)
    };
    assert_grads_match(
        g.data(),
        |i| central_diff(&mut input.data().to_vec(), i, eval),
        "avg_pool",
    );

    let mx = tensor::max_pool(&input, 2, 2, Padding::Valid).unwrap();
    let w = rand_tensor(&mut rng, mx.shape(), -1.0, 1.0);
    let g = tensor::max_pool_backward(&input, 2, 2, Padding::Valid, &w).unwrap();
    let eval = |d: &[f64]| {
        let t = Tensor::from_vec(shape, d.to_vec()).unwrap();
        weighted(&tensor::max_pool(&t, 2, 2, Padding::Valid).unwrap(), &w)
    };
    assert_grads_match(
        g.data(),
        |i| central_diff(&mut input.data().to_vec(), i, eval),
        "max_pool",
    );

    let ad = tensor::adaptive_avg_pool(&input, 3, 2).unwrap();
    let w = rand_tensor(&mut rng, ad.shape(), -1.0, 1.0);
    let g = tensor::adaptive_avg_pool_backward(shape, 3, 2, &w).unwrap();
    let eval = |d: &[f64]| {
        let t = Tensor::from_vec(shape, d.to_vec()).unwrap();
        weighted(&tensor::adaptive_avg_pool(&t, 3, 2).unwrap(), &w)
    };
    assert_grads_match(
        g.data(),
        |i| central_diff(&mut input.data().to_vec(), i, eval),
        "adaptive_avg_pool",
    );
}

#[test]
fn pooling_matches_bruteforce_window_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let shape = Shape::new(1, 1, 6, 6);
    let input = rand_tensor(&mut rng, shape, -1.0, 1.0);
    let mx = tensor::max_pool(&input, 2, 2, Padding::Valid).unwrap();
    let av = tensor::avg_pool(&input, 2, 2, Padding::Valid).unwrap();
    for y in 0..3 {
        for x in 0..3 {
            let mut m = f64::NEG_INFINITY;
            let mut s = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let v = input.at(0, 0, 2 * y + i, 2 * x + j);
                    m = m.max(v);
                    s += v;
                }
            }
            assert_eq!(mx.at(0, 0, y, x), m);
            assert!((av.at(0, 0, y, x) - s / 4.0).abs() < 1e-12);
        }
    }
}

#[test]
fn bilinear_resize_gradient_is_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let shape = Shape::new(1, 2, 4, 5);
    let input = rand_tensor(&mut rng, shape, -1.0, 1.0);
    let out = tensor::bilinear_resize(&input, 7, 9).unwrap();
    let w = rand_tensor(&mut rng, out.shape(), -1.0, 1.0);
    let g = tensor::bilinear_resize_backward(shape, &w).unwrap();
    let eval = |d: &[f64]| {
        let t = Tensor::from_vec(shape, d.to_vec()).unwrap();
        weighted(&tensor::bilinear_resize(&t, 7, 9).unwrap(), &w)
    };
    assert_grads_match(
        g.data(),
        |i| central_diff(&mut input.data().to_vec(), i, eval),
        "bilinear_resize",
    );
}

#[test]
fn concat_and_add_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let sa = Shape::new(1, 2, 3, 3);
    let sb = Shape::new(1, 3, 3, 3);
    let a = rand_tensor(&mut rng, sa, -1.0, 1.0);
    let b = rand_tensor(&mut rng, sb, -1.0, 1.0);
    let out = tensor::concat_channels(&[&a, &b]).unwrap();
    let ones = Tensor::filled(out.shape(), 1.0);
    let parts = tensor::concat_channels_backward(&[sa, sb], &ones).unwrap();
    // An all-ones output grad splits into all-ones parts.
    assert!(parts[0].data().iter().all(|&v| v == 1.0));
    assert!(parts[1].data().iter().all(|&v| v == 1.0));
    // Finite differences on the first input.
    let w = rand_tensor(&mut rng, out.shape(), -1.0, 1.0);
    let parts = tensor::concat_channels_backward(&[sa, sb], &w).unwrap();
    let eval = |d: &[f64]| {
        let t = Tensor::from_vec(sa, d.to_vec()).unwrap();
        weighted(&tensor::concat_channels(&[&t, &b]).unwrap(), &w)
    };
    assert_grads_match(
        parts[0].data(),
        |i| central_diff(&mut a.data().to_vec(), i, eval),
        "concat input[0]",
    );
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let shape = Shape::new(2, 3, 4, 4);
    let logits = rand_tensor(&mut rng, shape, -2.0, 2.0);
    let labels: Vec<ClassMap> = (0..2)
        .map(|_| {
            let data: Vec<u8> =
                (0..16).map(|_| if rng.gen_bool(0.2) { 255 } else { rng.gen_range(0..3) }).collect();
            ClassMap::from_vec(4, 4, data).unwrap()
        })
        .collect();
    let ce = tensor::softmax_cross_entropy(&logits, &labels, Some(255)).unwrap();
    let eval = |d: &[f64]| {
        let t = Tensor::from_vec(shape, d.to_vec()).unwrap();
        tensor::softmax_cross_entropy(&t, &labels, Some(255)).unwrap().loss
    };
    assert_grads_match(
        ce.grad.data(),
        |i| central_diff(&mut logits.data().to_vec(), i, eval),
        "softmax_cross_entropy",
    );
}

// ---------------------------------------------------------------------------
// Direct convolution oracle and algebraic properties
// ---------------------------------------------------------------------------

/// Nested-loop evaluation of `Y(m,n,o) = sum_{i,j,l} X(m*s - p + i*d, ...) *
/// W(i,j,l,o)`, written independently of the production kernel.
fn conv_direct(
    input: &Tensor<f64>,
    kernel: &KernelTensor<f64>,
    stride: usize,
    dilation: usize,
    same: bool,
) -> Tensor<f64> {
    let s = input.shape();
    let k = kernel.shape();
    let eff_h = (k.kh - 1) * dilation + 1;
    let eff_w = (k.kw - 1) * dilation + 1;
    let (oh, ow, py, px) = if same {
        let oh = s.h.div_ceil(stride);
        let ow = s.w.div_ceil(stride);
        let ty = ((oh - 1) * stride + eff_h).saturating_sub(s.h);
        let tx = ((ow - 1) * stride + eff_w).saturating_sub(s.w);
        (oh, ow, ty / 2, tx / 2)
    } else {
        ((s.h - eff_h) / stride + 1, (s.w - eff_w) / stride + 1, 0, 0)
    };
    let mut out = Tensor::zeros(Shape::new(s.n, k.out_c, oh, ow));
    for n in 0..s.n {
        for o in 0..k.out_c {
            for m in 0..oh {
                for q in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..k.kh {
                        for j in 0..k.kw {
                            for l in 0..s.c {
                                let y = m as isize * stride as isize + (i * dilation) as isize
                                    - py as isize;
                                let x = q as isize * stride as isize + (j * dilation) as isize
                                    - px as isize;
                                if y < 0 || y >= s.h as isize || x < 0 || x >= s.w as isize {
                                    continue;
                                }
                                acc += input.at(n, l, y as usize, x as usize)
                                    * kernel.at(o, l, i, j);
                            }
                        }
                    }
                    out.set(n, o, m, q, acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for (stride, dilation, same) in
        [(1, 1, true), (2, 1, true), (1, 2, true), (2, 2, true), (1, 1, false), (2, 1, false)]
    {
        let input = rand_tensor(&mut rng, Shape::new(2, 3, 8, 8), -1.0, 1.0);
        let kernel = rand_kernel(&mut rng, KernelShape::new(4, 3, 3, 3));
        let spec = ConvSpec::dense(
            stride,
            dilation,
            if same { Padding::SameCeil } else { Padding::Valid },
        );
        let ours = tensor::conv2d(&input, &kernel, None, &spec).unwrap();
        let oracle = conv_direct(&input, &kernel, stride, dilation, same);
        assert_eq!(ours.shape(), oracle.shape());
        for (a, b) in ours.data().iter().zip(oracle.data()) {
            assert!(
                (a - b).abs() < 1e-5,
                "stride {stride} dilation {dilation} same {same}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn conv2d_is_linear_in_its_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let shape = Shape::new(1, 2, 8, 8);
    let x = rand_tensor(&mut rng, shape, -1.0, 1.0);
    let y = rand_tensor(&mut rng, shape, -1.0, 1.0);
    let kernel = rand_kernel(&mut rng, KernelShape::new(3, 2, 3, 3));
    let spec = ConvSpec::dense(1, 1, Padding::SameCeil);
    let (alpha, beta) = (0.7, -1.3);

    let mut mix = Tensor::zeros(shape);
    for ((m, &a), &b) in mix.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
        *m = alpha * a + beta * b;
    }
    let lhs = tensor::conv2d(&mix, &kernel, None, &spec).unwrap();
    let cx = tensor::conv2d(&x, &kernel, None, &spec).unwrap();
    let cy = tensor::conv2d(&y, &kernel, None, &spec).unwrap();
    for ((l, &a), &b) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
        assert!((l - (alpha * a + beta * b)).abs() < 1e-5);
    }
}

#[test]
fn same_ceil_output_extent_is_exhaustively_ceil() {
    for input in 1usize..=32 {
        for stride in [1usize, 2] {
            for dilation in [1usize, 2] {
                for k in [1usize, 3] {
                    let spec = ConvSpec::dense(stride, dilation, Padding::SameCeil);
                    let out = tensor::shape_axis(input, k, &spec).unwrap();
                    assert_eq!(
                        out,
                        input.div_ceil(stride),
                        "in {input} stride {stride} dil {dilation} k {k}"
                    );
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// End-to-end gradient check on a micro arrangement
// ---------------------------------------------------------------------------

/// CM2 (OS8, ASPP) at width 0.125 on a 16x16 canvas: output stride 8 keeps
/// the deepest feature map at 2x2, so every batch norm still sees several
/// values per channel (OS16 would collapse to 1x1, making the batch
/// statistics — and the check — degenerate).
fn micro_graph() -> cmsnet_core::graph::NetworkGraph<f64> {
    let cfg = ArrangementConfig::named("CM2", 3)
        .unwrap()
        .with_width(0.125);
    build_arrangement::<f64>(&cfg, (16, 16), 99).unwrap()
}

fn micro_loss(
    graph: &cmsnet_core::graph::NetworkGraph<f64>,
    input: &Tensor<f64>,
    labels: &[ClassMap],
) -> f64 {
    let mut g = graph.clone();
    let store = g.forward_train(input).unwrap();
    tensor::softmax_cross_entropy(store.output(), labels, Some(255)).unwrap().loss
}

#[test]
fn end_to_end_micro_arrangement_gradcheck() {
    let graph = micro_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let input = rand_tensor(&mut rng, Shape::new(1, 3, 16, 16), 0.0, 1.0);
    let labels = vec![ClassMap::from_vec(
        16,
        16,
        (0..256).map(|_| rng.gen_range(0..3u8)).collect(),
    )
    .unwrap()];

    // Analytic gradients for every parameter tensor.
    let mut g = graph.clone();
    g.zero_grads();
    let store = g.forward_train(&input).unwrap();
    let ce = tensor::softmax_cross_entropy(store.output(), &labels, Some(255)).unwrap();
    let grad_in = g.backward(&store, &ce.grad).unwrap();

    let mut analytic: Vec<Vec<f64>> = Vec::new();
    g.visit_params_mut(|_, grad| analytic.push(grad.expect("grads populated").to_vec()));

    // Sample a few coordinates per parameter tensor; a full sweep over every
    // scalar would need hundreds of thousands of forward passes.
    //
    // The composed network is only piecewise smooth (ReLU6 kinks): a
    // perturbation that pushes some activation across a kink makes central
    // differences estimate the wrong one-sided slope. Finite differences are
    // a valid derivative oracle only on smooth coordinates, so each sampled
    // coordinate is probed at two step sizes; disagreement flags a kink
    // inside the interval and the coordinate is skipped. The steps are
    // smaller than the per-op h=1e-3 because a single perturbation here
    // sweeps thousands of downstream activations past potential kinks; in
    // f64 the roundoff floor at h=1e-6 is still ~1e-8.
    let h_coarse = 1e-5;
    let h_small = 1e-6;
    let sizes: Vec<usize> = analytic.iter().map(|g| g.len()).collect();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for (pi, &len) in sizes.iter().enumerate() {
        let picks: Vec<usize> =
            (0..len.min(2)).map(|_| rng.gen_range(0..len)).collect();
        for idx in picks {
            let a = analytic[pi][idx];
            let fd = |h: f64| {
                let perturbed = |delta: f64| {
                    let mut gg = graph.clone();
                    let mut counter = 0usize;
                    gg.visit_params_mut(|data, _| {
                        if counter == pi {
                            data[idx] += delta;
                        }
                        counter += 1;
                    });
                    micro_loss(&gg, &input, &labels)
                };
                (perturbed(h) - perturbed(-h)) / (2.0 * h)
            };
            let coarse = fd(h_coarse);
            let fine = fd(h_small);
            if rel_err(coarse, fine) >= TOL {
                skipped += 1;
                continue;
            }
            let e = rel_err(a, fine);
            worst = worst.max(e);
            checked += 1;
            assert!(
                e < TOL,
                "param tensor {pi} coord {idx}: analytic {a} vs numeric {fine} (rel {e:.2e})"
            );
        }
    }

    // Input gradient, a handful of coordinates.
    for _ in 0..6 {
        let idx = rng.gen_range(0..input.shape().count());
        let a = grad_in.data()[idx];
        let fd = |h: f64| {
            let mut data = input.data().to_vec();
            data[idx] += h;
            let plus = micro_loss(
                &graph,
                &Tensor::from_vec(input.shape(), data.clone()).unwrap(),
                &labels,
            );
            data[idx] -= 2.0 * h;
            let minus =
                micro_loss(&graph, &Tensor::from_vec(input.shape(), data).unwrap(), &labels);
            (plus - minus) / (2.0 * h)
        };
        let coarse = fd(h_coarse);
        let fine = fd(h_small);
        if rel_err(coarse, fine) >= TOL {
            skipped += 1;
            continue;
        }
        let e = rel_err(a, fine);
        worst = worst.max(e);
        checked += 1;
        assert!(e < TOL, "input coord {idx}: analytic {a} vs numeric {fine}");
    }
    println!(
        "end-to-end micro gradcheck: {checked} smooth coords pass, {skipped} kink-crossing skipped, max rel err {worst:.3e}"
    );
    assert!(checked >= 60, "too few smooth coordinates verified ({checked})");
    assert!(
        skipped * 4 <= checked,
        "kink filter rejected too many coordinates ({skipped} of {})",
        checked + skipped
    );
}
