//! Network graphs: an ordered node list (topological order) where each node
//! names its input nodes. Covers construction of the adapted MobileNetV2
//! backbone plus the nine arrangement variants, shape inference, parameter
//! counting, execution, and serialization.

mod build;
mod serialize;

pub use build::{
    build_arrangement, build_backbone, build_pyramid, make_divisible, Activation,
    ArrangementConfig, BottleneckSpec, PyramidKind, ARRANGEMENT_NAMES,
};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::map::ClassMap;
use crate::tensor::{
    self, BatchNormCache, BatchNormState, ConvSpec, Element, Grouping, KernelTensor, Mode, Shape,
    Tensor,
};

pub type NodeId = usize;

/// Spatial target of an adaptive average pooling node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolTarget {
    /// Pool the whole extent to 1x1.
    Global,
    /// Pool to `(max(1, ceil(h/d)), max(1, ceil(w/d)))`.
    CeilDiv(usize),
}

impl PoolTarget {
    pub fn resolve(&self, h: usize, w: usize) -> (usize, usize) {
        match self {
            PoolTarget::Global => (1, 1),
            PoolTarget::CeilDiv(d) => (h.div_ceil(*d).max(1), w.div_ceil(*d).max(1)),
        }
    }
}

/// One layer operation; parameter tensors live inside their node.
#[derive(Clone, Debug)]
pub enum LayerOp<T: Element> {
    Input,
    Conv { kernel: KernelTensor<T>, bias: Option<Tensor<T>>, spec: ConvSpec },
    BatchNorm { state: BatchNormState<T> },
    Relu6,
    Relu,
    AdaptiveAvgPool { target: PoolTarget },
    /// Bilinear resize to the spatial extent of `reference` (shape only; no
    /// gradient flows to the reference).
    ResizeLike { reference: NodeId },
    Add,
    Concat,
}

#[derive(Clone, Debug)]
pub struct Node<T: Element> {
    pub name: String,
    pub inputs: Vec<NodeId>,
    pub op: LayerOp<T>,
}

/// Built network: ordered nodes, exposed tap points, declared input shape,
/// and the backbone row anchors used by shape reports.
#[derive(Clone, Debug)]
pub struct NetworkGraph<T: Element = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) taps: BTreeMap<String, NodeId>,
    pub(crate) rows: Vec<(String, NodeId)>,
    pub(crate) declared_input: Shape,
    pub(crate) num_classes: usize,
    pub(crate) arrangement: Option<ArrangementConfig>,
}

/// Activations and per-node caches recorded by a train-mode forward pass.
pub struct FwdStore<T: Element> {
    acts: Vec<Tensor<T>>,
    bn_caches: Vec<Option<BatchNormCache<T>>>,
}

impl<T: Element> FwdStore<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("non-empty graph")
    }
}

impl<T: Element> NetworkGraph<T> {
    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn declared_input(&self) -> Shape {
        self.declared_input
    }

    pub fn arrangement(&self) -> Option<&ArrangementConfig> {
        self.arrangement.as_ref()
    }

    pub fn tap(&self, name: &str) -> Option<NodeId> {
        self.taps.get(name).copied()
    }

    /// Backbone row anchors: `(label, node)` where the row's feature extent
    /// is the input shape of `node`.
    pub fn backbone_rows(&self) -> &[(String, NodeId)] {
        &self.rows
    }

    /// Per-node output shapes for the given input, without executing anything.
    pub fn infer_shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let shape = match &node.op {
                LayerOp::Input => input,
                LayerOp::Conv { kernel, spec, .. } => {
                    let s = shapes[node.inputs[0]];
                    let k = kernel.shape();
                    let expect_in = match spec.groups {
                        Grouping::Dense => k.in_c,
                        Grouping::Depthwise => k.out_c,
                    };
                    if expect_in != s.c {
                        return Err(Error::Dimension(format!(
                            "node {} ({}): kernel expects {} input channels, got {}",
                            id, node.name, expect_in, s.c
                        )));
                    }
                    let gy = tensor::shape_axis(s.h, k.kh, spec)?;
                    let gx = tensor::shape_axis(s.w, k.kw, spec)?;
                    Shape::new(s.n, k.out_c, gy, gx)
                }
                LayerOp::BatchNorm { state } => {
                    let s = shapes[node.inputs[0]];
                    if state.channels() != s.c {
                        return Err(Error::Dimension(format!(
                            "node {} ({}): batch norm covers {} channels, input has {}",
                            id,
                            node.name,
                            state.channels(),
                            s.c
                        )));
                    }
                    s
                }
                LayerOp::Relu6 | LayerOp::Relu => shapes[node.inputs[0]],
                LayerOp::AdaptiveAvgPool { target } => {
                    let s = shapes[node.inputs[0]];
                    let (oh, ow) = target.resolve(s.h, s.w);
                    Shape::new(s.n, s.c, oh, ow)
                }
                LayerOp::ResizeLike { reference } => {
                    let s = shapes[node.inputs[0]];
                    let r = shapes[*reference];
                    Shape::new(s.n, s.c, r.h, r.w)
                }
                LayerOp::Add => {
                    let a = shapes[node.inputs[0]];
                    let b = shapes[node.inputs[1]];
                    if a != b {
                        return Err(Error::Dimension(format!(
                            "node {} ({}): add inputs {} vs {}",
                            id, node.name, a, b
                        )));
                    }
                    a
                }
                LayerOp::Concat => {
                    let first = shapes[node.inputs[0]];
                    let mut c = 0;
                    for &i in &node.inputs {
                        let s = shapes[i];
                        if s.n != first.n || s.h != first.h || s.w != first.w {
                            return Err(Error::Dimension(format!(
                                "node {} ({}): concat input {} has shape {}, expected spatial {}",
                                id, node.name, i, s, first
                            )));
                        }
                        c += s.c;
                    }
                    Shape::new(first.n, c, first.h, first.w)
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Total trainable scalars: conv kernels and biases plus batch-norm
    /// gamma/beta.
    pub fn count_parameters(&self) -> usize {
        let mut total = 0;
        for node in &self.nodes {
            match &node.op {
                LayerOp::Conv { kernel, bias, .. } => {
                    total += kernel.shape().count();
                    if let Some(b) = bias {
                        total += b.shape().count();
                    }
                }
                LayerOp::BatchNorm { state } => {
                    total += 2 * state.channels();
                }
                _ => {}
            }
        }
        total
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let s = input.shape();
        let d = self.declared_input;
        if s.c != d.c || s.h != d.h || s.w != d.w {
            return Err(Error::Dimension(format!(
                "forward: input {} does not match declared input {} (batch axis free)",
                s, d
            )));
        }
        Ok(())
    }

    /// Inference forward pass; immutable, safe to call concurrently.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        // Free each activation after its last consumer to bound memory.
        let mut last_use = vec![0usize; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                last_use[i] = last_use[i].max(id);
            }
        }
        let shapes = self.infer_shapes(input.shape())?;
        let mut acts: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            let out = self.eval_node(id, node, &acts, &shapes, input, None)?;
            acts[id] = Some(out);
            for &i in &node.inputs {
                if last_use[i] == id && i != self.nodes.len() - 1 {
                    acts[i] = None;
                }
            }
        }
        Ok(acts.pop().unwrap().expect("output retained"))
    }

    /// Train-mode forward pass: batch-norm uses batch statistics and updates
    /// running estimates; all activations are retained for [`Self::backward`].
    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<FwdStore<T>> {
        self.check_input(input)?;
        let shapes = self.infer_shapes(input.shape())?;
        let mut acts: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut caches: Vec<Option<BatchNormCache<T>>> = Vec::with_capacity(self.nodes.len());
        for id in 0..self.nodes.len() {
            // Split borrow: clone op-free node metadata, mutate BN state in place.
            let (out, cache) = {
                let node = &self.nodes[id];
                if let LayerOp::BatchNorm { .. } = node.op {
                    let x = acts[node.inputs[0]].as_ref().expect("retained activation");
                    let x = x.clone();
                    match &mut self.nodes[id].op {
                        LayerOp::BatchNorm { state } => {
                            state.mode = Mode::Train;
                            let (out, cache) = tensor::batch_norm(&x, state)?;
                            (out, cache)
                        }
                        _ => unreachable!(),
                    }
                } else {
                    let out = self.eval_node(id, node, &acts, &shapes, input, None)?;
                    (out, None)
                }
            };
            acts[id] = Some(out);
            caches.push(cache);
        }
        Ok(FwdStore {
            acts: acts.into_iter().map(|a| a.expect("train keeps activations")).collect(),
            bn_caches: caches,
        })
    }

    fn eval_node(
        &self,
        _id: NodeId,
        node: &Node<T>,
        acts: &[Option<Tensor<T>>],
        shapes: &[Shape],
        input: &Tensor<T>,
        _cache: Option<()>,
    ) -> Result<Tensor<T>> {
        let arg = |i: usize| acts[node.inputs[i]].as_ref().expect("retained activation");
        Ok(match &node.op {
            LayerOp::Input => input.clone(),
            LayerOp::Conv { kernel, bias, spec } => match spec.groups {
                Grouping::Dense => {
                    tensor::conv2d(arg(0), kernel, bias.as_ref().map(|b| b.data()), spec)?
                }
                Grouping::Depthwise => tensor::depthwise_conv2d(arg(0), kernel, spec)?,
            },
            LayerOp::BatchNorm { state } => tensor::batch_norm_infer(arg(0), state)?,
            LayerOp::Relu6 => tensor::relu6(arg(0)),
            LayerOp::Relu => tensor::relu(arg(0)),
            LayerOp::AdaptiveAvgPool { target } => {
                let s = arg(0).shape();
                let (oh, ow) = target.resolve(s.h, s.w);
                tensor::adaptive_avg_pool(arg(0), oh, ow)?
            }
            LayerOp::ResizeLike { reference } => {
                let r = shapes[*reference];
                tensor::bilinear_resize(arg(0), r.h, r.w)?
            }
            LayerOp::Add => tensor::add(arg(0), arg(1))?,
            LayerOp::Concat => {
                let refs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|&i| acts[i].as_ref().unwrap()).collect();
                tensor::concat_channels(&refs)?
            }
        })
    }

    /// Reverse pass over a recorded forward. Accumulates parameter gradients
    /// in place and returns the gradient with respect to the graph input.
    pub fn backward(&mut self, store: &FwdStore<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.nodes.len();
        if grad_output.shape() != store.acts[n - 1].shape() {
            return Err(Error::Dimension(format!(
                "backward: output grad {} vs forward output {}",
                grad_output.shape(),
                store.acts[n - 1].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[n - 1] = Some(grad_output.clone());

        let add_grad = |slot: &mut Option<Tensor<T>>, delta: Tensor<T>| {
            match slot {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                        *a += *b;
                    }
                }
                None => *slot = Some(delta),
            }
        };

        for id in (0..n).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let inputs = self.nodes[id].inputs.clone();
            match &mut self.nodes[id].op {
                LayerOp::Input => {
                    grads[id] = Some(gout);
                }
                LayerOp::Conv { kernel, bias, spec } => {
                    let x = &store.acts[inputs[0]];
                    let g = match spec.groups {
                        Grouping::Dense => {
                            tensor::conv2d_backward(x, kernel, bias.is_some(), spec, &gout)?
                        }
                        Grouping::Depthwise => {
                            tensor::depthwise_conv2d_backward(x, kernel, spec, &gout)?
                        }
                    };
                    kernel.accumulate_grad(&g.kernel);
                    if let (Some(b), Some(gb)) = (bias.as_mut(), g.bias.as_ref()) {
                        b.accumulate_grad(gb);
                    }
                    add_grad(&mut grads[inputs[0]], g.input);
                }
                LayerOp::BatchNorm { state } => {
                    let x = &store.acts[inputs[0]];
                    let cache = store.bn_caches[id]
                        .as_ref()
                        .ok_or_else(|| Error::Validation(
                            "backward requires a train-mode forward store".into(),
                        ))?;
                    let (gx, ggamma, gbeta) = tensor::batch_norm_backward(x, state, cache, &gout)?;
                    state.gamma.accumulate_grad(&ggamma);
                    state.beta.accumulate_grad(&gbeta);
                    add_grad(&mut grads[inputs[0]], gx);
                }
                LayerOp::Relu6 => {
                    let gx = tensor::relu6_backward(&store.acts[inputs[0]], &gout)?;
                    add_grad(&mut grads[inputs[0]], gx);
                }
                LayerOp::Relu => {
                    let gx = tensor::relu_backward(&store.acts[inputs[0]], &gout)?;
                    add_grad(&mut grads[inputs[0]], gx);
                }
                LayerOp::AdaptiveAvgPool { target } => {
                    let s = store.acts[inputs[0]].shape();
                    let (oh, ow) = target.resolve(s.h, s.w);
                    let gx = tensor::adaptive_avg_pool_backward(s, oh, ow, &gout)?;
                    add_grad(&mut grads[inputs[0]], gx);
                }
                LayerOp::ResizeLike { .. } => {
                    let s = store.acts[inputs[0]].shape();
                    let gx = tensor::bilinear_resize_backward(s, &gout)?;
                    add_grad(&mut grads[inputs[0]], gx);
                }
                LayerOp::Add => {
                    let (ga, gb) = tensor::add_backward(&gout);
                    add_grad(&mut grads[inputs[0]], ga);
                    add_grad(&mut grads[inputs[1]], gb);
                }
                LayerOp::Concat => {
                    let shapes: Vec<Shape> =
                        inputs.iter().map(|&i| store.acts[i].shape()).collect();
                    let parts = tensor::concat_channels_backward(&shapes, &gout)?;
                    for (&i, part) in inputs.iter().zip(parts) {
                        add_grad(&mut grads[i], part);
                    }
                }
            }
        }
        Ok(grads[0].take().unwrap_or_else(|| Tensor::zeros(store.acts[0].shape())))
    }

    /// Zeroes (allocating if needed) every parameter gradient buffer.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            match &mut node.op {
                LayerOp::Conv { kernel, bias, .. } => {
                    kernel.zero_grad();
                    if let Some(b) = bias {
                        b.zero_grad();
                    }
                }
                LayerOp::BatchNorm { state } => {
                    state.gamma.zero_grad();
                    state.beta.zero_grad();
                }
                _ => {}
            }
        }
    }

    /// Visits `(flat data, flat grad)` of every parameter tensor in node
    /// order. The visitation order is the stable contract the optimizer's
    /// velocity state relies on.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut [T], Option<&[T]>)) {
        for node in &mut self.nodes {
            match &mut node.op {
                LayerOp::Conv { kernel, bias, .. } => {
                    let g = kernel.grad().map(|g| g.to_vec());
                    f(kernel.data_mut(), g.as_deref());
                    if let Some(b) = bias {
                        let g = b.grad().map(|g| g.to_vec());
                        f(b.data_mut(), g.as_deref());
                    }
                }
                LayerOp::BatchNorm { state } => {
                    let g = state.gamma.grad().map(|g| g.to_vec());
                    f(state.gamma.data_mut(), g.as_deref());
                    let g = state.beta.grad().map(|g| g.to_vec());
                    f(state.beta.data_mut(), g.as_deref());
                }
                _ => {}
            }
        }
    }

    /// Parameter tensor sizes in visitation order.
    pub fn param_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        for node in &self.nodes {
            match &node.op {
                LayerOp::Conv { kernel, bias, .. } => {
                    sizes.push(kernel.shape().count());
                    if let Some(b) = bias {
                        sizes.push(b.shape().count());
                    }
                }
                LayerOp::BatchNorm { state } => {
                    sizes.push(state.channels());
                    sizes.push(state.channels());
                }
                _ => {}
            }
        }
        sizes
    }

    pub fn cast<U: Element>(&self) -> NetworkGraph<U> {
        NetworkGraph {
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    name: n.name.clone(),
                    inputs: n.inputs.clone(),
                    op: match &n.op {
                        LayerOp::Input => LayerOp::Input,
                        LayerOp::Conv { kernel, bias, spec } => LayerOp::Conv {
                            kernel: kernel.cast(),
                            bias: bias.as_ref().map(|b| b.cast()),
                            spec: *spec,
                        },
                        LayerOp::BatchNorm { state } => {
                            LayerOp::BatchNorm { state: state.cast() }
                        }
                        LayerOp::Relu6 => LayerOp::Relu6,
                        LayerOp::Relu => LayerOp::Relu,
                        LayerOp::AdaptiveAvgPool { target } => {
                            LayerOp::AdaptiveAvgPool { target: *target }
                        }
                        LayerOp::ResizeLike { reference } => {
                            LayerOp::ResizeLike { reference: *reference }
                        }
                        LayerOp::Add => LayerOp::Add,
                        LayerOp::Concat => LayerOp::Concat,
                    },
                })
                .collect(),
            taps: self.taps.clone(),
            rows: self.rows.clone(),
            declared_input: self.declared_input,
            num_classes: self.num_classes,
            arrangement: self.arrangement.clone(),
        }
    }
}

/// Per-pixel argmax over the class axis, lowest index winning ties.
pub fn argmax_maps<T: Element>(logits: &Tensor<T>) -> Vec<ClassMap> {
    let s = logits.shape();
    let plane = s.h * s.w;
    (0..s.n)
        .map(|n| {
            let mut map = ClassMap::filled(s.h, s.w, 0);
            for p in 0..plane {
                let mut best_c = 0u8;
                let mut best_v = logits.data()[n * s.c * plane + p];
                for c in 1..s.c {
                    let v = logits.data()[(n * s.c + c) * plane + p];
                    if v > best_v {
                        best_v = v;
                        best_c = c as u8;
                    }
                }
                map.data[p] = best_c;
            }
            map
        })
        .collect()
}

/// Inference + argmax for a single image (batch of one).
pub fn predict<T: Element>(graph: &NetworkGraph<T>, image: &Tensor<T>) -> Result<ClassMap> {
    let logits = graph.forward(image)?;
    Ok(argmax_maps(&logits).remove(0))
}
