//! Checkpoint container: a JSON manifest describing the node list plus a
//! little-endian float32 blob holding every tensor at a recorded byte offset.
//! Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArrangementConfig, LayerOp, NetworkGraph, Node, NodeId, PoolTarget};
use crate::error::{Error, Result};
use crate::tensor::{
    BatchNormState, ConvSpec, Grouping, KernelShape, KernelTensor, Mode, Padding, Shape, Tensor,
};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Serialize, Deserialize)]
struct TensorRef {
    byte_offset: u64,
    elements: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum OpManifest {
    Input,
    Conv {
        out_c: usize,
        in_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        dilation: usize,
        padding: Padding,
        grouping: Grouping,
        kernel: TensorRef,
        bias: Option<TensorRef>,
    },
    BatchNorm {
        channels: usize,
        epsilon: f64,
        momentum: f64,
        gamma: TensorRef,
        beta: TensorRef,
        running_mean: TensorRef,
        running_var: TensorRef,
    },
    Relu6,
    Relu,
    AdaptiveAvgPool { target: PoolTarget },
    ResizeLike { reference: NodeId },
    Add,
    Concat,
}

#[derive(Serialize, Deserialize)]
struct NodeManifest {
    name: String,
    inputs: Vec<NodeId>,
    op: OpManifest,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    declared_input: Shape,
    num_classes: usize,
    arrangement: Option<ArrangementConfig>,
    taps: BTreeMap<String, NodeId>,
    rows: Vec<(String, NodeId)>,
    weights_bytes: u64,
    nodes: Vec<NodeManifest>,
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, data: &[f32]) -> TensorRef {
        let byte_offset = self.bytes.len() as u64;
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorRef { byte_offset, elements: data.len() as u64 }
    }
}

fn read_slice(blob: &[u8], r: &TensorRef, what: &str) -> Result<Vec<f32>> {
    let start = r.byte_offset as usize;
    let len = r.elements as usize * 4;
    let end = start.checked_add(len).filter(|&e| e <= blob.len()).ok_or_else(|| {
        Error::Validation(format!(
            "{what}: tensor ref {}+{} exceeds blob of {} bytes",
            r.byte_offset,
            len,
            blob.len()
        ))
    })?;
    Ok(blob[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

impl NetworkGraph<f32> {
    /// Writes `manifest.json` and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = BlobWriter { bytes: Vec::new() };
        let nodes = self
            .nodes
            .iter()
            .map(|node| NodeManifest {
                name: node.name.clone(),
                inputs: node.inputs.clone(),
                op: match &node.op {
                    LayerOp::Input => OpManifest::Input,
                    LayerOp::Conv { kernel, bias, spec } => {
                        let k = kernel.shape();
                        OpManifest::Conv {
                            out_c: k.out_c,
                            in_c: k.in_c,
                            kh: k.kh,
                            kw: k.kw,
                            stride: spec.stride,
                            dilation: spec.dilation,
                            padding: spec.padding,
                            grouping: spec.groups,
                            kernel: blob.push(kernel.data()),
                            bias: bias.as_ref().map(|b| blob.push(b.data())),
                        }
                    }
                    LayerOp::BatchNorm { state } => OpManifest::BatchNorm {
                        channels: state.channels(),
                        epsilon: state.epsilon,
                        momentum: state.momentum,
                        gamma: blob.push(state.gamma.data()),
                        beta: blob.push(state.beta.data()),
                        running_mean: blob.push(&state.running_mean),
                        running_var: blob.push(&state.running_var),
                    },
                    LayerOp::Relu6 => OpManifest::Relu6,
                    LayerOp::Relu => OpManifest::Relu,
                    LayerOp::AdaptiveAvgPool { target } => {
                        OpManifest::AdaptiveAvgPool { target: *target }
                    }
                    LayerOp::ResizeLike { reference } => {
                        OpManifest::ResizeLike { reference: *reference }
                    }
                    LayerOp::Add => OpManifest::Add,
                    LayerOp::Concat => OpManifest::Concat,
                },
            })
            .collect();

        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            declared_input: self.declared_input,
            num_classes: self.num_classes,
            arrangement: self.arrangement.clone(),
            taps: self.taps.clone(),
            rows: self.rows.clone(),
            weights_bytes: blob.bytes.len() as u64,
            nodes,
        };
        fs::write(dir.join(WEIGHTS_FILE), &blob.bytes)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Reads a graph previously written by [`Self::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let blob = fs::read(dir.join(WEIGHTS_FILE))?;
        if blob.len() as u64 != manifest.weights_bytes {
            return Err(Error::Validation(format!(
                "weights blob is {} bytes, manifest expects {}",
                blob.len(),
                manifest.weights_bytes
            )));
        }

        let mut nodes = Vec::with_capacity(manifest.nodes.len());
        for nm in &manifest.nodes {
            let op = match &nm.op {
                OpManifest::Input => LayerOp::Input,
                OpManifest::Conv {
                    out_c,
                    in_c,
                    kh,
                    kw,
                    stride,
                    dilation,
                    padding,
                    grouping,
                    kernel,
                    bias,
                } => {
                    let kshape = KernelShape::new(*out_c, *in_c, *kh, *kw);
                    let kdata = read_slice(&blob, kernel, &nm.name)?;
                    let kernel = KernelTensor::from_vec(kshape, kdata)?;
                    let bias = bias
                        .as_ref()
                        .map(|b| -> Result<Tensor<f32>> {
                            Tensor::from_vec(
                                Shape::new(1, *out_c, 1, 1),
                                read_slice(&blob, b, &nm.name)?,
                            )
                        })
                        .transpose()?;
                    let spec = ConvSpec::new(*stride, *dilation, *padding, *grouping)?;
                    LayerOp::Conv { kernel, bias, spec }
                }
                OpManifest::BatchNorm {
                    channels,
                    epsilon,
                    momentum,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let vec_shape = Shape::new(1, *channels, 1, 1);
                    LayerOp::BatchNorm {
                        state: BatchNormState {
                            gamma: Tensor::from_vec(vec_shape, read_slice(&blob, gamma, &nm.name)?)?,
                            beta: Tensor::from_vec(vec_shape, read_slice(&blob, beta, &nm.name)?)?,
                            running_mean: read_slice(&blob, running_mean, &nm.name)?,
                            running_var: read_slice(&blob, running_var, &nm.name)?,
                            epsilon: *epsilon,
                            momentum: *momentum,
                            mode: Mode::Infer,
                        },
                    }
                }
                OpManifest::Relu6 => LayerOp::Relu6,
                OpManifest::Relu => LayerOp::Relu,
                OpManifest::AdaptiveAvgPool { target } => {
                    LayerOp::AdaptiveAvgPool { target: *target }
                }
                OpManifest::ResizeLike { reference } => {
                    LayerOp::ResizeLike { reference: *reference }
                }
                OpManifest::Add => LayerOp::Add,
                OpManifest::Concat => LayerOp::Concat,
            };
            nodes.push(Node { name: nm.name.clone(), inputs: nm.inputs.clone(), op });
        }

        let graph = NetworkGraph {
            nodes,
            taps: manifest.taps,
            rows: manifest.rows,
            declared_input: manifest.declared_input,
            num_classes: manifest.num_classes,
            arrangement: manifest.arrangement,
        };
        graph.infer_shapes(graph.declared_input)?;
        Ok(graph)
    }
}
