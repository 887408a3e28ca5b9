//! Network description: layer descriptors, the validated graph with shape
//! inference, the text manifest format, binary weight storage, and builders
//! for the reference topologies.

mod manifest;
mod topology;
mod weights;

pub use manifest::{load_manifest, save_manifest};
pub use topology::{build_reference_topology, weighted_depth, NetName, Scale};
pub use weights::{LayerWeights, WeightStore};

use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::layers::{ConvParams, LrnParams, PoolParams};
use crate::tensor::Shape3;

/// What a layer computes, with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// The network entry point; exactly one per graph.
    Input,
    Conv {
        out_channels: usize,
        params: ConvParams,
    },
    MaxPool(PoolParams),
    Lrn(LrnParams),
    Relu,
    Fc {
        out_features: usize,
    },
    Softmax,
    EltwiseAdd,
    Concat,
}

impl LayerKind {
    /// Stable lowercase tag used in manifests and reports.
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::Lrn(_) => "lrn",
            LayerKind::Relu => "relu",
            LayerKind::Fc { .. } => "fc",
            LayerKind::Softmax => "softmax",
            LayerKind::EltwiseAdd => "eltwise_add",
            LayerKind::Concat => "concat",
        }
    }

    /// Conv and FC layers carry weights; everything else does not.
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }
}

/// One layer of the network: a unique name, its kind, and the names of the
/// layers feeding it.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDescriptor {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
}

/// A validated, acyclic network with one input layer, every layer reachable
/// from it, and a concrete output shape inferred for each layer.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    layers: Vec<LayerDescriptor>,
    input_shape: Shape3,
    index: HashMap<String, usize>,
    topo: Vec<usize>,
    shapes: Vec<Shape3>,
    consumers: Vec<Vec<usize>>,
}

impl NetworkGraph {
    pub fn new(input_shape: Shape3, layers: Vec<LayerDescriptor>) -> Result<Self> {
        let mut index = HashMap::with_capacity(layers.len());
        let mut input_idx = None;
        for (i, layer) in layers.iter().enumerate() {
            if !valid_name(&layer.name) {
                return Err(Error::Graph(format!(
                    "layer name `{}` is empty or contains characters outside [A-Za-z0-9_.-]",
                    layer.name
                )));
            }
            if index.insert(layer.name.clone(), i).is_some() {
                return Err(Error::Graph(format!(
                    "duplicate layer name `{}`",
                    layer.name
                )));
            }
            match layer.kind {
                LayerKind::Input => {
                    if !layer.inputs.is_empty() {
                        return Err(Error::Graph(format!(
                            "input layer `{}` must not have inputs",
                            layer.name
                        )));
                    }
                    if input_idx.replace(i).is_some() {
                        return Err(Error::Graph(format!(
                            "second input layer `{}`; a network has exactly one",
                            layer.name
                        )));
                    }
                }
                _ => {
                    if layer.inputs.is_empty() {
                        return Err(Error::Graph(format!(
                            "layer `{}` has no inputs",
                            layer.name
                        )));
                    }
                }
            }
            let arity_ok = match layer.kind {
                LayerKind::Input => true,
                LayerKind::EltwiseAdd => layer.inputs.len() == 2,
                LayerKind::Concat => !layer.inputs.is_empty(),
                _ => layer.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Graph(format!(
                    "layer `{}` of kind {} takes {} input(s), got {}",
                    layer.name,
                    layer.kind.tag(),
                    if matches!(layer.kind, LayerKind::EltwiseAdd) {
                        "2"
                    } else {
                        "1"
                    },
                    layer.inputs.len()
                )));
            }
        }
        let input_idx =
            input_idx.ok_or_else(|| Error::Graph("network has no input layer".into()))?;

        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); layers.len()];
        for (i, layer) in layers.iter().enumerate() {
            for src in &layer.inputs {
                let &j = index.get(src).ok_or_else(|| {
                    Error::Graph(format!(
                        "layer `{}` references undefined input `{}`",
                        layer.name, src
                    ))
                })?;
                consumers[j].push(i);
            }
        }

        // Kahn in declaration order keeps the topological order deterministic.
        let mut indegree: Vec<usize> = layers.iter().map(|l| l.inputs.len()).collect();
        let mut queue: VecDeque<usize> = (0..layers.len()).filter(|&i| indegree[i] == 0).collect();
        let mut topo = Vec::with_capacity(layers.len());
        while let Some(i) = queue.pop_front() {
            topo.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if topo.len() != layers.len() {
            let stuck: Vec<&str> = (0..layers.len())
                .filter(|&i| indegree[i] > 0)
                .map(|i| layers[i].name.as_str())
                .collect();
            return Err(Error::Graph(format!(
                "network contains a cycle through: {}",
                stuck.join(", ")
            )));
        }

        // Reachability from the input layer.
        let mut reachable = vec![false; layers.len()];
        let mut stack = vec![input_idx];
        while let Some(i) = stack.pop() {
            if !reachable[i] {
                reachable[i] = true;
                stack.extend(consumers[i].iter().copied());
            }
        }
        if let Some(i) = (0..layers.len()).find(|&i| !reachable[i]) {
            return Err(Error::Graph(format!(
                "layer `{}` is not reachable from the input",
                layers[i].name
            )));
        }

        let shapes = infer_shapes(&layers, &index, &topo, input_shape)?;
        Ok(NetworkGraph {
            layers,
            input_shape,
            index,
            topo,
            shapes,
            consumers,
        })
    }

    /// Layers in declaration order.
    pub fn layers(&self) -> &[LayerDescriptor] {
        &self.layers
    }

    /// Layer indices in a deterministic topological order.
    pub fn topo_order(&self) -> impl Iterator<Item = &LayerDescriptor> {
        self.topo.iter().map(|&i| &self.layers[i])
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    pub fn layer(&self, name: &str) -> Option<&LayerDescriptor> {
        self.index.get(name).map(|&i| &self.layers[i])
    }

    /// Inferred output shape of a layer.
    pub fn output_shape(&self, name: &str) -> Option<Shape3> {
        self.index.get(name).map(|&i| self.shapes[i])
    }

    /// Names of the layers consuming `name`'s output.
    pub fn consumers(&self, name: &str) -> Vec<&str> {
        match self.index.get(name) {
            Some(&i) => self.consumers[i]
                .iter()
                .map(|&c| self.layers[c].name.as_str())
                .collect(),
            None => Vec::new(),
        }
    }

    /// The input layer.
    pub fn input_layer(&self) -> &LayerDescriptor {
        self.layers
            .iter()
            .find(|l| matches!(l.kind, LayerKind::Input))
            .expect("validated graph has an input layer")
    }

    /// The network output: the last layer in topological order.
    pub fn output_layer(&self) -> &LayerDescriptor {
        &self.layers[*self.topo.last().expect("graph is non-empty")]
    }

    /// Shapes of the tensors feeding `name`, in input order.
    pub fn input_shapes(&self, name: &str) -> Vec<Shape3> {
        self.layer(name)
            .map(|l| {
                l.inputs
                    .iter()
                    .map(|src| self.output_shape(src).expect("validated input"))
                    .collect()
            })
            .unwrap_or_default()
    }
}

fn infer_shapes(
    layers: &[LayerDescriptor],
    index: &HashMap<String, usize>,
    topo: &[usize],
    input_shape: Shape3,
) -> Result<Vec<Shape3>> {
    let mut shapes = vec![input_shape; layers.len()];
    for &i in topo {
        let layer = &layers[i];
        let in_shapes: Vec<Shape3> = layer.inputs.iter().map(|src| shapes[index[src]]).collect();
        let named = |e: Error| match e {
            Error::Shape(msg) => Error::Shape(format!("layer `{}`: {}", layer.name, msg)),
            other => other,
        };
        shapes[i] = match &layer.kind {
            LayerKind::Input => input_shape,
            LayerKind::Conv {
                out_channels,
                params,
            } => {
                let (h, w) = params.output_dims(in_shapes[0]).map_err(named)?;
                Shape3::new(*out_channels, h, w).map_err(named)?
            }
            LayerKind::MaxPool(p) => {
                let (h, w) = p.output_dims(in_shapes[0]).map_err(named)?;
                Shape3::new(in_shapes[0].channels, h, w).map_err(named)?
            }
            LayerKind::Lrn(_) | LayerKind::Relu | LayerKind::Softmax => in_shapes[0],
            LayerKind::Fc { out_features } => Shape3::new(*out_features, 1, 1).map_err(named)?,
            LayerKind::EltwiseAdd => {
                if in_shapes[0] != in_shapes[1] {
                    return Err(Error::Shape(format!(
                        "layer `{}`: eltwise inputs have shapes {} and {}",
                        layer.name, in_shapes[0], in_shapes[1]
                    )));
                }
                in_shapes[0]
            }
            LayerKind::Concat => {
                let (h, w) = (in_shapes[0].height, in_shapes[0].width);
                let mut channels = 0usize;
                for s in &in_shapes {
                    if s.height != h || s.width != w {
                        return Err(Error::Shape(format!(
                            "layer `{}`: concat input shape {} does not match {}x{}",
                            layer.name, s, h, w
                        )));
                    }
                    channels += s.channels;
                }
                Shape3::new(channels, h, w).map_err(named)?
            }
        };
    }
    Ok(shapes)
}
