//! Unpipelined sequential executor: the correctness oracle the pipeline is
//! checked against. Convolutions run through the direct triple-sum kernel;
//! everything executes one layer at a time in topological order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::{self, Accum};
use crate::model::{LayerKind, NetworkGraph, WeightStore};
use crate::tensor::{Shape3, Tensor};

/// Runs the network layer by layer with sequential accumulation and no
/// concurrency, returning the output tensor.
pub fn run_reference(graph: &NetworkGraph, input: &Tensor, store: &WeightStore) -> Result<Tensor> {
    if input.shape() != graph.input_shape() {
        return Err(Error::Shape(format!(
            "edge `input`: tensor has shape {}, network expects {}",
            input.shape(),
            graph.input_shape()
        )));
    }
    store.validate(graph)?;

    let mut values: HashMap<&str, Tensor> = HashMap::new();
    for layer in graph.topo_order() {
        let out = match &layer.kind {
            LayerKind::Input => input.clone(),
            _ => {
                let ins: Vec<&Tensor> = layer.inputs.iter().map(|n| &values[n.as_str()]).collect();
                apply_layer(layer.name.as_str(), &layer.kind, &ins, store)?
            }
        };
        values.insert(layer.name.as_str(), out);
    }
    let output = graph.output_layer().name.as_str();
    Ok(values.remove(output).expect("output layer was executed"))
}

/// Applies a single layer to already-computed inputs.
pub(crate) fn apply_layer(
    name: &str,
    kind: &LayerKind,
    inputs: &[&Tensor],
    store: &WeightStore,
) -> Result<Tensor> {
    match kind {
        LayerKind::Input => Err(Error::Graph("input layers are not applied".into())),
        LayerKind::Conv { params, .. } => {
            layers::conv2d_direct(inputs[0], store.conv(name)?, params)
        }
        LayerKind::MaxPool(p) => layers::maxpool(inputs[0], p),
        LayerKind::Lrn(p) => layers::lrn(inputs[0], p),
        LayerKind::Relu => Ok(layers::relu(inputs[0])),
        LayerKind::Fc { out_features } => {
            let out = layers::fc(inputs[0].data(), store.fc(name)?)?;
            Tensor::new(Shape3::new(*out_features, 1, 1)?, out)
        }
        LayerKind::Softmax => {
            let out = layers::softmax(inputs[0].data());
            Tensor::new(inputs[0].shape(), out)
        }
        LayerKind::EltwiseAdd => layers::eltwise_add(inputs[0], inputs[1]),
        LayerKind::Concat => layers::concat(inputs),
    }
}

/// Maximum absolute difference and that difference scaled by the reference's
/// largest magnitude. The relative figure is what run verification is judged
/// on: sequential mode must hit exactly zero, tree mode stays within 1e-5.
pub fn compare(reference: &Tensor, candidate: &Tensor) -> Result<(f32, f32)> {
    if reference.shape() != candidate.shape() {
        return Err(Error::Shape(format!(
            "cannot compare tensors of shapes {} and {}",
            reference.shape(),
            candidate.shape()
        )));
    }
    let max_abs = reference
        .data()
        .iter()
        .zip(candidate.data())
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    let scale = reference
        .data()
        .iter()
        .fold(0.0f32, |m, v| m.max(v.abs()))
        .max(1e-30);
    Ok((max_abs, max_abs / scale))
}

/// Tolerance for a given accumulation mode when judging pipeline output
/// against the reference executor.
pub fn mode_tolerance(accum: Accum) -> f32 {
    match accum {
        Accum::Sequential => 0.0,
        Accum::Tree => 1e-5,
    }
}
