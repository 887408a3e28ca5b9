//! Segment planning: greedy fusion of `Conv [-> ReLU] [-> LRN] [-> Pool]`
//! runs along linear chains. Branches (elementwise/concat joins, multiple
//! consumers) terminate a segment and force the tensor to materialize in
//! global memory; every other layer kind runs as a segment of its own.

use std::collections::HashSet;

use crate::layers::{ConvParams, LrnParams, PoolParams};
use crate::model::{LayerDescriptor, LayerKind, NetworkGraph};
use crate::tensor::Shape3;

/// Explicit 3-D iteration space `(channels, rows, cols)` walked by a
/// transfer stage. For convolution segments the channel axis of the inbound
/// space is the flattened window length `C*K*K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferSpace {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

/// The operation assigned to the compute worker of a segment.
#[derive(Debug, Clone, PartialEq)]
pub enum ComputeStage {
    /// Flattened convolution, optionally with the following ReLU fused in.
    Conv {
        layer: String,
        out_channels: usize,
        params: ConvParams,
        fuse_relu: bool,
    },
    Fc {
        layer: String,
        out_features: usize,
    },
    Relu,
    Softmax,
    EltwiseAdd,
    Concat,
    /// The segment's work happens entirely in the aux stage (standalone
    /// pooling or LRN); compute forwards tiles unchanged.
    Forward,
}

/// An operation assigned to the aux worker, applied in order.
#[derive(Debug, Clone, PartialEq)]
pub enum AuxStage {
    Lrn(LrnParams),
    Pool(PoolParams),
}

/// One pipeline pass: which layers run, what each stage does, and the
/// iteration spaces of the two transfer stages.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    /// The layers this segment executes, in order.
    pub layer_names: Vec<String>,
    /// Upstream producer names, in the order the first layer declares them.
    pub inputs: Vec<String>,
    pub input_shapes: Vec<Shape3>,
    /// Name of the materialized output (the segment's last layer).
    pub output: String,
    pub output_shape: Shape3,
    pub compute: ComputeStage,
    /// Shape of the stream leaving the compute stage, before aux ops.
    pub compute_shape: Shape3,
    pub aux: Vec<AuxStage>,
    pub data_in: TransferSpace,
    pub data_out: TransferSpace,
}

/// Plans the fused segments of a validated graph, in topological order.
pub fn plan_segments(graph: &NetworkGraph) -> Vec<StagePlan> {
    let mut consumed: HashSet<&str> = HashSet::new();
    let mut plans = Vec::new();
    for layer in graph.topo_order() {
        if matches!(layer.kind, LayerKind::Input) || consumed.contains(layer.name.as_str()) {
            continue;
        }
        let run = fuse_run(graph, layer);
        for l in &run {
            consumed.insert(l.name.as_str());
        }
        plans.push(build_plan(graph, &run));
    }
    plans
}

/// Plans every layer as its own segment; the baseline where all interlayer
/// tensors round-trip through global memory.
pub fn plan_unfused(graph: &NetworkGraph) -> Vec<StagePlan> {
    graph
        .topo_order()
        .filter(|l| !matches!(l.kind, LayerKind::Input))
        .map(|l| build_plan(graph, &[l]))
        .collect()
}

/// Greedy fusion from a head layer. Only convolutions start multi-layer
/// runs; the optional tail is ReLU, then LRN, then pooling, each taken at
/// most once and only while the chain stays linear (single consumer).
fn fuse_run<'g>(graph: &'g NetworkGraph, head: &'g LayerDescriptor) -> Vec<&'g LayerDescriptor> {
    let mut run = vec![head];
    if !matches!(head.kind, LayerKind::Conv { .. }) {
        return run;
    }
    let mut min_rank = 0u8; // 0 = relu, 1 = lrn, 2 = pool
    let mut cur = head;
    while min_rank <= 2 {
        let consumers = graph.consumers(&cur.name);
        if consumers.len() != 1 {
            break;
        }
        let next = graph.layer(consumers[0]).expect("consumer exists");
        let rank = match next.kind {
            LayerKind::Relu => 0u8,
            LayerKind::Lrn(_) => 1,
            LayerKind::MaxPool(_) => 2,
            _ => break,
        };
        if rank < min_rank {
            break;
        }
        run.push(next);
        min_rank = rank + 1;
        cur = next;
    }
    run
}

fn build_plan(graph: &NetworkGraph, run: &[&LayerDescriptor]) -> StagePlan {
    let head = run[0];
    let inputs = head.inputs.clone();
    let input_shapes = graph.input_shapes(&head.name);
    let last = run.last().expect("runs are non-empty");
    let output_shape = graph.output_shape(&last.name).expect("validated layer");

    let (compute, compute_shape, aux) = match &head.kind {
        LayerKind::Conv {
            out_channels,
            params,
        } => {
            let fuse_relu = run
                .get(1)
                .is_some_and(|l| matches!(l.kind, LayerKind::Relu));
            let conv_shape = graph.output_shape(&head.name).expect("validated layer");
            let aux: Vec<AuxStage> = run[1..]
                .iter()
                .filter_map(|l| match &l.kind {
                    LayerKind::Lrn(p) => Some(AuxStage::Lrn(*p)),
                    LayerKind::MaxPool(p) => Some(AuxStage::Pool(*p)),
                    _ => None,
                })
                .collect();
            (
                ComputeStage::Conv {
                    layer: head.name.clone(),
                    out_channels: *out_channels,
                    params: *params,
                    fuse_relu,
                },
                conv_shape,
                aux,
            )
        }
        LayerKind::MaxPool(p) => (
            ComputeStage::Forward,
            input_shapes[0],
            vec![AuxStage::Pool(*p)],
        ),
        LayerKind::Lrn(p) => (
            ComputeStage::Forward,
            input_shapes[0],
            vec![AuxStage::Lrn(*p)],
        ),
        LayerKind::Relu => (ComputeStage::Relu, output_shape, vec![]),
        LayerKind::Fc { out_features } => (
            ComputeStage::Fc {
                layer: head.name.clone(),
                out_features: *out_features,
            },
            output_shape,
            vec![],
        ),
        LayerKind::Softmax => (ComputeStage::Softmax, output_shape, vec![]),
        LayerKind::EltwiseAdd => (ComputeStage::EltwiseAdd, output_shape, vec![]),
        LayerKind::Concat => (ComputeStage::Concat, output_shape, vec![]),
        LayerKind::Input => unreachable!("input layers are never planned"),
    };

    let data_in = match &compute {
        ComputeStage::Conv { params, .. } => TransferSpace {
            channels: input_shapes[0].channels * params.kernel * params.kernel,
            rows: compute_shape.height,
            cols: compute_shape.width,
        },
        ComputeStage::Fc { .. } | ComputeStage::Softmax => TransferSpace {
            channels: input_shapes[0].elements(),
            rows: 1,
            cols: 1,
        },
        _ => TransferSpace {
            channels: input_shapes.iter().map(|s| s.channels).sum(),
            rows: input_shapes[0].height,
            cols: input_shapes[0].width,
        },
    };
    let data_out = TransferSpace {
        channels: output_shape.channels,
        rows: output_shape.height,
        cols: output_shape.width,
    };

    StagePlan {
        layer_names: run.iter().map(|l| l.name.clone()).collect(),
        inputs,
        input_shapes,
        output: last.name.clone(),
        output_shape,
        compute,
        compute_shape,
        aux,
        data_in,
        data_out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_manifest;

    #[test]
    fn conv_relu_pool_fuses_into_one_segment() {
        let g = load_manifest(
            "[network]\ninput = 2,8,8\n\n\
             [layer]\nname = c\nkind = conv\ninputs = input\nout = 4\nk = 3\npad = 1\n\n\
             [layer]\nname = r\nkind = relu\ninputs = c\n\n\
             [layer]\nname = p\nkind = maxpool\ninputs = r\nwindow = 2\nstride = 2\n",
        )
        .unwrap();
        let plans = plan_segments(&g);
        assert_eq!(plans.len(), 1);
        assert_eq!(plans[0].layer_names, vec!["c", "r", "p"]);
        assert!(matches!(
            plans[0].compute,
            ComputeStage::Conv {
                fuse_relu: true,
                ..
            }
        ));
        assert_eq!(plans[0].aux.len(), 1);
    }

    #[test]
    fn full_cascade_fuses_relu_lrn_pool() {
        let g = load_manifest(
            "[network]\ninput = 2,8,8\n\n\
             [layer]\nname = c\nkind = conv\ninputs = input\nout = 4\nk = 3\npad = 1\n\n\
             [layer]\nname = r\nkind = relu\ninputs = c\n\n\
             [layer]\nname = n\nkind = lrn\ninputs = r\n\n\
             [layer]\nname = p\nkind = maxpool\ninputs = n\nwindow = 2\nstride = 2\n",
        )
        .unwrap();
        let plans = plan_segments(&g);
        assert_eq!(plans.len(), 1);
        assert_eq!(plans[0].aux.len(), 2);
        assert!(matches!(plans[0].aux[0], AuxStage::Lrn(_)));
        assert!(matches!(plans[0].aux[1], AuxStage::Pool(_)));
    }

    #[test]
    fn branch_terminates_segment() {
        // conv feeds an eltwise join; the join reads both operands from
        // global memory.
        let g = load_manifest(
            "[network]\ninput = 2,4,4\n\n\
             [layer]\nname = c1\nkind = conv\ninputs = input\nout = 2\nk = 1\n\n\
             [layer]\nname = c2\nkind = conv\ninputs = input\nout = 2\nk = 1\n\n\
             [layer]\nname = add\nkind = eltwise_add\ninputs = c1, c2\n",
        )
        .unwrap();
        let plans = plan_segments(&g);
        assert_eq!(plans.len(), 3);
        assert_eq!(plans[2].layer_names, vec!["add"]);
        assert_eq!(plans[2].inputs, vec!["c1", "c2"]);
    }

    #[test]
    fn multi_consumer_conv_stays_alone() {
        let g = load_manifest(
            "[network]\ninput = 2,4,4\n\n\
             [layer]\nname = c\nkind = conv\ninputs = input\nout = 2\nk = 1\n\n\
             [layer]\nname = r\nkind = relu\ninputs = c\n\n\
             [layer]\nname = cat\nkind = concat\ninputs = c, r\n",
        )
        .unwrap();
        let plans = plan_segments(&g);
        // c has two consumers, so [c], [r], [cat].
        assert_eq!(plans.len(), 3);
        assert_eq!(plans[0].layer_names, vec!["c"]);
    }

    #[test]
    fn fc_only_network_has_singleton_segments() {
        let g = load_manifest(
            "[network]\ninput = 4,1,1\n\n\
             [layer]\nname = f1\nkind = fc\ninputs = input\nout = 8\n\n\
             [layer]\nname = f2\nkind = fc\ninputs = f1\nout = 2\n",
        )
        .unwrap();
        let plans = plan_segments(&g);
        assert_eq!(plans.len(), 2);
        assert!(plans.iter().all(|p| p.layer_names.len() == 1));
    }

    #[test]
    fn pool_then_lrn_does_not_fuse_out_of_order() {
        let g = load_manifest(
            "[network]\ninput = 2,8,8\n\n\
             [layer]\nname = c\nkind = conv\ninputs = input\nout = 4\nk = 3\npad = 1\n\n\
             [layer]\nname = p\nkind = maxpool\ninputs = c\nwindow = 2\nstride = 2\n\n\
             [layer]\nname = n\nkind = lrn\ninputs = p\n",
        )
        .unwrap();
        let plans = plan_segments(&g);
        assert_eq!(plans.len(), 2);
        assert_eq!(plans[0].layer_names, vec!["c", "p"]);
        assert_eq!(plans[1].layer_names, vec!["n"]);
    }

    #[test]
    fn unfused_plan_is_one_segment_per_layer() {
        let g = load_manifest(
            "[network]\ninput = 2,8,8\n\n\
             [layer]\nname = c\nkind = conv\ninputs = input\nout = 4\nk = 3\npad = 1\n\n\
             [layer]\nname = r\nkind = relu\ninputs = c\n\n\
             [layer]\nname = p\nkind = maxpool\ninputs = r\nwindow = 2\nstride = 2\n",
        )
        .unwrap();
        let plans = plan_unfused(&g);
        assert_eq!(plans.len(), 3);
        assert!(plans.iter().all(|p| p.layer_names.len() == 1));
    }

    #[test]
    fn conv_data_in_space_is_flattened_window() {
        let g = load_manifest(
            "[network]\ninput = 3,8,8\n\n\
             [layer]\nname = c\nkind = conv\ninputs = input\nout = 4\nk = 3\npad = 1\n",
        )
        .unwrap();
        let plans = plan_segments(&g);
        assert_eq!(
            plans[0].data_in,
            TransferSpace {
                channels: 27,
                rows: 8,
                cols: 8
            }
        );
        assert_eq!(
            plans[0].data_out,
            TransferSpace {
                channels: 4,
                rows: 8,
                cols: 8
            }
        );
    }
}
