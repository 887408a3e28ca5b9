//! Analytical cost model: per-layer MAC/parameter counts, parameter and
//! operation distribution across layer kinds, DSP-based resource estimates
//! under a lane configuration, and global-memory traffic projections that
//! must agree byte-for-byte with the measured pipeline ledger.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{LayerDescriptor, LayerKind, NetworkGraph};
use crate::pipeline::{plan_segments, plan_unfused, StagePlan};
use crate::tensor::Shape3;

/// Cost of one layer. `flops = 2*macs` for conv and fc (one multiply plus
/// one add per MAC); the lightweight layers have no MACs and report rough
/// per-element operation counts under `other_ops` instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerCost {
    pub macs: u64,
    pub flops: u64,
    pub other_ops: u64,
    pub params: u64,
    pub in_bytes: u64,
    pub out_bytes: u64,
}

impl LayerCost {
    fn add(&self, rhs: &LayerCost) -> LayerCost {
        LayerCost {
            macs: self.macs + rhs.macs,
            flops: self.flops + rhs.flops,
            other_ops: self.other_ops + rhs.other_ops,
            params: self.params + rhs.params,
            in_bytes: self.in_bytes + rhs.in_bytes,
            out_bytes: self.out_bytes + rhs.out_bytes,
        }
    }
}

/// Computes the cost of a single layer from its input shapes.
pub fn layer_cost(layer: &LayerDescriptor, in_shapes: &[Shape3]) -> Result<LayerCost> {
    let in_bytes: u64 = in_shapes.iter().map(Shape3::bytes).sum();
    let first = in_shapes.first().copied();
    let need_input = || {
        first.ok_or_else(|| {
            Error::Shape(format!(
                "layer `{}` has no resolvable input shape",
                layer.name
            ))
        })
    };
    let cost = match &layer.kind {
        LayerKind::Input => LayerCost {
            out_bytes: need_input()?.bytes(),
            ..LayerCost::default()
        },
        LayerKind::Conv {
            out_channels,
            params,
        } => {
            let input = need_input()?;
            let (h_out, w_out) = params.output_dims(input)?;
            let k2 = (params.kernel * params.kernel) as u64;
            let macs = *out_channels as u64 * input.channels as u64 * k2 * (h_out * w_out) as u64;
            let weights = *out_channels as u64 * input.channels as u64 * k2;
            LayerCost {
                macs,
                flops: 2 * macs,
                other_ops: 0,
                params: weights + *out_channels as u64,
                in_bytes,
                out_bytes: Shape3::new(*out_channels, h_out, w_out)?.bytes(),
            }
        }
        LayerKind::Fc { out_features } => {
            let input = need_input()?;
            let macs = *out_features as u64 * input.elements() as u64;
            LayerCost {
                macs,
                flops: 2 * macs,
                other_ops: 0,
                params: macs + *out_features as u64,
                in_bytes,
                out_bytes: Shape3::new(*out_features, 1, 1)?.bytes(),
            }
        }
        LayerKind::MaxPool(p) => {
            let input = need_input()?;
            let (h_out, w_out) = p.output_dims(input)?;
            let out_elems = (input.channels * h_out * w_out) as u64;
            LayerCost {
                // window*window compares per output element
                other_ops: out_elems * (p.window * p.window) as u64,
                in_bytes,
                out_bytes: Shape3::new(input.channels, h_out, w_out)?.bytes(),
                ..LayerCost::default()
            }
        }
        LayerKind::Lrn(p) => {
            let input = need_input()?;
            let out_elems = input.elements() as u64;
            LayerCost {
                // squares and adds across the window, plus scale/pow/divide
                other_ops: out_elems * (2 * p.local_size as u64 + 3),
                in_bytes,
                out_bytes: input.bytes(),
                ..LayerCost::default()
            }
        }
        LayerKind::Relu => {
            let input = need_input()?;
            LayerCost {
                other_ops: input.elements() as u64,
                in_bytes,
                out_bytes: input.bytes(),
                ..LayerCost::default()
            }
        }
        LayerKind::Softmax => {
            let input = need_input()?;
            LayerCost {
                other_ops: 4 * input.elements() as u64,
                in_bytes,
                out_bytes: input.bytes(),
                ..LayerCost::default()
            }
        }
        LayerKind::EltwiseAdd => {
            let input = need_input()?;
            LayerCost {
                other_ops: input.elements() as u64,
                in_bytes,
                out_bytes: input.bytes(),
                ..LayerCost::default()
            }
        }
        LayerKind::Concat => {
            let out_channels: usize = in_shapes.iter().map(|s| s.channels).sum();
            let input = need_input()?;
            LayerCost {
                in_bytes,
                out_bytes: Shape3::new(out_channels, input.height, input.width)?.bytes(),
                ..LayerCost::default()
            }
        }
    };
    Ok(cost)
}

/// Per-layer costs in declaration order.
pub fn graph_costs(graph: &NetworkGraph) -> Vec<(String, &'static str, LayerCost)> {
    graph
        .layers()
        .iter()
        .map(|layer| {
            let shapes = if matches!(layer.kind, LayerKind::Input) {
                vec![graph.input_shape()]
            } else {
                graph.input_shapes(&layer.name)
            };
            let cost = layer_cost(layer, &shapes).expect("validated graph shapes resolve");
            (layer.name.clone(), layer.kind.tag(), cost)
        })
        .collect()
}

/// Sum of all layer costs.
pub fn total_cost(graph: &NetworkGraph) -> LayerCost {
    graph_costs(graph)
        .iter()
        .fold(LayerCost::default(), |acc, (_, _, c)| acc.add(c))
}

/// Shares of parameters and operations by layer class. Operation shares use
/// FLOPs for conv/fc and the per-element op counts for everything else.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distribution {
    pub conv_params_share: f64,
    pub fc_params_share: f64,
    pub other_params_share: f64,
    pub conv_ops_share: f64,
    pub fc_ops_share: f64,
    pub other_ops_share: f64,
}

impl Distribution {
    pub fn conv_fc_params_share(&self) -> f64 {
        self.conv_params_share + self.fc_params_share
    }

    pub fn conv_fc_ops_share(&self) -> f64 {
        self.conv_ops_share + self.fc_ops_share
    }
}

/// Splits parameters and operations across CONV, FC, and everything else.
/// Shares sum to 1 whenever the graph has any parameters/operations at all.
pub fn distribution_report(graph: &NetworkGraph) -> Distribution {
    let mut conv_params = 0u64;
    let mut fc_params = 0u64;
    let mut other_params = 0u64;
    let mut conv_ops = 0u64;
    let mut fc_ops = 0u64;
    let mut other_ops = 0u64;
    for layer in graph.layers() {
        let shapes = if matches!(layer.kind, LayerKind::Input) {
            vec![graph.input_shape()]
        } else {
            graph.input_shapes(&layer.name)
        };
        let cost = layer_cost(layer, &shapes).expect("validated graph shapes resolve");
        match layer.kind {
            LayerKind::Conv { .. } => {
                conv_params += cost.params;
                conv_ops += cost.flops;
            }
            LayerKind::Fc { .. } => {
                fc_params += cost.params;
                fc_ops += cost.flops;
            }
            _ => {
                other_params += cost.params;
                other_ops += cost.other_ops;
            }
        }
    }
    let params_total = (conv_params + fc_params + other_params).max(1) as f64;
    let ops_total = (conv_ops + fc_ops + other_ops).max(1) as f64;
    Distribution {
        conv_params_share: conv_params as f64 / params_total,
        fc_params_share: fc_params as f64 / params_total,
        other_params_share: other_params as f64 / params_total,
        conv_ops_share: conv_ops as f64 / ops_total,
        fc_ops_share: fc_ops as f64 / ops_total,
        other_ops_share: other_ops as f64 / ops_total,
    }
}

/// Target device with its DSP budget and modelled per-MAC cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Device {
    Arria10,
    Stratix10,
}

impl std::str::FromStr for Device {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arria10" => Ok(Device::Arria10),
            "stratix10" => Ok(Device::Stratix10),
            other => Err(Error::Capacity(format!(
                "unknown device `{other}`; known devices: arria10, stratix10"
            ))),
        }
    }
}

/// Device table entry. `dsp_per_mac` defaults to 1, modelling one hardened
/// floating-point DSP doing a fused multiply-add per cycle; `clock_ghz` is a
/// knob with a conservative kernel-clock default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceModel {
    pub name: &'static str,
    pub dsp_total: u32,
    pub logic_elements_k: u32,
    pub m20k_mb: u32,
    pub dsp_per_mac: u32,
    pub clock_ghz: f64,
}

impl Device {
    pub fn model(self) -> DeviceModel {
        match self {
            Device::Arria10 => DeviceModel {
                name: "arria10",
                dsp_total: 1687,
                logic_elements_k: 660,
                m20k_mb: 42,
                dsp_per_mac: 1,
                clock_ghz: 0.2,
            },
            Device::Stratix10 => DeviceModel {
                name: "stratix10",
                dsp_total: 5760,
                logic_elements_k: 2753,
                m20k_mb: 229,
                dsp_per_mac: 1,
                clock_ghz: 0.2,
            },
        }
    }
}

/// Vectorization of the convolution engine: parallel output channels times
/// parallel flattened-index lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VectorConfig {
    pub lanes_oc: usize,
    pub lanes_ic: usize,
}

impl VectorConfig {
    pub fn new(lanes_oc: usize, lanes_ic: usize) -> Result<Self> {
        if lanes_oc == 0 || lanes_ic == 0 {
            return Err(Error::Capacity("lane counts must be at least 1".into()));
        }
        Ok(VectorConfig { lanes_oc, lanes_ic })
    }

    pub fn macs_per_cycle(&self) -> u64 {
        (self.lanes_oc * self.lanes_ic) as u64
    }
}

impl std::str::FromStr for VectorConfig {
    type Err = Error;

    /// Parses `OCxIC`, e.g. `32x16`.
    fn from_str(s: &str) -> Result<Self> {
        let (oc, ic) = s.split_once(['x', 'X']).ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("lanes must be `OCxIC` (e.g. 32x16), got `{s}`"),
        })?;
        let parse = |v: &str| {
            v.trim().parse::<usize>().map_err(|_| Error::Parse {
                line: 0,
                message: format!("lanes must be `OCxIC` (e.g. 32x16), got `{s}`"),
            })
        };
        VectorConfig::new(parse(oc)?, parse(ic)?)
    }
}

/// Projected resource usage and throughput for a lane configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceEstimate {
    pub device: &'static str,
    pub dsp_used: u32,
    pub dsp_total: u32,
    /// 2 * lanes * clock: one multiply and one add per lane per cycle.
    pub projected_gflops: f64,
    /// GFLOP/s per DSP consumed.
    pub performance_density: f64,
    /// Time to push the whole graph's conv+fc FLOPs through, in seconds.
    pub projected_time_s: f64,
}

/// Estimates DSP consumption and throughput for a lane configuration on a
/// device, rejecting configurations over the DSP budget.
pub fn estimate_resources(
    graph: &NetworkGraph,
    vec: &VectorConfig,
    device: &DeviceModel,
) -> Result<ResourceEstimate> {
    let dsp_used = vec
        .macs_per_cycle()
        .checked_mul(device.dsp_per_mac as u64)
        .filter(|&n| n <= u32::MAX as u64)
        .ok_or_else(|| Error::Capacity("lane configuration overflows the DSP count".into()))?
        as u32;
    if dsp_used > device.dsp_total {
        return Err(Error::Capacity(format!(
            "lanes {}x{} need {} DSPs, exceeding the {} budget of {}",
            vec.lanes_oc, vec.lanes_ic, dsp_used, device.name, device.dsp_total
        )));
    }
    let projected_gflops = 2.0 * vec.macs_per_cycle() as f64 * device.clock_ghz;
    let total_flops = total_cost(graph).flops as f64;
    Ok(ResourceEstimate {
        device: device.name,
        dsp_used,
        dsp_total: device.dsp_total,
        projected_gflops,
        performance_density: projected_gflops / dsp_used as f64,
        projected_time_s: total_flops / (projected_gflops * 1e9),
    })
}

/// Analytically projected global-memory traffic; must equal the pipeline
/// ledger's global counters exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrafficProjection {
    pub bytes_read_global: u64,
    pub bytes_written_global: u64,
}

impl TrafficProjection {
    pub fn total(&self) -> u64 {
        self.bytes_read_global + self.bytes_written_global
    }
}

fn weight_bytes(graph: &NetworkGraph, name: &str) -> u64 {
    let layer = graph.layer(name).expect("planned layer exists");
    if !layer.kind.is_weighted() {
        return 0;
    }
    let cost = layer_cost(layer, &graph.input_shapes(name)).expect("validated shapes");
    cost.params * 4
}

fn project_plans(graph: &NetworkGraph, plans: &[StagePlan]) -> TrafficProjection {
    if plans.is_empty() {
        let bytes = graph.input_shape().bytes();
        return TrafficProjection {
            bytes_read_global: bytes,
            bytes_written_global: bytes,
        };
    }
    let mut read = 0u64;
    let mut written = 0u64;
    for plan in plans {
        read += plan.input_shapes.iter().map(Shape3::bytes).sum::<u64>();
        read += plan
            .layer_names
            .iter()
            .map(|n| weight_bytes(graph, n))
            .sum::<u64>();
        written += plan.output_shape.bytes();
    }
    TrafficProjection {
        bytes_read_global: read,
        bytes_written_global: written,
    }
}

/// Projects global traffic for fused or unfused execution of the graph.
pub fn traffic_projection(graph: &NetworkGraph, fused: bool) -> TrafficProjection {
    let plans = if fused {
        plan_segments(graph)
    } else {
        plan_unfused(graph)
    };
    project_plans(graph, &plans)
}

/// Bytes of interlayer tensors that fusion keeps off global memory: the
/// outputs of every non-final layer inside each fused segment. Unfused
/// execution writes each of these once and reads it back once.
pub fn elided_interlayer_bytes(graph: &NetworkGraph) -> u64 {
    plan_segments(graph)
        .iter()
        .flat_map(|plan| {
            let names = &plan.layer_names;
            names[..names.len() - 1].to_vec()
        })
        .map(|name| {
            graph
                .output_shape(&name)
                .expect("planned layer exists")
                .bytes()
        })
        .sum()
}

/// Writes the per-layer cost table as CSV with a fixed header.
pub fn write_cost_csv<W: Write>(graph: &NetworkGraph, mut out: W) -> Result<()> {
    writeln!(out, "layer,kind,macs,flops,params,in_bytes,out_bytes")?;
    for (name, kind, c) in graph_costs(graph) {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            name, kind, c.macs, c.flops, c.params, c.in_bytes, c.out_bytes
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_reference_topology, load_manifest, NetName, Scale};

    #[test]
    fn unit_conv_cost() {
        let g = load_manifest(
            "[network]\ninput = 1,1,1\n\n\
             [layer]\nname = c\nkind = conv\ninputs = input\nout = 1\nk = 1\n",
        )
        .unwrap();
        let costs = graph_costs(&g);
        let conv = &costs[1].2;
        assert_eq!(conv.macs, 1);
        assert_eq!(conv.flops, 2);
        assert_eq!(conv.params, 2);
    }

    #[test]
    fn alexnet_conv1_macs() {
        // 96 * 3 * 11*11 * 54 * 54 on a 224 input with pad 0, stride 4.
        let g = load_manifest(
            "[network]\ninput = 3,224,224\n\n\
             [layer]\nname = c\nkind = conv\ninputs = input\nout = 96\nk = 11\nstride = 4\n",
        )
        .unwrap();
        let conv = graph_costs(&g)[1].2;
        assert_eq!(conv.macs, 101_616_768);
    }

    #[test]
    fn vgg16_parameter_count() {
        let g = build_reference_topology(NetName::Vgg16, Scale::Full);
        assert_eq!(total_cost(&g).params, 138_357_544);
    }

    #[test]
    fn vgg19_total_flops_near_39_gflop() {
        let g = build_reference_topology(NetName::Vgg19, Scale::Full);
        let flops = total_cost(&g).flops as f64;
        assert!((flops - 39e9).abs() / 39e9 <= 0.05, "vgg19 flops = {flops}");
    }

    #[test]
    fn distribution_single_conv_is_all_conv() {
        let g = load_manifest(
            "[network]\ninput = 1,4,4\n\n\
             [layer]\nname = c\nkind = conv\ninputs = input\nout = 2\nk = 3\npad = 1\n",
        )
        .unwrap();
        let d = distribution_report(&g);
        assert_eq!(d.conv_params_share, 1.0);
        assert_eq!(d.conv_ops_share, 1.0);
    }

    #[test]
    fn distribution_vgg11_dominated_by_conv_fc() {
        let g = build_reference_topology(NetName::Vgg11, Scale::Full);
        let d = distribution_report(&g);
        assert!(d.conv_fc_params_share() > 0.99);
        assert!(d.conv_fc_ops_share() > 0.99);
        let sum_p = d.conv_params_share + d.fc_params_share + d.other_params_share;
        let sum_o = d.conv_ops_share + d.fc_ops_share + d.other_ops_share;
        assert!((sum_p - 1.0).abs() < 1e-9);
        assert!((sum_o - 1.0).abs() < 1e-9);
    }

    #[test]
    fn distribution_alexnet_fc_params_dominate() {
        let g = build_reference_topology(NetName::Alexnet, Scale::Full);
        let d = distribution_report(&g);
        assert!(d.fc_params_share > d.conv_params_share);
    }

    #[test]
    fn distribution_invariant_under_renaming() {
        let g = build_reference_topology(NetName::Alexnet, Scale::Desk);
        let before = distribution_report(&g);
        let text = crate::model::save_manifest(&g).unwrap();
        // Rename every layer by prefixing; connectivity is preserved.
        let renamed = text
            .lines()
            .map(|l| {
                if let Some(rest) = l.strip_prefix("name = ") {
                    format!("name = x_{rest}")
                } else if let Some(rest) = l.strip_prefix("inputs = ") {
                    let ins: Vec<String> = rest
                        .split(',')
                        .map(|s| {
                            let s = s.trim();
                            if s == "input" {
                                s.to_string()
                            } else {
                                format!("x_{s}")
                            }
                        })
                        .collect();
                    format!("inputs = {}", ins.join(", "))
                } else {
                    l.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
        let g2 = load_manifest(&renamed).unwrap();
        let after = distribution_report(&g2);
        assert_eq!(before, after);
    }

    #[test]
    fn cost_additivity() {
        let g = build_reference_topology(NetName::Resnet50, Scale::Desk);
        let total = total_cost(&g);
        let sum = graph_costs(&g)
            .iter()
            .fold(LayerCost::default(), |acc, (_, _, c)| acc.add(c));
        assert_eq!(total, sum);
    }

    #[test]
    fn device_table_dsp_counts() {
        assert_eq!(Device::Arria10.model().dsp_total, 1687);
        assert_eq!(Device::Stratix10.model().dsp_total, 5760);
    }

    #[test]
    fn single_lane_on_arria10() {
        let g = build_reference_topology(NetName::Alexnet, Scale::Desk);
        let est = estimate_resources(
            &g,
            &VectorConfig::new(1, 1).unwrap(),
            &Device::Arria10.model(),
        )
        .unwrap();
        assert_eq!(est.dsp_used, 1);
        assert_eq!(est.dsp_total, 1687);
    }

    #[test]
    fn oversized_lanes_rejected() {
        let g = build_reference_topology(NetName::Alexnet, Scale::Desk);
        let err = estimate_resources(
            &g,
            &VectorConfig::new(64, 64).unwrap(),
            &Device::Arria10.model(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("1687"), "{err}");
        assert_eq!(err.category(), "CAPACITY");
    }

    #[test]
    fn stratix_32x32_projects_409_gflops() {
        let g = build_reference_topology(NetName::Alexnet, Scale::Desk);
        let est = estimate_resources(
            &g,
            &VectorConfig::new(32, 32).unwrap(),
            &Device::Stratix10.model(),
        )
        .unwrap();
        assert!((est.projected_gflops - 409.6).abs() < 1e-9);
        assert!(
            (est.performance_density - est.projected_gflops / est.dsp_used as f64).abs() < 1e-12
        );
    }

    #[test]
    fn single_layer_projection_fused_equals_unfused() {
        let g = load_manifest(
            "[network]\ninput = 2,4,4\n\n\
             [layer]\nname = c\nkind = conv\ninputs = input\nout = 2\nk = 3\npad = 1\n",
        )
        .unwrap();
        assert_eq!(traffic_projection(&g, true), traffic_projection(&g, false));
    }

    #[test]
    fn chain_projection_saves_exactly_the_elided_bytes() {
        let g = load_manifest(
            "[network]\ninput = 3,32,32\n\n\
             [layer]\nname = c\nkind = conv\ninputs = input\nout = 8\nk = 3\npad = 1\n\n\
             [layer]\nname = r\nkind = relu\ninputs = c\n\n\
             [layer]\nname = p\nkind = maxpool\ninputs = r\nwindow = 2\nstride = 2\n",
        )
        .unwrap();
        let fused = traffic_projection(&g, true);
        let unfused = traffic_projection(&g, false);
        let conv_out = g.output_shape("c").unwrap().bytes();
        let relu_out = g.output_shape("r").unwrap().bytes();
        assert_eq!(
            unfused.bytes_written_global - fused.bytes_written_global,
            conv_out + relu_out
        );
        assert_eq!(
            unfused.bytes_read_global - fused.bytes_read_global,
            conv_out + relu_out
        );
        assert_eq!(elided_interlayer_bytes(&g), conv_out + relu_out);
    }

    #[test]
    fn vgg11_full_fused_traffic_strictly_less() {
        let g = build_reference_topology(NetName::Vgg11, Scale::Full);
        let fused = traffic_projection(&g, true);
        let unfused = traffic_projection(&g, false);
        assert!(fused.total() < unfused.total());
    }

    #[test]
    fn csv_has_expected_header_and_rows() {
        let g = build_reference_topology(NetName::Alexnet, Scale::Desk);
        let mut buf = Vec::new();
        write_cost_csv(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("layer,kind,macs,flops,params,in_bytes,out_bytes")
        );
        assert_eq!(lines.count(), g.layers().len());
    }
}
