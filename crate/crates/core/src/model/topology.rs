//! Builders for the benchmark topologies at full scale and at a shrunk
//! "desk" scale for fast verification.
//!
//! Desk scale divides channel counts by 8 (with a floor of 4), moves the
//! input to (3,32,32), and shrinks kernels/strides where the full-size ones
//! would not fit a 32x32 map. Layer kinds, order, and connectivity (including
//! the residual adds) are preserved.

use crate::error::{Error, Result};
use crate::layers::{ConvParams, LrnParams, PoolParams};
use crate::model::{LayerDescriptor, LayerKind, NetworkGraph};
use crate::tensor::Shape3;

/// Suffix naming the projection convs on residual shortcuts. They carry
/// weights but are not counted in the conventional depth of the network.
pub const SHORTCUT_SUFFIX: &str = "_sc";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetName {
    Alexnet,
    Vgg11,
    Vgg16,
    Vgg19,
    Resnet50,
}

impl std::str::FromStr for NetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alexnet" => Ok(NetName::Alexnet),
            "vgg11" => Ok(NetName::Vgg11),
            "vgg16" => Ok(NetName::Vgg16),
            "vgg19" => Ok(NetName::Vgg19),
            "resnet50" => Ok(NetName::Resnet50),
            other => Err(Error::Parse {
                line: 0,
                message: format!(
                    "unknown network `{other}` (expected alexnet, vgg11, vgg16, vgg19, or resnet50)"
                ),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Full,
    Desk,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::Parse {
                line: 0,
                message: format!("unknown scale `{other}` (expected full or desk)"),
            }),
        }
    }
}

/// Conventional depth of the network: conv + fc layers, excluding shortcut
/// projections (`*_sc`).
pub fn weighted_depth(graph: &NetworkGraph) -> usize {
    graph
        .layers()
        .iter()
        .filter(|l| l.kind.is_weighted() && !l.name.ends_with(SHORTCUT_SUFFIX))
        .count()
}

struct Builder {
    layers: Vec<LayerDescriptor>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            layers: vec![LayerDescriptor {
                name: "input".into(),
                kind: LayerKind::Input,
                inputs: vec![],
            }],
        }
    }

    fn push(&mut self, name: &str, kind: LayerKind, from: &[&str]) -> String {
        self.layers.push(LayerDescriptor {
            name: name.to_string(),
            kind,
            inputs: from.iter().map(|s| s.to_string()).collect(),
        });
        name.to_string()
    }

    fn conv(&mut self, name: &str, from: &str, out: usize, k: usize, s: usize, p: usize) -> String {
        self.push(
            name,
            LayerKind::Conv {
                out_channels: out,
                params: ConvParams::new(k, s, p).unwrap(),
            },
            &[from],
        )
    }

    fn relu(&mut self, name: &str, from: &str) -> String {
        self.push(name, LayerKind::Relu, &[from])
    }

    fn lrn(&mut self, name: &str, from: &str) -> String {
        self.push(name, LayerKind::Lrn(LrnParams::default()), &[from])
    }

    fn pool(&mut self, name: &str, from: &str, window: usize, stride: usize) -> String {
        self.push(
            name,
            LayerKind::MaxPool(PoolParams::max(window, stride).unwrap()),
            &[from],
        )
    }

    fn fc(&mut self, name: &str, from: &str, out: usize) -> String {
        self.push(name, LayerKind::Fc { out_features: out }, &[from])
    }

    fn finish(self, input: Shape3) -> NetworkGraph {
        NetworkGraph::new(input, self.layers).expect("builder topologies are valid")
    }
}

/// Desk-scale channel count: divide by 8, floor of 4.
fn desk_ch(full: usize) -> usize {
    (full / 8).max(4)
}

/// Builds one of the reference topologies. Full scale reproduces the
/// published layer dimensions; desk scale preserves structure at (3,32,32).
pub fn build_reference_topology(name: NetName, scale: Scale) -> NetworkGraph {
    match name {
        NetName::Alexnet => alexnet(scale),
        NetName::Vgg11 => vgg(scale, &[1, 1, 2, 2, 2]),
        NetName::Vgg16 => vgg(scale, &[2, 2, 3, 3, 3]),
        NetName::Vgg19 => vgg(scale, &[2, 2, 4, 4, 4]),
        NetName::Resnet50 => resnet50(scale),
    }
}

fn alexnet(scale: Scale) -> NetworkGraph {
    let mut b = Builder::new();
    let desk = scale == Scale::Desk;
    let ch = |c: usize| if desk { desk_ch(c) } else { c };
    // 11x11/s4 and 5x5 stem kernels do not fit a 32x32 input; desk scale
    // keeps the kind sequence with stride-1 5x5 convs instead.
    let (k1, s1, p1) = if desk { (5, 1, 2) } else { (11, 4, 0) };

    let mut t = b.conv("conv1", "input", ch(96), k1, s1, p1);
    t = b.relu("relu1", &t);
    t = b.lrn("norm1", &t);
    t = b.pool("pool1", &t, 3, 2);
    t = b.conv("conv2", &t, ch(256), 5, 1, 2);
    t = b.relu("relu2", &t);
    t = b.lrn("norm2", &t);
    t = b.pool("pool2", &t, 3, 2);
    t = b.conv("conv3", &t, ch(384), 3, 1, 1);
    t = b.relu("relu3", &t);
    t = b.conv("conv4", &t, ch(384), 3, 1, 1);
    t = b.relu("relu4", &t);
    t = b.conv("conv5", &t, ch(256), 3, 1, 1);
    t = b.relu("relu5", &t);
    t = b.pool("pool5", &t, 3, 2);
    t = b.fc("fc6", &t, ch(4096));
    t = b.relu("relu6", &t);
    t = b.fc("fc7", &t, ch(4096));
    t = b.relu("relu7", &t);
    t = b.fc("fc8", &t, ch(1000));
    b.push("prob", LayerKind::Softmax, &[&t]);

    let input = if desk {
        Shape3::new(3, 32, 32)
    } else {
        Shape3::new(3, 227, 227)
    };
    b.finish(input.unwrap())
}

/// VGG configurations: `convs_per_block` gives the number of 3x3 convs in
/// each of the five blocks; block channels are 64/128/256/512/512.
fn vgg(scale: Scale, convs_per_block: &[usize]) -> NetworkGraph {
    let desk = scale == Scale::Desk;
    let ch = |c: usize| if desk { desk_ch(c) } else { c };
    let block_channels = [64usize, 128, 256, 512, 512];

    let mut b = Builder::new();
    let mut t = "input".to_string();
    for (bi, (&n, &c)) in convs_per_block.iter().zip(&block_channels).enumerate() {
        for ci in 0..n {
            let cname = format!("conv{}_{}", bi + 1, ci + 1);
            t = b.conv(&cname, &t, ch(c), 3, 1, 1);
            t = b.relu(&format!("relu{}_{}", bi + 1, ci + 1), &t);
        }
        t = b.pool(&format!("pool{}", bi + 1), &t, 2, 2);
    }
    t = b.fc("fc6", &t, ch(4096));
    t = b.relu("relu6", &t);
    t = b.fc("fc7", &t, ch(4096));
    t = b.relu("relu7", &t);
    t = b.fc("fc8", &t, ch(1000));
    b.push("prob", LayerKind::Softmax, &[&t]);

    let input = if desk {
        Shape3::new(3, 32, 32)
    } else {
        Shape3::new(3, 224, 224)
    };
    b.finish(input.unwrap())
}

fn resnet50(scale: Scale) -> NetworkGraph {
    let desk = scale == Scale::Desk;
    let ch = |c: usize| if desk { desk_ch(c) } else { c };

    let mut b = Builder::new();
    let mut t = b.conv("conv1", "input", ch(64), 7, 2, 3);
    t = b.relu("relu1", &t);
    t = b.pool("pool1", &t, 3, 2);

    // (blocks, mid channels, out channels, stride of the first block)
    let stages: [(usize, usize, usize, usize); 4] = [
        (3, 64, 256, 1),
        (4, 128, 512, 2),
        (6, 256, 1024, 2),
        (3, 512, 2048, 2),
    ];
    let mut in_ch = ch(64);
    for (si, &(blocks, mid, out, first_stride)) in stages.iter().enumerate() {
        let (mid, out) = (ch(mid), ch(out));
        for bi in 0..blocks {
            let stride = if bi == 0 { first_stride } else { 1 };
            let base = format!("res{}{}", si + 2, (b'a' + bi as u8) as char);
            let block_in = t.clone();

            let a = b.conv(&format!("{base}_a"), &block_in, mid, 1, stride, 0);
            let a = b.relu(&format!("{base}_a_relu"), &a);
            let m = b.conv(&format!("{base}_b"), &a, mid, 3, 1, 1);
            let m = b.relu(&format!("{base}_b_relu"), &m);
            let c = b.conv(&format!("{base}_c"), &m, out, 1, 1, 0);

            let shortcut = if bi == 0 && (in_ch != out || stride != 1) {
                b.conv(
                    &format!("{base}{SHORTCUT_SUFFIX}"),
                    &block_in,
                    out,
                    1,
                    stride,
                    0,
                )
            } else {
                block_in
            };
            let add = b.push(
                &format!("{base}_add"),
                LayerKind::EltwiseAdd,
                &[&c, &shortcut],
            );
            t = b.relu(&format!("{base}_relu"), &add);
        }
        in_ch = out;
    }

    // Global pooling stands in for the usual average pool: at full scale the
    // final maps are 7x7, at desk scale they are already 1x1.
    let window = if desk { 1 } else { 7 };
    t = b.pool("pool_g", &t, window, 1);
    t = b.fc("fc", &t, ch(1000));
    b.push("prob", LayerKind::Softmax, &[&t]);

    let input = if desk {
        Shape3::new(3, 32, 32)
    } else {
        Shape3::new(3, 224, 224)
    };
    b.finish(input.unwrap())
}
