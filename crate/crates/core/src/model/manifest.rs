//! Text manifest format for network graphs.
//!
//! A manifest is UTF-8 text with one `[network]` header and one `[layer]`
//! block per layer. `#` starts a comment, blank lines are ignored.
//!
//! ```text
//! [network]
//! input = 3,227,227        # channels,height,width; defines the layer `input`
//!
//! [layer]
//! name = conv1
//! kind = conv              # conv|maxpool|lrn|relu|fc|softmax|eltwise_add|concat
//! inputs = input           # comma-separated upstream layer names
//! out = 96                 # conv: output channels;  fc: output features
//! k = 11                   # conv kernel size
//! stride = 4               # conv/maxpool stride (maxpool default: window)
//! pad = 0                  # conv zero padding, default 0
//!
//! [layer]
//! name = norm1
//! kind = lrn
//! inputs = conv1
//! n = 5                    # cross-channel window, odd (default 5)
//! kfac = 2.0               # additive constant (default 2.0)
//! alpha = 0.0001           # default 1e-4
//! beta = 0.75              # default 0.75
//!
//! [layer]
//! name = pool1
//! kind = maxpool
//! inputs = norm1
//! window = 3
//! stride = 2
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::{ConvParams, LrnParams, PoolParams};
use crate::model::{LayerDescriptor, LayerKind, NetworkGraph};
use crate::tensor::Shape3;

/// The name given to the layer created by the `[network]` header.
pub const INPUT_LAYER_NAME: &str = "input";

struct Block {
    header: String,
    header_line: usize,
    // key -> (value, line)
    keys: HashMap<String, (String, usize)>,
    order: Vec<String>,
}

fn parse_blocks(text: &str) -> Result<Vec<Block>> {
    let mut blocks: Vec<Block> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix('[') {
            let header = h.strip_suffix(']').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("malformed section header `{line}`"),
            })?;
            blocks.push(Block {
                header: header.trim().to_string(),
                header_line: line_no,
                keys: HashMap::new(),
                order: Vec::new(),
            });
        } else if let Some((k, v)) = line.split_once('=') {
            let block = blocks.last_mut().ok_or_else(|| Error::Parse {
                line: line_no,
                message: "key/value pair before any section header".into(),
            })?;
            let key = k.trim().to_string();
            if block
                .keys
                .insert(key.clone(), (v.trim().to_string(), line_no))
                .is_some()
            {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("duplicate key `{key}` in this block"),
                });
            }
            block.order.push(key);
        } else {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected `key = value` or a section header, got `{line}`"),
            });
        }
    }
    Ok(blocks)
}

struct BlockReader {
    header_line: usize,
    keys: HashMap<String, (String, usize)>,
}

impl BlockReader {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.keys.remove(key)
    }

    fn require(&mut self, key: &str) -> Result<(String, usize)> {
        self.take(key).ok_or_else(|| Error::Parse {
            line: self.header_line,
            message: format!("missing required key `{key}`"),
        })
    }

    fn usize_key(&mut self, key: &str) -> Result<Option<usize>> {
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<usize>().map(Some).map_err(|_| Error::Parse {
                line,
                message: format!("`{key}` must be a nonnegative integer, got `{v}`"),
            }),
        }
    }

    fn f32_key(&mut self, key: &str) -> Result<Option<f32>> {
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<f32>().map(Some).map_err(|_| Error::Parse {
                line,
                message: format!("`{key}` must be a number, got `{v}`"),
            }),
        }
    }

    fn finish(self, context: &str) -> Result<()> {
        if let Some((key, (_, line))) = self.keys.into_iter().next() {
            return Err(Error::Parse {
                line,
                message: format!("unknown key `{key}` for {context}"),
            });
        }
        Ok(())
    }
}

fn parse_shape(value: &str, line: usize) -> Result<Shape3> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Parse {
            line,
            message: format!("input shape must be `C,H,W`, got `{value}`"),
        });
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p.parse().map_err(|_| Error::Parse {
            line,
            message: format!("input shape must be `C,H,W`, got `{value}`"),
        })?;
    }
    Shape3::new(dims[0], dims[1], dims[2]).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })
}

fn map_param_err(e: Error, line: usize) -> Error {
    match e {
        Error::Shape(msg) => Error::Parse { line, message: msg },
        other => other,
    }
}

/// Parses and validates a manifest, returning the network graph.
pub fn load_manifest(text: &str) -> Result<NetworkGraph> {
    let blocks = parse_blocks(text)?;
    let mut input_shape: Option<Shape3> = None;
    let mut layers: Vec<LayerDescriptor> = vec![];

    for block in blocks {
        let header_line = block.header_line;
        let mut reader = BlockReader {
            header_line,
            keys: block.keys,
        };
        match block.header.as_str() {
            "network" => {
                if input_shape.is_some() {
                    return Err(Error::Parse {
                        line: header_line,
                        message: "second [network] section".into(),
                    });
                }
                let (value, line) = reader.require("input")?;
                input_shape = Some(parse_shape(&value, line)?);
                reader.finish("[network]")?;
                layers.push(LayerDescriptor {
                    name: INPUT_LAYER_NAME.to_string(),
                    kind: LayerKind::Input,
                    inputs: vec![],
                });
            }
            "layer" => {
                let (name, _) = reader.require("name")?;
                let (kind_str, kind_line) = reader.require("kind")?;
                let (inputs_str, _) = reader.require("inputs")?;
                let inputs: Vec<String> = inputs_str
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .collect();
                let kind = match kind_str.as_str() {
                    "conv" => {
                        let (out, out_line) = reader.require("out")?;
                        let out_channels = out.parse::<usize>().map_err(|_| Error::Parse {
                            line: out_line,
                            message: format!("`out` must be a positive integer, got `{out}`"),
                        })?;
                        let (k, k_line) = reader.require("k")?;
                        let kernel = k.parse::<usize>().map_err(|_| Error::Parse {
                            line: k_line,
                            message: format!("`k` must be a positive integer, got `{k}`"),
                        })?;
                        let stride = reader.usize_key("stride")?.unwrap_or(1);
                        let pad = reader.usize_key("pad")?.unwrap_or(0);
                        let params = ConvParams::new(kernel, stride, pad)
                            .map_err(|e| map_param_err(e, header_line))?;
                        LayerKind::Conv {
                            out_channels,
                            params,
                        }
                    }
                    "maxpool" => {
                        let (w, w_line) = reader.require("window")?;
                        let window = w.parse::<usize>().map_err(|_| Error::Parse {
                            line: w_line,
                            message: format!("`window` must be a positive integer, got `{w}`"),
                        })?;
                        let stride = reader.usize_key("stride")?.unwrap_or(window);
                        LayerKind::MaxPool(
                            PoolParams::max(window, stride)
                                .map_err(|e| map_param_err(e, header_line))?,
                        )
                    }
                    "lrn" => {
                        let d = LrnParams::default();
                        let n = reader.usize_key("n")?.unwrap_or(d.local_size);
                        let k = reader.f32_key("kfac")?.unwrap_or(d.k);
                        let alpha = reader.f32_key("alpha")?.unwrap_or(d.alpha);
                        let beta = reader.f32_key("beta")?.unwrap_or(d.beta);
                        LayerKind::Lrn(
                            LrnParams::new(n, k, alpha, beta)
                                .map_err(|e| map_param_err(e, header_line))?,
                        )
                    }
                    "relu" => LayerKind::Relu,
                    "fc" => {
                        let (out, out_line) = reader.require("out")?;
                        let out_features = out.parse::<usize>().map_err(|_| Error::Parse {
                            line: out_line,
                            message: format!("`out` must be a positive integer, got `{out}`"),
                        })?;
                        LayerKind::Fc { out_features }
                    }
                    "softmax" => LayerKind::Softmax,
                    "eltwise_add" => LayerKind::EltwiseAdd,
                    "concat" => LayerKind::Concat,
                    other => {
                        return Err(Error::Parse {
                            line: kind_line,
                            message: format!(
                                "unknown layer kind `{other}` (expected conv, maxpool, lrn, \
                                 relu, fc, softmax, eltwise_add, or concat)"
                            ),
                        })
                    }
                };
                reader.finish(&format!("kind `{kind_str}`"))?;
                layers.push(LayerDescriptor { name, kind, inputs });
            }
            other => {
                return Err(Error::Parse {
                    line: header_line,
                    message: format!("unknown section `[{other}]`"),
                });
            }
        }
    }

    let input_shape = input_shape.ok_or_else(|| Error::Parse {
        line: 0,
        message: "manifest has no [network] section".into(),
    })?;
    NetworkGraph::new(input_shape, layers)
}

/// Writes a graph back out as manifest text. The input layer must carry the
/// name the parser assigns (`input`), since the format only expresses it
/// through the `[network]` header.
pub fn save_manifest(graph: &NetworkGraph) -> Result<String> {
    let input = graph.input_layer();
    if input.name != INPUT_LAYER_NAME {
        return Err(Error::Graph(format!(
            "manifest format requires the input layer to be named `{INPUT_LAYER_NAME}`, got `{}`",
            input.name
        )));
    }
    let shape = graph.input_shape();
    let mut out = String::new();
    out.push_str("[network]\n");
    out.push_str(&format!(
        "input = {},{},{}\n",
        shape.channels, shape.height, shape.width
    ));
    for layer in graph.layers() {
        if matches!(layer.kind, LayerKind::Input) {
            continue;
        }
        out.push_str("\n[layer]\n");
        out.push_str(&format!("name = {}\n", layer.name));
        out.push_str(&format!("kind = {}\n", layer.kind.tag()));
        out.push_str(&format!("inputs = {}\n", layer.inputs.join(", ")));
        match &layer.kind {
            LayerKind::Conv {
                out_channels,
                params,
            } => {
                out.push_str(&format!("out = {out_channels}\n"));
                out.push_str(&format!("k = {}\n", params.kernel));
                out.push_str(&format!("stride = {}\n", params.stride));
                out.push_str(&format!("pad = {}\n", params.padding));
            }
            LayerKind::MaxPool(p) => {
                out.push_str(&format!("window = {}\n", p.window));
                out.push_str(&format!("stride = {}\n", p.stride));
            }
            LayerKind::Lrn(p) => {
                out.push_str(&format!("n = {}\n", p.local_size));
                out.push_str(&format!("kfac = {}\n", p.k));
                out.push_str(&format!("alpha = {}\n", p.alpha));
                out.push_str(&format!("beta = {}\n", p.beta));
            }
            LayerKind::Fc { out_features } => {
                out.push_str(&format!("out = {out_features}\n"));
            }
            LayerKind::Relu
            | LayerKind::Softmax
            | LayerKind::EltwiseAdd
            | LayerKind::Concat
            | LayerKind::Input => {}
        }
    }
    Ok(out)
}
