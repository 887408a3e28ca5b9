//! Per-layer weight storage and the binary weight-file format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic   b"FFCW"
//! version u8 = 1
//! count   u32                      number of records
//! record: name_len u16, name bytes (UTF-8),
//!         kind u8 (0 = conv, 1 = fc),
//!         dims u32xN (conv: out,in,k; fc: out,in),
//!         weights f32xM row-major (conv: (out,in,ky,kx) natural order),
//!         biases  f32xOUT
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::FcWeights;
use crate::model::{LayerKind, NetworkGraph};
use crate::tensor::ConvWeights;

const MAGIC: &[u8; 4] = b"FFCW";
const VERSION: u8 = 1;

/// Weights for one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Conv(ConvWeights),
    Fc(FcWeights),
}

impl LayerWeights {
    pub fn param_count(&self) -> u64 {
        match self {
            LayerWeights::Conv(w) => w.param_count(),
            LayerWeights::Fc(w) => w.param_count(),
        }
    }

    /// Bytes the pipeline fetches for this layer: one copy of the weights
    /// (flattened form for conv) plus the biases, as float32.
    pub fn fetch_bytes(&self) -> u64 {
        self.param_count() * 4
    }
}

/// Map from layer name to its weights. Iteration order is by name, so
/// serialization is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, LayerWeights>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, weights: LayerWeights) {
        self.entries.insert(name.into(), weights);
    }

    pub fn get(&self, name: &str) -> Option<&LayerWeights> {
        self.entries.get(name)
    }

    pub fn conv(&self, name: &str) -> Result<&ConvWeights> {
        match self.entries.get(name) {
            Some(LayerWeights::Conv(w)) => Ok(w),
            Some(LayerWeights::Fc(_)) => Err(Error::Shape(format!(
                "layer `{name}` has fc weights, expected conv"
            ))),
            None => Err(Error::Shape(format!(
                "no weights stored for layer `{name}`"
            ))),
        }
    }

    pub fn fc(&self, name: &str) -> Result<&FcWeights> {
        match self.entries.get(name) {
            Some(LayerWeights::Fc(w)) => Ok(w),
            Some(LayerWeights::Conv(_)) => Err(Error::Shape(format!(
                "layer `{name}` has conv weights, expected fc"
            ))),
            None => Err(Error::Shape(format!(
                "no weights stored for layer `{name}`"
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LayerWeights)> {
        self.entries.iter()
    }

    pub fn total_params(&self) -> u64 {
        self.entries.values().map(|w| w.param_count()).sum()
    }

    /// Checks that every weighted layer of the graph has an entry with
    /// matching dimensions and that no extra entries exist.
    pub fn validate(&self, graph: &NetworkGraph) -> Result<()> {
        let mut expected = 0usize;
        for layer in graph.layers() {
            match &layer.kind {
                LayerKind::Conv {
                    out_channels,
                    params,
                } => {
                    expected += 1;
                    let w = self.conv(&layer.name)?;
                    let in_ch = graph.input_shapes(&layer.name)[0].channels;
                    if w.out_channels() != *out_channels
                        || w.in_channels() != in_ch
                        || w.kernel() != params.kernel
                    {
                        return Err(Error::Shape(format!(
                            "layer `{}`: stored conv weights are {}x{}x{k}x{k}, graph expects {}x{}x{gk}x{gk}",
                            layer.name,
                            w.out_channels(),
                            w.in_channels(),
                            out_channels,
                            in_ch,
                            k = w.kernel(),
                            gk = params.kernel,
                        )));
                    }
                }
                LayerKind::Fc { out_features } => {
                    expected += 1;
                    let w = self.fc(&layer.name)?;
                    let in_features = graph.input_shapes(&layer.name)[0].elements();
                    if w.out_features() != *out_features || w.in_features() != in_features {
                        return Err(Error::Shape(format!(
                            "layer `{}`: stored fc weights are {}x{}, graph expects {}x{}",
                            layer.name,
                            w.out_features(),
                            w.in_features(),
                            out_features,
                            in_features
                        )));
                    }
                }
                _ => {}
            }
        }
        if expected != self.entries.len() {
            let extra: Vec<&str> = self
                .entries
                .keys()
                .filter(|n| graph.layer(n).is_none_or(|l| !l.kind.is_weighted()))
                .map(String::as_str)
                .collect();
            return Err(Error::Shape(format!(
                "weight store has {} entries for {} weighted layers (unmatched: {})",
                self.entries.len(),
                expected,
                extra.join(", ")
            )));
        }
        Ok(())
    }

    /// Deterministic random weights for every weighted layer of the graph,
    /// uniform in [-0.5, 0.5). The same `(graph, seed)` pair always produces
    /// the same store.
    pub fn random(graph: &NetworkGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::new();
        for layer in graph.topo_order() {
            match &layer.kind {
                LayerKind::Conv {
                    out_channels,
                    params,
                } => {
                    let in_ch = graph.input_shapes(&layer.name)[0].channels;
                    let n = out_channels * in_ch * params.kernel * params.kernel;
                    let w4d: Vec<f32> = (0..n).map(|_| rng.random::<f32>() - 0.5).collect();
                    let bias: Vec<f32> = (0..*out_channels)
                        .map(|_| rng.random::<f32>() - 0.5)
                        .collect();
                    let w = ConvWeights::new(*out_channels, in_ch, params.kernel, w4d, bias)
                        .expect("validated graph dims");
                    store.insert(layer.name.clone(), LayerWeights::Conv(w));
                }
                LayerKind::Fc { out_features } => {
                    let in_features = graph.input_shapes(&layer.name)[0].elements();
                    let n = out_features * in_features;
                    let matrix: Vec<f32> = (0..n).map(|_| rng.random::<f32>() - 0.5).collect();
                    let bias: Vec<f32> = (0..*out_features)
                        .map(|_| rng.random::<f32>() - 0.5)
                        .collect();
                    let w = FcWeights::new(*out_features, in_features, matrix, bias)
                        .expect("validated graph dims");
                    store.insert(layer.name.clone(), LayerWeights::Fc(w));
                }
                _ => {}
            }
        }
        store
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&[VERSION])?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, weights) in &self.entries {
            out.write_all(&(name.len() as u16).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            match weights {
                LayerWeights::Conv(w) => {
                    out.write_all(&[0u8])?;
                    for dim in [w.out_channels(), w.in_channels(), w.kernel()] {
                        out.write_all(&(dim as u32).to_le_bytes())?;
                    }
                    write_f32s(&mut out, w.w4d())?;
                    write_f32s(&mut out, w.bias())?;
                }
                LayerWeights::Fc(w) => {
                    out.write_all(&[1u8])?;
                    for dim in [w.out_features(), w.in_features()] {
                        out.write_all(&(dim as u32).to_le_bytes())?;
                    }
                    write_f32s(&mut out, w.matrix())?;
                    write_f32s(&mut out, w.bias())?;
                }
            }
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::Io(format!("cannot create {}: {e}", path.display())))?;
        self.save(std::io::BufWriter::new(file))
    }

    /// Loads a weight file and cross-checks it against the graph. Flattened
    /// conv views are populated at load time.
    pub fn load<R: Read>(mut input: R, graph: &NetworkGraph) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut r = Cursor {
            bytes: &bytes,
            pos: 0,
        };

        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Io(format!(
                "bad magic {:02x?}, not a weight file (expected `FFCW`)",
                magic
            )));
        }
        let version = r.take(1, "version")?[0];
        if version != VERSION {
            return Err(Error::Io(format!(
                "unsupported weight file version {version} (expected {VERSION})"
            )));
        }
        let count = r.u32("record count")?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "layer name")?.to_vec())
                .map_err(|_| Error::Io("layer name is not valid UTF-8".into()))?;
            let layer = graph.layer(&name).ok_or_else(|| {
                Error::Shape(format!(
                    "weight file names layer `{name}`, not in the network"
                ))
            })?;
            let kind = r.take(1, "record kind")?[0];
            match (kind, &layer.kind) {
                (
                    0,
                    LayerKind::Conv {
                        out_channels,
                        params,
                    },
                ) => {
                    let out = r.u32("conv out channels")? as usize;
                    let inp = r.u32("conv in channels")? as usize;
                    let k = r.u32("conv kernel")? as usize;
                    let in_ch = graph.input_shapes(&name)[0].channels;
                    if out != *out_channels || inp != in_ch || k != params.kernel {
                        return Err(Error::Shape(format!(
                            "layer `{name}`: weight file has conv dims {out}x{inp}x{k}x{k}, \
                             network expects {}x{in_ch}x{gk}x{gk}",
                            out_channels,
                            gk = params.kernel
                        )));
                    }
                    let w4d = r.f32s(out * inp * k * k, "conv weights")?;
                    let bias = r.f32s(out, "conv biases")?;
                    store.insert(
                        name,
                        LayerWeights::Conv(ConvWeights::new(out, inp, k, w4d, bias)?),
                    );
                }
                (1, LayerKind::Fc { out_features }) => {
                    let out = r.u32("fc out features")? as usize;
                    let inp = r.u32("fc in features")? as usize;
                    let in_features = graph.input_shapes(&name)[0].elements();
                    if out != *out_features || inp != in_features {
                        return Err(Error::Shape(format!(
                            "layer `{name}`: weight file has fc dims {out}x{inp}, \
                             network expects {out_features}x{in_features}"
                        )));
                    }
                    let matrix = r.f32s(out * inp, "fc matrix")?;
                    let bias = r.f32s(out, "fc biases")?;
                    store.insert(
                        name,
                        LayerWeights::Fc(FcWeights::new(out, inp, matrix, bias)?),
                    );
                }
                (0 | 1, _) => {
                    return Err(Error::Shape(format!(
                        "weight file record kind does not match layer `{name}` of kind {}",
                        layer.kind.tag()
                    )));
                }
                (other, _) => {
                    return Err(Error::Io(format!(
                        "unknown weight record kind {other} for layer `{name}`"
                    )));
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Io(format!(
                "{} trailing bytes after the last weight record",
                bytes.len() - r.pos
            )));
        }
        store.validate(graph)?;
        Ok(store)
    }

    pub fn load_from_path(path: &std::path::Path, graph: &NetworkGraph) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Io(format!("cannot open {}: {e}", path.display())))?;
        Self::load(std::io::BufReader::new(file), graph)
    }
}

fn write_f32s<W: Write>(out: &mut W, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Io(format!(
                "weight file truncated while reading {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_reference_topology, NetName, Scale};

    fn desk_alexnet() -> NetworkGraph {
        build_reference_topology(NetName::Alexnet, Scale::Desk)
    }

    #[test]
    fn random_weights_are_deterministic() {
        let g = desk_alexnet();
        let a = WeightStore::random(&g, 7);
        let b = WeightStore::random(&g, 7);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.save(&mut buf_a).unwrap();
        b.save(&mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);

        let c = WeightStore::random(&g, 8);
        let mut buf_c = Vec::new();
        c.save(&mut buf_c).unwrap();
        assert_ne!(buf_a, buf_c);
    }

    #[test]
    fn random_weights_validate_and_shape_correctly() {
        let g = desk_alexnet();
        let store = WeightStore::random(&g, 0);
        store.validate(&g).unwrap();
        let conv1 = store.conv("conv1").unwrap();
        assert_eq!(conv1.in_channels(), 3);
        assert_eq!(conv1.w_flat().len(), conv1.w4d().len());
    }

    #[test]
    fn save_load_roundtrip_is_byte_exact() {
        let g = desk_alexnet();
        let store = WeightStore::random(&g, 42);
        let mut first = Vec::new();
        store.save(&mut first).unwrap();
        let loaded = WeightStore::load(first.as_slice(), &g).unwrap();
        let mut second = Vec::new();
        loaded.save(&mut second).unwrap();
        assert_eq!(first, second);
        assert_eq!(store, loaded);
    }

    #[test]
    fn empty_file_is_a_header_error() {
        let g = desk_alexnet();
        let err = WeightStore::load(&[][..], &g).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let g = desk_alexnet();
        let err = WeightStore::load(&b"NOPE\x01\x00\x00\x00\x00"[..], &g).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let g = desk_alexnet();
        let store = WeightStore::random(&g, 1);
        let mut buf = Vec::new();
        store.save(&mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        let err = WeightStore::load(buf.as_slice(), &g).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn dimension_mismatch_names_the_layer() {
        let g = desk_alexnet();
        // Store built against a graph whose conv1 has a different output
        // width; loading it against the real graph must fail on conv1.
        let text = save_manifest_with_conv1_out(&g, 9);
        let other = crate::model::load_manifest(&text).unwrap();
        let store = WeightStore::random(&other, 3);
        let mut buf = Vec::new();
        store.save(&mut buf).unwrap();
        let err = WeightStore::load(buf.as_slice(), &g).unwrap_err();
        assert!(err.to_string().contains("conv1"), "{err}");
    }

    fn save_manifest_with_conv1_out(g: &NetworkGraph, out: usize) -> String {
        let text = crate::model::save_manifest(g).unwrap();
        // conv1 is the first conv block; bump its `out` line.
        let mut seen_conv1 = false;
        text.lines()
            .map(|l| {
                if l.starts_with("name = conv1") {
                    seen_conv1 = true;
                }
                if seen_conv1 && l.starts_with("out = ") {
                    seen_conv1 = false;
                    format!("out = {out}")
                } else {
                    l.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn missing_layer_entry_is_rejected() {
        let g = desk_alexnet();
        let empty = WeightStore::new();
        assert!(empty.validate(&g).is_err());
    }
}
