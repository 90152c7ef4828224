//! The model binary format, plus structured-text artifact helpers.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SPAQ" | version u32 | flags u8 | output digest u64
//! descriptor_len u64 | descriptor (JSON: name, inputs, outputs, node topology)
//! tensor_count u64 | entries: name, dtype code, rank, extents, payload offset
//! quant_count u64  | entries: name, scheme code, group count, (scale, zero_point)*
//! payload_len u64  | contiguous little-endian tensor data
//! ```
//!
//! Dtype codes: 0 = fp32, 1 = int8, 2 = int32. Flags bit 0 marks a present
//! output digest — an FNV-1a hash of the graph's forward outputs on a fixed
//! deterministic probe, checked by [`verify_file`] in place of payload
//! checksums. Tensor entries are named `<node>.<param>`; weight quant
//! entries are keyed by tensor name with scheme 0 (per-channel), activation
//! entries by site name with scheme 1 (per-tensor).
//!
//! Writes go through a temp file in the destination directory plus an
//! atomic rename. `load(save(g))` reproduces `g` bit-exactly, and `save`
//! returns the exact byte count, which is also available without touching
//! the filesystem via [`serialized_len`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::engine;
use crate::error::{Error, Result};
use crate::graph::{Fnv1a, GraphInput, LayerKind, LayerNode, ModelGraph, Precision};
use crate::quantize::{self, ActQuant, QuantScheme, QuantState, WeightQuant};
use crate::tensor::{DType, Tensor};

pub const MAGIC: [u8; 4] = *b"SPAQ";
pub const FORMAT_VERSION: u32 = 1;

/// Digest probes run at this spatial size regardless of the declared
/// resolution; hashing outputs at full resolution would make every save as
/// expensive as an inference pass.
pub const DIGEST_RESOLUTION: (usize, usize) = (16, 16);
pub const DIGEST_SEED: u64 = 0x00D1_6E57;

const FLAG_DIGEST: u8 = 1;

#[derive(Serialize, Deserialize)]
struct NodeDesc {
    id: String,
    kind: LayerKind,
    inputs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct GraphDesc {
    name: String,
    inputs: Vec<GraphInput>,
    outputs: Vec<String>,
    nodes: Vec<NodeDesc>,
}

/// Deterministic probe batch for the output digest.
pub fn digest_probe_inputs(graph: &ModelGraph) -> BTreeMap<String, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(DIGEST_SEED);
    let (h, w) = DIGEST_RESOLUTION;
    let mut inputs = BTreeMap::new();
    for spec in &graph.inputs {
        let data: Vec<f32> = (0..spec.channels * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        inputs.insert(
            spec.name.clone(),
            Tensor::from_f32(vec![1, spec.channels, h, w], data).expect("probe shape"),
        );
    }
    inputs
}

/// FNV-1a hash of the graph's outputs on the fixed probe, or `None` for
/// graphs that cannot run (no inputs or no outputs declared).
pub fn output_digest(graph: &ModelGraph) -> Result<Option<u64>> {
    if graph.inputs.is_empty() || graph.outputs.is_empty() {
        return Ok(None);
    }
    let probe = digest_probe_inputs(graph);
    let outputs = match graph.precision() {
        Precision::Fp32 => engine::forward(graph, &probe)?,
        Precision::Int8 => {
            quantize::quantized_forward(graph, &probe, &quantize::QuantConfig::default())?
        }
    };
    let mut h = Fnv1a::new();
    for id in &graph.outputs {
        let t = &outputs[id];
        h.write(id.as_bytes());
        for &e in t.shape() {
            h.write_usize(e);
        }
        h.write(&t.to_le_bytes());
    }
    Ok(Some(h.finish()))
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.written += n as u64;
        Ok(n)
    }
    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Tensor-table name of one parameter.
fn tensor_name(node_id: &str, param: &str) -> String {
    format!("{node_id}.{param}")
}

/// Tensor-table name carrying a weight-quant state key (`conv` or
/// `cell#gate`), and back.
fn weight_key_to_tensor(key: &str) -> String {
    match key.split_once('#') {
        Some((node, gate)) => format!("{node}.weight_{gate}"),
        None => format!("{key}.weight"),
    }
}

fn tensor_to_weight_key(name: &str) -> Result<String> {
    if let Some(node) = name.strip_suffix(".weight") {
        return Ok(node.to_string());
    }
    if let Some((node, gate)) = name.rsplit_once(".weight_") {
        return Ok(format!("{node}#{gate}"));
    }
    Err(Error::Corrupt(format!(
        "weight quant entry `{name}` does not name a weight tensor"
    )))
}

fn encode<W: Write>(graph: &ModelGraph, sink: W) -> Result<u64> {
    let mut w = CountingWriter { inner: sink, written: 0 };

    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let digest = output_digest(graph)?;
    w.write_all(&[if digest.is_some() { FLAG_DIGEST } else { 0 }])?;
    put_u64(&mut w, digest.unwrap_or(0))?;

    let desc = GraphDesc {
        name: graph.name.clone(),
        inputs: graph.inputs.clone(),
        outputs: graph.outputs.clone(),
        nodes: graph
            .nodes
            .iter()
            .map(|n| NodeDesc {
                id: n.id.clone(),
                kind: n.kind.clone(),
                inputs: n.inputs.clone(),
            })
            .collect(),
    };
    let desc = serde_json::to_vec(&desc).map_err(|e| Error::Corrupt(e.to_string()))?;
    put_u64(&mut w, desc.len() as u64)?;
    w.write_all(&desc)?;

    let tensors: Vec<(String, &Tensor)> = graph
        .nodes
        .iter()
        .flat_map(|n| {
            n.params
                .iter()
                .map(|(p, t)| (tensor_name(&n.id, p), t))
        })
        .collect();

    put_u64(&mut w, tensors.len() as u64)?;
    let mut offset = 0u64;
    for (name, t) in &tensors {
        if t.dtype() == DType::F64 {
            return Err(Error::InvalidConfig(format!(
                "tensor `{name}` is fp64; the model format stores fp32/int8/int32"
            )));
        }
        put_str(&mut w, name)?;
        w.write_all(&[t.dtype().code()])?;
        put_u64(&mut w, t.shape().len() as u64)?;
        for &e in t.shape() {
            put_u64(&mut w, e as u64)?;
        }
        put_u64(&mut w, offset)?;
        offset += (t.numel() * t.dtype().byte_width()) as u64;
    }

    match &graph.quant {
        None => put_u64(&mut w, 0)?,
        Some(state) => {
            put_u64(&mut w, (state.weights.len() + state.activations.len()) as u64)?;
            for (key, wq) in &state.weights {
                put_str(&mut w, &weight_key_to_tensor(key))?;
                w.write_all(&[QuantScheme::SymmetricPerChannel.code()])?;
                put_u64(&mut w, wq.scales.len() as u64)?;
                for &s in &wq.scales {
                    w.write_all(&s.to_le_bytes())?;
                    w.write_all(&0i32.to_le_bytes())?;
                }
            }
            for (site, a) in &state.activations {
                put_str(&mut w, site)?;
                w.write_all(&[QuantScheme::AsymmetricPerTensor.code()])?;
                put_u64(&mut w, 1)?;
                w.write_all(&a.scale.to_le_bytes())?;
                w.write_all(&a.zero_point.to_le_bytes())?;
            }
        }
    }

    put_u64(&mut w, offset)?;
    for (_, t) in &tensors {
        w.write_all(&t.to_le_bytes())?;
    }
    w.flush()?;
    Ok(w.written)
}

/// Exact size of `save(graph)` in bytes, without touching the filesystem.
pub fn serialized_len(graph: &ModelGraph) -> Result<u64> {
    struct Null;
    impl Write for Null {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            Ok(buf.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }
    encode(graph, Null)
}

/// Atomically write the model file; returns bytes written.
pub fn save(graph: &ModelGraph, path: &Path) -> Result<u64> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = path.with_extension("spaq.tmp");
    let file = fs::File::create(&tmp)?;
    let written = match encode(graph, io::BufWriter::new(file)) {
        Ok(n) => n,
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            return Err(e);
        }
    };
    fs::rename(&tmp, path)?;
    if let Some(dir) = dir {
        // Directory fsync is advisory; ignore filesystems that refuse it.
        if let Ok(d) = fs::File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(written)
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Truncated(format!(
                "need {n} bytes at {}, file has {}",
                self.at,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Corrupt(format!("length {v} overflows")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Corrupt("non-UTF-8 name".to_string()))
    }
}

struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
}

impl TensorEntry {
    fn byte_len(&self) -> u64 {
        (self.shape.iter().product::<usize>() * self.dtype.byte_width()) as u64
    }
}

/// Header fields surfaced by [`verify_file`].
#[derive(Debug, Clone, Copy)]
pub struct FileHeader {
    pub version: u32,
    pub digest: Option<u64>,
}

fn decode(bytes: &[u8]) -> Result<(ModelGraph, FileHeader)> {
    let mut c = Cursor { buf: bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let flags = c.u8()?;
    let digest = c.u64()?;
    let header = FileHeader {
        version,
        digest: (flags & FLAG_DIGEST != 0).then_some(digest),
    };

    let desc_len = c.len()?;
    let desc: GraphDesc = serde_json::from_slice(c.take(desc_len)?)
        .map_err(|e| Error::Corrupt(format!("graph descriptor: {e}")))?;

    let tensor_count = c.len()?;
    let mut entries = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = c.string()?;
        let dtype = DType::from_code(c.u8()?)?;
        let rank = c.len()?;
        if rank > 8 {
            return Err(Error::Corrupt(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.len()?);
        }
        let offset = c.u64()?;
        entries.push(TensorEntry { name, dtype, shape, offset });
    }

    let quant_count = c.len()?;
    let mut weights = BTreeMap::new();
    let mut activations = BTreeMap::new();
    for _ in 0..quant_count {
        let name = c.string()?;
        let scheme = QuantScheme::from_code(c.u8()?)?;
        let groups = c.len()?;
        match scheme {
            QuantScheme::SymmetricPerChannel => {
                let mut scales = Vec::with_capacity(groups);
                for _ in 0..groups {
                    scales.push(c.f32()?);
                    let zp = c.i32()?;
                    if zp != 0 {
                        return Err(Error::Corrupt(format!(
                            "weight entry `{name}` has nonzero zero_point {zp}"
                        )));
                    }
                }
                weights.insert(tensor_to_weight_key(&name)?, WeightQuant { scales });
            }
            QuantScheme::AsymmetricPerTensor => {
                if groups != 1 {
                    return Err(Error::Corrupt(format!(
                        "activation entry `{name}` has {groups} groups"
                    )));
                }
                let scale = c.f32()?;
                let zero_point = c.i32()?;
                activations.insert(name, ActQuant { scale, zero_point });
            }
        }
    }

    let payload_len = c.len()?;
    let payload = c.take(payload_len)?;

    // Offsets must stay inside the payload and must not overlap.
    let mut spans: Vec<(u64, u64, usize)> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.offset, e.byte_len(), i))
        .collect();
    spans.sort_unstable();
    let mut end = 0u64;
    for &(off, len, _) in &spans {
        if off.checked_add(len).is_none_or(|e| e > payload_len as u64) {
            return Err(Error::Truncated(format!(
                "tensor span [{off}, {off}+{len}) leaves the {payload_len}-byte payload"
            )));
        }
        if off < end {
            return Err(Error::OffsetOverlap(format!(
                "tensor at offset {off} overlaps the previous span ending at {end}"
            )));
        }
        end = off + len;
    }

    let mut tensors: HashMapByName = entries
        .into_iter()
        .map(|e| {
            let start = e.offset as usize;
            let bytes = &payload[start..start + e.byte_len() as usize];
            Tensor::from_le_bytes(e.dtype, e.shape, bytes).map(|t| (e.name, t))
        })
        .collect::<Result<_>>()?;

    let nodes = desc
        .nodes
        .into_iter()
        .map(|n| {
            let mut params = BTreeMap::new();
            let keys: Vec<String> = tensors
                .keys()
                .filter(|k| {
                    k.strip_prefix(&n.id)
                        .and_then(|r| r.strip_prefix('.'))
                        .is_some_and(|r| !r.contains('.'))
                })
                .cloned()
                .collect();
            for key in keys {
                let t = tensors.remove(&key).expect("key from map");
                params.insert(key[n.id.len() + 1..].to_string(), t);
            }
            LayerNode {
                id: n.id,
                kind: n.kind,
                inputs: n.inputs,
                params,
            }
        })
        .collect();

    if let Some(orphan) = tensors.keys().next() {
        return Err(Error::Corrupt(format!(
            "tensor `{orphan}` does not belong to any node"
        )));
    }

    let quant = (!weights.is_empty() || !activations.is_empty())
        .then_some(QuantState { weights, activations });
    let graph = ModelGraph {
        name: desc.name,
        inputs: desc.inputs,
        nodes,
        outputs: desc.outputs,
        quant,
    };
    if !(graph.inputs.is_empty() && graph.nodes.is_empty() && graph.outputs.is_empty()) {
        graph.validate()?;
        check_quant_coverage(&graph)?;
    }
    Ok((graph, header))
}

/// int8 weight tensors must have quant entries; fp32 ones must not.
fn check_quant_coverage(graph: &ModelGraph) -> Result<()> {
    let empty = QuantState::default();
    let state = graph.quant.as_ref().unwrap_or(&empty);
    for node in &graph.nodes {
        for (pname, t) in &node.params {
            let key = match pname.strip_prefix("weight_") {
                Some(gate) => format!("{}#{gate}", node.id),
                None if pname == "weight" => node.id.clone(),
                _ => continue,
            };
            let quantized = state.weights.contains_key(&key);
            match t.dtype() {
                DType::I8 if !quantized => {
                    return Err(Error::Corrupt(format!(
                        "int8 tensor `{}.{pname}` has no quant entry",
                        node.id
                    )))
                }
                DType::F32 if quantized => {
                    return Err(Error::Corrupt(format!(
                        "fp32 tensor `{}.{pname}` has a quant entry",
                        node.id
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

type HashMapByName = std::collections::HashMap<String, Tensor>;

/// Load a model file.
pub fn load(path: &Path) -> Result<ModelGraph> {
    let bytes = fs::read(path)?;
    decode(&bytes).map(|(g, _)| g)
}

/// Outcome of re-running the stored output digest.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub model: String,
    pub stored_digest: Option<u64>,
    pub actual_digest: Option<u64>,
    pub ok: bool,
}

/// Load `path` and check its forward outputs against the stored digest.
pub fn verify_file(path: &Path) -> Result<VerifyReport> {
    let bytes = fs::read(path)?;
    let (graph, header) = decode(&bytes)?;
    let actual = output_digest(&graph)?;
    let ok = header.digest == actual;
    let report = VerifyReport {
        model: graph.name,
        stored_digest: header.digest,
        actual_digest: actual,
        ok,
    };
    if !ok {
        return Err(Error::DigestMismatch {
            stored: header.digest.unwrap_or(0),
            actual: actual.unwrap_or(0),
        });
    }
    Ok(report)
}

/// Structured-text artifact writers (profiles, plans, reports). Atomic like
/// model saves; stable key order comes from the types' field order.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut body = serde_json::to_vec_pretty(value).map_err(|e| Error::Corrupt(e.to_string()))?;
    body.push(b'\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, &body)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
}
