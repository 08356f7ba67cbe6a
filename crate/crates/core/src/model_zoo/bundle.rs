//! Weight bundles: one primary graph, named secondaries and optional spectrum
//! statistics in a single versioned, digest-protected file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DATTRBND" | version u32 | total length u64
//! topology length u64 | topology JSON
//! tensor count u32 | { name length u32, name, ndim u32, dims u64.., f32 data.. }*
//! SHA-256 of everything above (32 bytes)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Dense, Layer, Sequential};
use crate::preprocess::SpectrumStats;
use crate::tensor::Tensor;

use super::{Architecture, Decision, Head, InputSpec, ModelGraph};

pub const BUNDLE_MAGIC: &[u8; 8] = b"DATTRBND";
pub const BUNDLE_VERSION: u32 = 1;
pub const BUNDLE_EXTENSION: &str = "dattr";
const DIGEST_LEN: usize = 32;
const PREAMBLE_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub primary: ModelGraph<f32>,
    secondaries: Vec<(String, ModelGraph<f32>)>,
    pub stats: Option<SpectrumStats>,
}

impl ModelBundle {
    pub fn new(primary: ModelGraph<f32>, stats: Option<SpectrumStats>) -> Self {
        ModelBundle {
            primary,
            secondaries: Vec::new(),
            stats,
        }
    }

    /// Adds a secondary, checking name uniqueness and branch-shape compatibility.
    pub fn add_secondary(&mut self, name: &str, graph: ModelGraph<f32>) -> Result<()> {
        if name.is_empty() || self.secondary(name).is_some() {
            return Err(Error::InvalidArgument(format!(
                "secondary name {name:?} is empty or already taken"
            )));
        }
        let branch = self.primary.branch_shape()?;
        if !graph.input.from_branch || graph.input.shape().as_slice() != branch.as_slice() {
            return Err(Error::Shape(format!(
                "secondary {name:?} consumes {:?}, primary branch yields {branch:?}",
                graph.input.shape()
            )));
        }
        self.secondaries.push((name.to_string(), graph));
        Ok(())
    }

    pub fn secondary(&self, name: &str) -> Option<&ModelGraph<f32>> {
        self.secondaries.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn secondary_names(&self) -> Vec<&str> {
        self.secondaries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn secondaries(&self) -> &[(String, ModelGraph<f32>)] {
        &self.secondaries
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerSpec {
    Conv2d { stride: usize, bias: bool },
    BatchNorm2d { momentum: f64, eps: f64 },
    LeakyRelu { alpha: f64 },
    AvgPool2d { size: usize },
    GlobalAvgPool,
    Flatten,
    Dense,
}

#[derive(Serialize, Deserialize)]
struct GraphSpec {
    arch: Architecture,
    input: InputSpec,
    branch_conv: Option<usize>,
    head: Head,
    decision: Decision,
    frozen: bool,
    layers: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize)]
struct Topology {
    primary: GraphSpec,
    secondaries: Vec<(String, GraphSpec)>,
    stats: Option<SpectrumStats>,
}

fn graph_spec(g: &ModelGraph<f32>) -> GraphSpec {
    let layers = g
        .net
        .layers
        .iter()
        .map(|l| match l {
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                stride: c.stride,
                bias: c.bias.is_some(),
            },
            Layer::BatchNorm2d(b) => LayerSpec::BatchNorm2d {
                momentum: b.momentum,
                eps: b.eps,
            },
            Layer::LeakyRelu { alpha } => LayerSpec::LeakyRelu { alpha: *alpha },
            Layer::AvgPool2d { size } => LayerSpec::AvgPool2d { size: *size },
            Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Dense(_) => LayerSpec::Dense,
        })
        .collect();
    GraphSpec {
        arch: g.arch,
        input: g.input,
        branch_conv: g.branch_conv,
        head: g.head,
        decision: g.decision,
        frozen: g.is_frozen(),
        layers,
    }
}

/// Named `f32` tensors, the payload of a bundle.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl WeightStore {
    fn insert_graph(&mut self, prefix: &str, g: &ModelGraph<f32>) {
        for (name, t) in g.named_state() {
            self.tensors.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Manifest(format!("bundle lacks tensor {name:?}")))
    }

    fn build_graph(&mut self, prefix: &str, spec: GraphSpec) -> Result<ModelGraph<f32>> {
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.into_iter().enumerate() {
            let key = |field: &str| format!("{prefix}/{i}.{field}");
            layers.push(match ls {
                LayerSpec::Conv2d { stride, bias } => {
                    let b = if bias { Some(self.take(&key("bias"))?) } else { None };
                    Layer::Conv2d(Conv2d::new(self.take(&key("weight"))?, b, stride)?)
                }
                LayerSpec::BatchNorm2d { momentum, eps } => Layer::BatchNorm2d(BatchNorm2d {
                    gamma: self.take(&key("gamma"))?,
                    beta: self.take(&key("beta"))?,
                    running_mean: self.take(&key("running_mean"))?,
                    running_var: self.take(&key("running_var"))?,
                    momentum,
                    eps,
                }),
                LayerSpec::LeakyRelu { alpha } => Layer::LeakyRelu { alpha },
                LayerSpec::AvgPool2d { size } => Layer::AvgPool2d { size },
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense => Layer::Dense(Dense::new(
                    self.take(&key("weight"))?,
                    self.take(&key("bias"))?,
                )?),
            });
        }
        let mut g = ModelGraph::from_parts(
            spec.arch,
            spec.input,
            Sequential::new(layers),
            spec.branch_conv,
            spec.head,
            spec.decision,
        )?;
        if spec.frozen {
            g.freeze();
        }
        Ok(g)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a bundle to bytes.
pub fn encode_bundle(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let topology = Topology {
        primary: graph_spec(&bundle.primary),
        secondaries: bundle
            .secondaries
            .iter()
            .map(|(n, g)| (n.clone(), graph_spec(g)))
            .collect(),
        stats: bundle.stats.clone(),
    };
    let mut store = WeightStore::default();
    store.insert_graph("primary", &bundle.primary);
    for (name, g) in &bundle.secondaries {
        store.insert_graph(&format!("secondary/{name}"), g);
    }

    let mut out = Vec::new();
    out.extend_from_slice(BUNDLE_MAGIC);
    put_u32(&mut out, BUNDLE_VERSION);
    put_u64(&mut out, 0);
    let json = serde_json::to_vec(&topology)?;
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    put_u32(&mut out, store.tensors.len() as u32);
    for (name, t) in &store.tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.ndim() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let total = (out.len() + DIGEST_LEN) as u64;
    out[12..20].copy_from_slice(&total.to_le_bytes());
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Truncated("length overflows usize".into()))
    }
}

/// Parses bundle bytes, verifying magic, version, length and digest in that order.
pub fn decode_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < BUNDLE_MAGIC.len() {
        return Err(Error::Truncated(format!("{} bytes", bytes.len())));
    }
    if &bytes[..8] != BUNDLE_MAGIC {
        return Err(Error::BadMagic);
    }
    let mut cur = Cursor { buf: bytes, pos: 8 };
    let version = cur.u32()?;
    if version != BUNDLE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let total = cur.len()?;
    if bytes.len() < total || total < PREAMBLE_LEN + DIGEST_LEN {
        return Err(Error::Truncated(format!(
            "expected {total} bytes, found {}",
            bytes.len()
        )));
    }
    if bytes.len() > total {
        return Err(Error::Manifest(format!(
            "{} trailing bytes after bundle",
            bytes.len() - total
        )));
    }
    let (body, stored) = bytes.split_at(total - DIGEST_LEN);
    let computed = Sha256::digest(body);
    if computed.as_slice() != stored {
        return Err(Error::DigestMismatch {
            stored: hex::encode(stored),
            computed: hex::encode(computed),
        });
    }

    let mut cur = Cursor { buf: body, pos: PREAMBLE_LEN };
    let json_len = cur.len()?;
    let topology: Topology = serde_json::from_slice(cur.bytes(json_len)?)?;
    let count = cur.u32()?;
    let mut store = WeightStore::default();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.bytes(name_len)?)
            .map_err(|e| Error::Manifest(format!("tensor name is not utf-8: {e}")))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(cur.len()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Manifest(format!("tensor {name:?} too large")))?;
        let data = cur
            .bytes(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.tensors.insert(name, Tensor::from_vec(shape, data)?);
    }
    if cur.pos != body.len() {
        return Err(Error::Manifest("unparsed bytes before digest".into()));
    }

    let primary = store.build_graph("primary", topology.primary)?;
    let mut bundle = ModelBundle::new(primary, topology.stats);
    for (name, spec) in topology.secondaries {
        let g = store.build_graph(&format!("secondary/{name}"), spec)?;
        bundle.add_secondary(&name, g)?;
    }
    if let Some(extra) = store.tensors.keys().next() {
        return Err(Error::Manifest(format!("unreferenced tensor {extra:?}")));
    }
    Ok(bundle)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let bytes = encode_bundle(bundle)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}
