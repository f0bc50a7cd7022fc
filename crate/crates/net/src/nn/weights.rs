//! Named parameter tensors, initialization and the binary weights file.
//!
//! File layout: magic `LWE1`, a little-endian `u32` header length, a JSON
//! header listing every tensor with its shape and byte offset, then the
//! concatenated `f32` little-endian payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use lwe_core::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Activation, LayerKind, NetworkGraph};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LWE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![T::zero(); n],
        }
    }
}

/// Ordered collection of tensors addressable by name.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore<T> {
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for WeightStore<T> {
    fn default() -> Self {
        Self {
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptWeights(msg.into())
}

// FNV-1a, so per-graph seeds do not depend on std's hasher
fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl<T: Scalar> WeightStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Tensor<T>) -> Result<()> {
        if self.index.contains_key(&t.name) {
            return Err(Error::Config(format!("duplicate tensor {}", t.name)));
        }
        if t.data.len() != t.shape.iter().product::<usize>() {
            return Err(Error::Config(format!("tensor {} data does not match its shape", t.name)));
        }
        self.index.insert(t.name.clone(), self.tensors.len());
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Config(format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::Config(format!("missing tensor {name}"))),
        }
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for t in &self.tensors {
            out.push(Tensor::zeros(t.name.clone(), t.shape.clone())).expect("unique names");
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        let mut out = WeightStore::new();
        for t in &self.tensors {
            out.push(Tensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: t.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            })
            .expect("unique names");
        }
        out
    }

    /// Elementwise `self += other`; both stores must share a layout.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            debug_assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Adds freshly initialized tensors for every conv in `graph`.
    ///
    /// Kernels feeding only a ReLU use He-uniform bounds `sqrt(6 / fan_in)`,
    /// the rest Xavier-uniform `sqrt(6 / (fan_in + fan_out))`; biases start at
    /// zero. Each graph draws from its own stream so adding a network does
    /// not perturb the others.
    pub fn init_graph(&mut self, graph: &NetworkGraph, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv(&graph.name));
        let consumers = graph.consumers();
        for (i, node) in graph.nodes.iter().enumerate() {
            let LayerKind::Conv2d { kernel, cin, cout, .. } = node.kind else {
                continue;
            };
            let users = &consumers[graph.node_value(i)];
            let relu = users.len() == 1
                && graph.nodes[users[0]].kind == LayerKind::Activation(Activation::Relu);
            let fan_in = (kernel * kernel * cin) as f64;
            let fan_out = (kernel * kernel * cout) as f64;
            let bound = if relu {
                (6.0 / fan_in).sqrt()
            } else {
                (6.0 / (fan_in + fan_out)).sqrt()
            };
            let shape = vec![kernel, kernel, cin, cout];
            let n = kernel * kernel * cin * cout;
            let data = (0..n).map(|_| T::of_f64(rng.gen_range(-bound..bound))).collect();
            self.push(Tensor {
                name: graph.kernel_name(node),
                shape,
                data,
            })?;
            self.push(Tensor::zeros(graph.bias_name(node), vec![cout]))?;
        }
        Ok(())
    }

    /// Checks that every parameter `graph` needs is present with the right
    /// shape.
    pub fn check_graph(&self, graph: &NetworkGraph) -> Result<()> {
        for node in &graph.nodes {
            let LayerKind::Conv2d { kernel, cin, cout, .. } = node.kind else {
                continue;
            };
            for (name, shape) in [
                (graph.kernel_name(node), vec![kernel, kernel, cin, cout]),
                (graph.bias_name(node), vec![cout]),
            ] {
                let t = self.get(&name)?;
                if t.shape != shape {
                    return Err(Error::Config(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut layers = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            layers.push(LayerEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                byte_offset: offset,
            });
            offset += 4 * t.data.len();
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            layers,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing LWE1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(format!("header length {hlen} exceeds file size {}", bytes.len())))?;
        let header: Header =
            serde_json::from_slice(&bytes[8..body]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format_version {}", header.format_version)));
        }
        let payload = &bytes[body..];
        let mut store = Self::new();
        let mut expected = 0usize;
        for l in header.layers {
            let n = l
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt(format!("{}: shape overflows", l.name)))?;
            if l.byte_offset != expected {
                return Err(corrupt(format!(
                    "{}: byte_offset {} but expected {expected}",
                    l.name, l.byte_offset
                )));
            }
            let end = expected
                .checked_add(4 * n)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| corrupt(format!("{}: payload truncated", l.name)))?;
            let data = payload[expected..end]
                .chunks_exact(4)
                .map(|c| T::of_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect();
            store
                .push(Tensor {
                    name: l.name,
                    shape: l.shape,
                    data,
                })
                .map_err(|e| corrupt(e.to_string()))?;
            expected = end;
        }
        if expected != payload.len() {
            return Err(corrupt(format!(
                "payload has {} bytes, header describes {expected}",
                payload.len()
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        lwe_core::dataset::write_atomic(path.as_ref(), &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
