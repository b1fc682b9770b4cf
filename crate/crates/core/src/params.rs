//! Dense parameter tensors shared by all trainable models: gradient buffers,
//! optimizers and the binary model container.
//!
//! # Model file layout
//!
//! ```text
//! offset 0   8 bytes   magic "HCFMODEL"
//! offset 8   8 bytes   header length H, u64 little-endian
//! offset 16  H bytes   UTF-8 JSON header:
//!                      {"format_version":1,"kind":"hcf"|"mf_bpr"|"mf_implicit",
//!                       "meta":{..model config echo..},
//!                       "tensors":[{"name":"user_table","shape":[rows,cols]},..]}
//! offset 16+H          for each header tensor in order, product(shape) f64
//!                      values, little-endian, row-major
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HCFMODEL";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A model whose parameters are an ordered list of dense tensors.
pub trait Parameterized {
    fn tensor_specs(&self) -> Vec<TensorSpec>;
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zero_grad(&self) -> GradBuffer {
        GradBuffer::new(&self.tensor_specs())
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradient accumulator mirroring a model's tensors. Tracks which entries
/// were written so sparse supports can be recovered.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    values: Vec<Vec<f64>>,
    touched: Vec<Vec<bool>>,
}

impl GradBuffer {
    pub fn new(specs: &[TensorSpec]) -> Self {
        GradBuffer {
            values: specs.iter().map(|s| vec![0.0; s.len()]).collect(),
            touched: specs.iter().map(|s| vec![false; s.len()]).collect(),
        }
    }

    pub fn add(&mut self, tensor: usize, offset: usize, value: f64) {
        self.values[tensor][offset] += value;
        self.touched[tensor][offset] = true;
    }

    /// `grad[tensor][offset..] += scale * delta`
    pub fn add_scaled(&mut self, tensor: usize, offset: usize, delta: &[f64], scale: f64) {
        let end = offset + delta.len();
        for (g, d) in self.values[tensor][offset..end].iter_mut().zip(delta) {
            *g += scale * d;
        }
        self.touched[tensor][offset..end].iter_mut().for_each(|t| *t = true);
    }

    pub fn tensor(&self, tensor: usize) -> &[f64] {
        &self.values[tensor]
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn clear(&mut self) {
        for (v, t) in self.values.iter_mut().zip(&mut self.touched) {
            v.iter_mut().for_each(|x| *x = 0.0);
            t.iter_mut().for_each(|x| *x = false);
        }
    }

    /// `(tensor, offset)` of every entry written since the last clear.
    pub fn support(&self) -> Vec<(usize, usize)> {
        self.touched
            .iter()
            .enumerate()
            .flat_map(|(t, flags)| flags.iter().enumerate().filter_map(move |(o, &f)| f.then_some((t, o))))
            .collect()
    }

    /// Sparse view: `(tensor, offset, value)` over the support.
    pub fn sparse(&self) -> Vec<(usize, usize, f64)> {
        self.support()
            .into_iter()
            .map(|(t, o)| (t, o, self.values[t][o]))
            .collect()
    }

    pub fn is_touched(&self, tensor: usize, offset: usize) -> bool {
        self.touched[tensor][offset]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, specs: &[TensorSpec]) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        let zeros = || -> Vec<Vec<f64>> {
            match kind {
                OptimizerKind::Adam => specs.iter().map(|s| vec![0.0; s.len()]).collect(),
                OptimizerKind::Sgd => Vec::new(),
            }
        };
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: Vec<&mut [f64]>, grad: &GradBuffer) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grad.tensors()) {
                    for (w, d) in p.iter_mut().zip(g) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                let step_size = self.lr * c2.sqrt() / c1;
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grad.tensors())
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for i in 0..p.len() {
                        let d = g[i];
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * d;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * d * d;
                        p[i] -= step_size * m[i] / (v[i].sqrt() + self.eps * c2.sqrt());
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorSpec>,
}

pub fn write_container<W: Write>(
    mut out: W,
    kind: &str,
    meta: serde_json::Value,
    specs: &[TensorSpec],
    tensors: &[&[f64]],
) -> Result<()> {
    let header = ContainerHeader {
        format_version: FORMAT_VERSION,
        kind: kind.to_owned(),
        meta,
        tensors: specs.to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io("<model>", e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&json).map_err(io)?;
    for (spec, values) in specs.iter().zip(tensors) {
        assert_eq!(spec.len(), values.len(), "tensor {} has wrong length", spec.name);
        for v in values.iter() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_container<R: Read>(mut input: R) -> Result<(ContainerHeader, Vec<Vec<f64>>)> {
    let io = |e| Error::io("<model>", e);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut json).map_err(io)?;
    let header: ContainerHeader = serde_json::from_slice(&json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for spec in &header.tensors {
        let mut values = Vec::with_capacity(spec.len());
        for _ in 0..spec.len() {
            input.read_exact(&mut buf).map_err(io)?;
            values.push(f64::from_le_bytes(buf));
        }
        tensors.push(values);
    }
    Ok((header, tensors))
}

/// Copies loaded tensors into a model after checking names and shapes.
pub fn load_into<M: Parameterized>(model: &mut M, header: &ContainerHeader, tensors: Vec<Vec<f64>>) -> Result<()> {
    let specs = model.tensor_specs();
    if specs != header.tensors {
        return Err(Error::ModelFormat("tensor layout does not match model".into()));
    }
    for (dst, src) in model.tensors_mut().into_iter().zip(tensors) {
        dst.copy_from_slice(&src);
    }
    if !model.all_finite() {
        return Err(Error::ModelFormat("non-finite parameter".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let specs = [TensorSpec::new("w", &[3])];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &specs);
        let mut w = vec![1.0, 1.0, 1.0];
        let mut g = GradBuffer::new(&specs);
        g.add_scaled(0, 0, &[2.0, -0.5, 0.0], 1.0);
        opt.apply(vec![&mut w], &g);
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn sgd_step() {
        let specs = [TensorSpec::new("w", &[2])];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, &specs);
        let mut w = vec![1.0, 2.0];
        let mut g = GradBuffer::new(&specs);
        g.add(0, 1, 4.0);
        opt.apply(vec![&mut w], &g);
        assert_eq!(w, vec![1.0, 0.0]);
        assert_eq!(g.support(), vec![(0, 1)]);
    }

    #[test]
    fn container_round_trip() {
        let specs = vec![TensorSpec::new("a", &[2, 2]), TensorSpec::new("b", &[1])];
        let a = [1.0, -2.5, 3.25, f64::MIN_POSITIVE];
        let b = [7.0];
        let mut bytes = Vec::new();
        write_container(&mut bytes, "test", serde_json::json!({"d": 2}), &specs, &[&a, &b]).unwrap();
        assert_eq!(&bytes[..8], b"HCFMODEL");
        let (header, tensors) = read_container(bytes.as_slice()).unwrap();
        assert_eq!(header.kind, "test");
        assert_eq!(header.tensors, specs);
        assert_eq!(tensors, vec![a.to_vec(), b.to_vec()]);
        assert!(read_container(&bytes[1..]).is_err());
    }
}
