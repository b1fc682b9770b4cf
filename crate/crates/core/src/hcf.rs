//! History-augmented collaborative filtering network.
//!
//! Each user and item owns a static embedding. At day `t` a user's *history
//! channel* is the mean static embedding of the items in its last `n` events
//! before `t` (zero when there are none), and symmetrically for items. A
//! block of kernel-1 convolutions mixes the (static, history) channels
//! component by component into a dynamic embedding; a pair is scored by the
//! dot product of the two dynamic embeddings.
//!
//! Gradients are written by hand. History members receive `1/|h|` of the
//! pooled-channel gradient unless `stop_history_grad` is set.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::Day;
use crate::history::HistoryIndex;
use crate::params::{self, GradBuffer, Parameterized, TensorSpec};
use crate::training::{softplus, Side, TripletEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `rows x dim` table of static embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingTable {
            rows,
            dim,
            values: vec![0.0; rows * dim],
        }
    }

    pub fn random_normal<R: Rng>(rows: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        EmbeddingTable {
            rows,
            dim,
            values: (0..rows * dim).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let start = id as usize * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn row_mut(&mut self, id: u32) -> &mut [f64] {
        let start = id as usize * self.dim;
        &mut self.values[start..start + self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Mean of the rows listed in `ids`; zero vector for an empty list.
pub fn pool_history(ids: &[u32], table: &EmbeddingTable) -> Vec<f64> {
    let mut out = vec![0.0; table.dim()];
    pool_into(ids.iter().copied(), ids.len(), table, &mut out);
    out
}

fn pool_into(ids: impl Iterator<Item = u32>, count: usize, table: &EmbeddingTable, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    if count == 0 {
        return;
    }
    for id in ids {
        for (o, v) in out.iter_mut().zip(table.row(id)) {
            *o += v;
        }
    }
    let inv = 1.0 / count as f64;
    out.iter_mut().for_each(|v| *v *= inv);
}

/// One kernel-1 convolution layer: `c_out x c_in` channel-mixing weights and a bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    /// Row-major `c_out x c_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl ConvLayer {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>, activation: Activation) -> Self {
        let c_out = weights.len();
        let c_in = weights.first().map_or(0, Vec::len);
        assert!(weights.iter().all(|r| r.len() == c_in) && bias.len() == c_out);
        ConvLayer {
            c_in,
            c_out,
            weights: weights.concat(),
            bias,
            activation,
        }
    }

    /// `input` and `out` are channel-major (`c x dim`); `pre` receives the pre-activations.
    fn forward(&self, input: &[f64], dim: usize, pre: &mut [f64], out: &mut [f64]) {
        for o in 0..self.c_out {
            let z = &mut pre[o * dim..(o + 1) * dim];
            z.iter_mut().for_each(|v| *v = self.bias[o]);
            for c in 0..self.c_in {
                let w = self.weights[o * self.c_in + c];
                for (zl, xl) in z.iter_mut().zip(&input[c * dim..(c + 1) * dim]) {
                    *zl += w * xl;
                }
            }
            for (y, zl) in out[o * dim..(o + 1) * dim].iter_mut().zip(z.iter()) {
                *y = self.activation.apply(*zl);
            }
        }
    }
}

/// Stack of kernel-1 convolutions taking (static, history) channels to one output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub layers: Vec<ConvLayer>,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    /// Inputs of each layer followed by the block output, channel-major.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

impl BlockTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an output")
    }
}

impl ConvBlock {
    /// Glorot-uniform weights, zero biases; ReLU on hidden layers, identity on the output.
    pub fn random<R: Rng>(hidden: &[usize], rng: &mut R) -> Self {
        let widths: Vec<usize> = std::iter::once(2).chain(hidden.iter().copied()).chain([1]).collect();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (c_in, c_out) = (w[0], w[1]);
                let bound = (6.0 / (c_in + c_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                let last = k + 2 == widths.len();
                ConvLayer {
                    c_in,
                    c_out,
                    weights: (0..c_in * c_out).map(|_| dist.sample(rng)).collect(),
                    bias: vec![0.0; c_out],
                    activation: if last { Activation::Identity } else { Activation::Relu },
                }
            })
            .collect();
        ConvBlock { layers }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Config("empty conv block".into()))?;
        let last = self.layers.last().expect("non-empty");
        let chained = self.layers.windows(2).all(|w| w[0].c_out == w[1].c_in);
        if first.c_in != 2 || last.c_out != 1 || last.activation != Activation::Identity || !chained {
            return Err(Error::Config(
                "conv block must map 2 channels to 1 with an identity output".into(),
            ));
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<(usize, usize, Activation)> {
        self.layers.iter().map(|l| (l.c_out, l.c_in, l.activation)).collect()
    }

    pub fn forward(&self, static_emb: &[f64], history: &[f64]) -> Vec<f64> {
        self.forward_traced(static_emb, history).acts.pop().expect("output")
    }

    pub fn forward_traced(&self, static_emb: &[f64], history: &[f64]) -> BlockTrace {
        let dim = static_emb.len();
        assert_eq!(dim, history.len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push([static_emb, history].concat());
        for layer in &self.layers {
            let mut z = vec![0.0; layer.c_out * dim];
            let mut y = vec![0.0; layer.c_out * dim];
            layer.forward(acts.last().expect("input"), dim, &mut z, &mut y);
            pre.push(z);
            acts.push(y);
        }
        BlockTrace { acts, pre }
    }

    /// Backpropagates `d_out` (gradient w.r.t. the block output) through the
    /// block. Weight and bias gradients go to tensors `first_tensor..` of
    /// `grad` as (weights, bias) pairs; returns the gradient w.r.t. the
    /// (static, history) inputs, channel-major.
    fn backward(
        &self,
        trace: &BlockTrace,
        d_out: &[f64],
        scale: f64,
        grad: &mut GradBuffer,
        first_tensor: usize,
    ) -> Vec<f64> {
        let dim = d_out.len();
        let mut delta = d_out.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.acts[k];
            let z = &trace.pre[k];
            let dz: Vec<f64> = delta
                .iter()
                .zip(z)
                .map(|(d, zv)| d * layer.activation.derivative(*zv))
                .collect();
            let w_tensor = first_tensor + 2 * k;
            let mut d_input = vec![0.0; layer.c_in * dim];
            for o in 0..layer.c_out {
                let dz_o = &dz[o * dim..(o + 1) * dim];
                grad.add(w_tensor + 1, o, scale * dz_o.iter().sum::<f64>());
                for c in 0..layer.c_in {
                    let x_c = &input[c * dim..(c + 1) * dim];
                    let dw: f64 = dz_o.iter().zip(x_c).map(|(a, b)| a * b).sum();
                    grad.add(w_tensor, o * layer.c_in + c, scale * dw);
                    let w = layer.weights[o * layer.c_in + c];
                    for (di, dzl) in d_input[c * dim..(c + 1) * dim].iter_mut().zip(dz_o) {
                        *di += w * dzl;
                    }
                }
            }
            delta = d_input;
        }
        delta
    }
}

/// Reusable buffers for allocation-light inference.
#[derive(Clone, Debug, Default)]
pub struct BlockScratch {
    input: Vec<f64>,
    pre: Vec<f64>,
    out: Vec<f64>,
}

impl ConvBlock {
    /// Inference-only forward pass writing the output channel into `out`.
    pub fn forward_into(&self, static_emb: &[f64], history: &[f64], scratch: &mut BlockScratch, out: &mut [f64]) {
        let dim = static_emb.len();
        scratch.input.clear();
        scratch.input.extend_from_slice(static_emb);
        scratch.input.extend_from_slice(history);
        for layer in &self.layers {
            scratch.pre.resize(layer.c_out * dim, 0.0);
            scratch.out.resize(layer.c_out * dim, 0.0);
            layer.forward(&scratch.input, dim, &mut scratch.pre, &mut scratch.out);
            std::mem::swap(&mut scratch.input, &mut scratch.out);
        }
        out.copy_from_slice(&scratch.input[..dim]);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HcfConfig {
    /// Embedding dimension.
    pub d: usize,
    /// History capacity in events.
    pub n: usize,
    pub hidden: Vec<usize>,
    pub init_std: f64,
    /// Cut gradients flowing into history members through the pooled channel.
    pub stop_history_grad: bool,
    /// L2 coefficient on anchor static embeddings, per sampled triplet.
    pub embedding_decay: f64,
}

impl Default for HcfConfig {
    fn default() -> Self {
        HcfConfig {
            d: 32,
            n: 20,
            hidden: vec![8, 8],
            init_std: 0.1,
            stop_history_grad: false,
            embedding_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HcfModel {
    pub user_table: EmbeddingTable,
    pub item_table: EmbeddingTable,
    pub user_block: ConvBlock,
    pub item_block: ConvBlock,
    pub config: HcfConfig,
}

const USER_TABLE: usize = 0;
const ITEM_TABLE: usize = 1;
const FIRST_BLOCK_TENSOR: usize = 2;

impl HcfModel {
    /// Normal(0, `init_std`) embeddings, Glorot-uniform conv weights, zero biases.
    pub fn new(num_users: usize, num_items: usize, config: HcfConfig, seed: u64) -> Self {
        assert!(config.d >= 1 && config.n >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user_table = EmbeddingTable::random_normal(num_users, config.d, config.init_std, &mut rng);
        let item_table = EmbeddingTable::random_normal(num_items, config.d, config.init_std, &mut rng);
        let user_block = ConvBlock::random(&config.hidden, &mut rng);
        let item_block = ConvBlock::random(&config.hidden, &mut rng);
        HcfModel {
            user_table,
            item_table,
            user_block,
            item_block,
            config,
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_table.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_table.rows()
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    fn check_user(&self, index: &HistoryIndex, user: u32) -> Result<()> {
        if (user as usize) < self.num_users() && (user as usize) < index.num_users() {
            Ok(())
        } else {
            Err(Error::UnknownEntity { kind: "user", id: user })
        }
    }

    fn check_item(&self, index: &HistoryIndex, item: u32) -> Result<()> {
        if (item as usize) < self.num_items() && (item as usize) < index.num_items() {
            Ok(())
        } else {
            Err(Error::UnknownEntity { kind: "item", id: item })
        }
    }

    /// Dynamic user embedding at `day`; the history channel pools item embeddings.
    pub fn dynamic_user(&self, index: &HistoryIndex, user: u32, day: Day) -> Result<Vec<f64>> {
        self.check_user(index, user)?;
        let hist = self.user_history_channel(index, user, day);
        Ok(self.user_block.forward(self.user_table.row(user), &hist))
    }

    /// Dynamic item embedding at `day`; the history channel pools user embeddings.
    pub fn dynamic_item(&self, index: &HistoryIndex, item: u32, day: Day) -> Result<Vec<f64>> {
        self.check_item(index, item)?;
        let hist = self.item_history_channel(index, item, day);
        Ok(self.item_block.forward(self.item_table.row(item), &hist))
    }

    pub fn score(&self, index: &HistoryIndex, user: u32, item: u32, day: Day) -> Result<f64> {
        let u = self.dynamic_user(index, user, day)?;
        let i = self.dynamic_item(index, item, day)?;
        Ok(dot(&u, &i))
    }

    fn user_history_channel(&self, index: &HistoryIndex, user: u32, day: Day) -> Vec<f64> {
        let window = index.user_window(user, day);
        let mut out = vec![0.0; self.dim()];
        pool_into(window.iter().map(|e| e.1), window.len(), &self.item_table, &mut out);
        out
    }

    fn item_history_channel(&self, index: &HistoryIndex, item: u32, day: Day) -> Vec<f64> {
        let window = index.item_window(item, day);
        let mut out = vec![0.0; self.dim()];
        pool_into(window.iter().map(|e| e.1), window.len(), &self.user_table, &mut out);
        out
    }

    /// Dynamic embeddings of `users` then `items` at `day`, row-major.
    pub fn dynamic_embeddings(
        &self,
        index: &HistoryIndex,
        day: Day,
        users: &[u32],
        items: &[u32],
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut scratch = BlockScratch::default();
        let mut hist = vec![0.0; d];
        let mut user_out = vec![0.0; users.len() * d];
        for (k, &u) in users.iter().enumerate() {
            let w = index.user_window(u, day);
            pool_into(w.iter().map(|e| e.1), w.len(), &self.item_table, &mut hist);
            self.user_block.forward_into(
                self.user_table.row(u),
                &hist,
                &mut scratch,
                &mut user_out[k * d..(k + 1) * d],
            );
        }
        let mut item_out = vec![0.0; items.len() * d];
        for (k, &i) in items.iter().enumerate() {
            let w = index.item_window(i, day);
            pool_into(w.iter().map(|e| e.1), w.len(), &self.user_table, &mut hist);
            self.item_block.forward_into(
                self.item_table.row(i),
                &hist,
                &mut scratch,
                &mut item_out[k * d..(k + 1) * d],
            );
        }
        (user_out, item_out)
    }

    fn item_block_first_tensor(&self) -> usize {
        FIRST_BLOCK_TENSOR + 2 * self.user_block.layers.len()
    }

    /// Loss of one sampled quadruple, including the optional embedding decay.
    pub fn entry_loss(&self, index: &HistoryIndex, entry: &TripletEntry) -> f64 {
        let day = entry.day;
        let (pos, neg, anchors) = match entry.side {
            Side::User => {
                let u = self.dynamic_user(index, entry.user, day).expect("entry in perimeter");
                let i = self.dynamic_item(index, entry.item, day).expect("entry in perimeter");
                let j = self
                    .dynamic_item(index, entry.negative, day)
                    .expect("entry in perimeter");
                let anchors = self.user_table.row(entry.user).iter().map(|v| v * v).sum::<f64>()
                    + sq(self.item_table.row(entry.item))
                    + sq(self.item_table.row(entry.negative));
                (dot(&u, &i), dot(&u, &j), anchors)
            }
            Side::Item => {
                let u = self.dynamic_user(index, entry.user, day).expect("entry in perimeter");
                let v = self
                    .dynamic_user(index, entry.negative, day)
                    .expect("entry in perimeter");
                let i = self.dynamic_item(index, entry.item, day).expect("entry in perimeter");
                let anchors = sq(self.user_table.row(entry.user))
                    + sq(self.user_table.row(entry.negative))
                    + sq(self.item_table.row(entry.item));
                (dot(&u, &i), dot(&v, &i), anchors)
            }
        };
        softplus(-(pos - neg)) + self.config.embedding_decay * anchors
    }

    /// Adds `scale` times the gradient of [`entry_loss`](Self::entry_loss)
    /// to `grad` and returns the loss.
    pub fn backward(&self, index: &HistoryIndex, entry: &TripletEntry, scale: f64, grad: &mut GradBuffer) -> f64 {
        let day = entry.day;
        let user_trace = |u: u32| {
            let hist = self.user_history_channel(index, u, day);
            self.user_block.forward_traced(self.user_table.row(u), &hist)
        };
        let item_trace = |i: u32| {
            let hist = self.item_history_channel(index, i, day);
            self.item_block.forward_traced(self.item_table.row(i), &hist)
        };
        match entry.side {
            Side::User => {
                let (tu, ti, tj) = (
                    user_trace(entry.user),
                    item_trace(entry.item),
                    item_trace(entry.negative),
                );
                let (ou, oi, oj) = (tu.output(), ti.output(), tj.output());
                let x = dot(ou, oi) - dot(ou, oj);
                let g = -sigmoid(-x);
                let d_u: Vec<f64> = oi.iter().zip(oj).map(|(a, b)| g * (a - b)).collect();
                let d_i: Vec<f64> = ou.iter().map(|a| g * a).collect();
                let d_j: Vec<f64> = ou.iter().map(|a| -g * a).collect();
                self.user_backward(index, entry.user, day, &tu, &d_u, scale, grad);
                self.item_backward(index, entry.item, day, &ti, &d_i, scale, grad);
                self.item_backward(index, entry.negative, day, &tj, &d_j, scale, grad);
                softplus(-x)
                    + self.decay_anchor(USER_TABLE, entry.user, scale, grad)
                    + self.decay_anchor(ITEM_TABLE, entry.item, scale, grad)
                    + self.decay_anchor(ITEM_TABLE, entry.negative, scale, grad)
            }
            Side::Item => {
                let (tu, tv, ti) = (
                    user_trace(entry.user),
                    user_trace(entry.negative),
                    item_trace(entry.item),
                );
                let (ou, ov, oi) = (tu.output(), tv.output(), ti.output());
                let x = dot(ou, oi) - dot(ov, oi);
                let g = -sigmoid(-x);
                let d_i: Vec<f64> = ou.iter().zip(ov).map(|(a, b)| g * (a - b)).collect();
                let d_u: Vec<f64> = oi.iter().map(|a| g * a).collect();
                let d_v: Vec<f64> = oi.iter().map(|a| -g * a).collect();
                self.user_backward(index, entry.user, day, &tu, &d_u, scale, grad);
                self.user_backward(index, entry.negative, day, &tv, &d_v, scale, grad);
                self.item_backward(index, entry.item, day, &ti, &d_i, scale, grad);
                softplus(-x)
                    + self.decay_anchor(USER_TABLE, entry.user, scale, grad)
                    + self.decay_anchor(USER_TABLE, entry.negative, scale, grad)
                    + self.decay_anchor(ITEM_TABLE, entry.item, scale, grad)
            }
        }
    }

    /// Signs (`z > 0`) of every ReLU pre-activation in the dynamic
    /// embeddings that `entry`'s loss uses.
    pub fn relu_signs(&self, index: &HistoryIndex, entry: &TripletEntry) -> Vec<bool> {
        let day = entry.day;
        let mut traces = Vec::with_capacity(3);
        let (users, items) = match entry.side {
            Side::User => (vec![entry.user], vec![entry.item, entry.negative]),
            Side::Item => (vec![entry.user, entry.negative], vec![entry.item]),
        };
        for u in users {
            let hist = self.user_history_channel(index, u, day);
            traces.push((
                &self.user_block,
                self.user_block.forward_traced(self.user_table.row(u), &hist),
            ));
        }
        for i in items {
            let hist = self.item_history_channel(index, i, day);
            traces.push((
                &self.item_block,
                self.item_block.forward_traced(self.item_table.row(i), &hist),
            ));
        }
        let mut out = Vec::new();
        for (block, trace) in &traces {
            for (layer, pre) in block.layers.iter().zip(&trace.pre) {
                if layer.activation == Activation::Relu {
                    out.extend(pre.iter().map(|z| *z > 0.0));
                }
            }
        }
        out
    }

    fn decay_anchor(&self, tensor: usize, id: u32, scale: f64, grad: &mut GradBuffer) -> f64 {
        let decay = self.config.embedding_decay;
        if decay == 0.0 {
            return 0.0;
        }
        let row = if tensor == USER_TABLE {
            self.user_table.row(id)
        } else {
            self.item_table.row(id)
        };
        grad.add_scaled(tensor, id as usize * self.dim(), row, 2.0 * decay * scale);
        decay * sq(row)
    }

    #[allow(clippy::too_many_arguments)]
    fn user_backward(
        &self,
        index: &HistoryIndex,
        user: u32,
        day: Day,
        trace: &BlockTrace,
        d_out: &[f64],
        scale: f64,
        grad: &mut GradBuffer,
    ) {
        let d = self.dim();
        let d_in = self.user_block.backward(trace, d_out, scale, grad, FIRST_BLOCK_TENSOR);
        grad.add_scaled(USER_TABLE, user as usize * d, &d_in[..d], scale);
        if !self.config.stop_history_grad {
            let window = index.user_window(user, day);
            if !window.is_empty() {
                let share = scale / window.len() as f64;
                for &(_, item) in window {
                    grad.add_scaled(ITEM_TABLE, item as usize * d, &d_in[d..], share);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn item_backward(
        &self,
        index: &HistoryIndex,
        item: u32,
        day: Day,
        trace: &BlockTrace,
        d_out: &[f64],
        scale: f64,
        grad: &mut GradBuffer,
    ) {
        let d = self.dim();
        let d_in = self
            .item_block
            .backward(trace, d_out, scale, grad, self.item_block_first_tensor());
        grad.add_scaled(ITEM_TABLE, item as usize * d, &d_in[..d], scale);
        if !self.config.stop_history_grad {
            let window = index.item_window(item, day);
            if !window.is_empty() {
                let share = scale / window.len() as f64;
                for &(_, user) in window {
                    grad.add_scaled(USER_TABLE, user as usize * d, &d_in[d..], share);
                }
            }
        }
    }

    pub fn save<W: std::io::Write>(&self, out: W, meta: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "num_users": self.num_users(),
            "num_items": self.num_items(),
            "config": self.config,
            "extra": meta,
        });
        params::write_container(out, "hcf", meta, &self.tensor_specs(), &self.tensors())
    }

    pub fn load<R: std::io::Read>(input: R) -> Result<Self> {
        let (header, tensors) = params::read_container(input)?;
        if header.kind != "hcf" {
            return Err(Error::ModelFormat(format!("expected hcf model, found {}", header.kind)));
        }
        let field = |k: &str| {
            header
                .meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::ModelFormat(format!("missing {k}")))
        };
        let num_users: usize = serde_json::from_value(field("num_users")?)?;
        let num_items: usize = serde_json::from_value(field("num_items")?)?;
        let config: HcfConfig = serde_json::from_value(field("config")?)?;
        let mut model = HcfModel::new(num_users, num_items, config, 0);
        params::load_into(&mut model, &header, tensors)?;
        Ok(model)
    }
}

impl Parameterized for HcfModel {
    fn tensor_specs(&self) -> Vec<TensorSpec> {
        let mut specs = vec![
            TensorSpec::new("user_table", &[self.user_table.rows, self.user_table.dim]),
            TensorSpec::new("item_table", &[self.item_table.rows, self.item_table.dim]),
        ];
        for (side, block) in [("user", &self.user_block), ("item", &self.item_block)] {
            for (k, l) in block.layers.iter().enumerate() {
                specs.push(TensorSpec::new(format!("{side}_block.{k}.weight"), &[l.c_out, l.c_in]));
                specs.push(TensorSpec::new(format!("{side}_block.{k}.bias"), &[l.c_out]));
            }
        }
        specs
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.user_table.values, &self.item_table.values];
        for block in [&self.user_block, &self.item_block] {
            for l in &block.layers {
                out.push(&l.weights);
                out.push(&l.bias);
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.user_table.values, &mut self.item_table.values];
        for block in [&mut self.user_block, &mut self.item_block] {
            for l in &mut block.layers {
                out.push(&mut l.weights);
                out.push(&mut l.bias);
            }
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::EventLog;

    fn single_layer(w: [f64; 2], b: f64) -> ConvBlock {
        ConvBlock {
            layers: vec![ConvLayer::new(vec![w.to_vec()], vec![b], Activation::Identity)],
        }
    }

    #[test]
    fn pooling_examples() {
        let table = EmbeddingTable {
            rows: 2,
            dim: 2,
            values: vec![1.0, 0.0, 4.0, 3.0],
        };
        assert_eq!(pool_history(&[], &table), vec![0.0, 0.0]);
        assert_eq!(pool_history(&[1], &table), vec![4.0, 3.0]);
        assert_eq!(pool_history(&[0, 0, 1], &table), vec![2.0, 1.0]);
    }

    #[test]
    fn block_forward_examples() {
        let identity = single_layer([1.0, 0.0], 0.0);
        assert_eq!(identity.forward(&[3.0, -1.0], &[7.0, 7.0]), vec![3.0, -1.0]);

        let avg = single_layer([0.5, 0.5], 1.0);
        assert_eq!(avg.forward(&[2.0, 4.0], &[0.0, 2.0]), vec![2.0, 4.0]);

        let deep = ConvBlock {
            layers: vec![
                ConvLayer::new(vec![vec![1.0, 1.0]], vec![0.0], Activation::Relu),
                ConvLayer::new(vec![vec![1.0]], vec![0.0], Activation::Identity),
            ],
        };
        assert_eq!(deep.forward(&[-3.0], &[1.0]), vec![0.0]);
    }

    #[test]
    fn forward_into_matches_traced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = ConvBlock::random(&[4, 3], &mut rng);
        let s = [0.3, -1.2, 0.7];
        let h = [1.0, 0.5, -0.25];
        let mut out = [0.0; 3];
        block.forward_into(&s, &h, &mut BlockScratch::default(), &mut out);
        assert_eq!(out.to_vec(), block.forward(&s, &h));
    }

    #[test]
    fn init_shapes() {
        let m = HcfModel::new(
            3,
            4,
            HcfConfig {
                d: 5,
                hidden: vec![],
                ..HcfConfig::default()
            },
            1,
        );
        assert_eq!(m.user_block.shapes(), vec![(1, 2, Activation::Identity)]);
        assert_eq!(m.user_block.shapes(), m.item_block.shapes());
        assert!(m.user_block.layers[0].bias.iter().all(|&b| b == 0.0));

        let m = HcfModel::new(
            3,
            4,
            HcfConfig {
                d: 5,
                hidden: vec![8, 8],
                ..HcfConfig::default()
            },
            1,
        );
        assert_eq!(
            m.user_block.shapes(),
            vec![
                (8, 2, Activation::Relu),
                (8, 8, Activation::Relu),
                (1, 8, Activation::Identity)
            ]
        );
        m.user_block.validate().unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(m.item_block.layers[1].weights.iter().all(|w| w.abs() <= bound));

        assert_eq!(m, HcfModel::new(3, 4, m.config.clone(), 1));
        assert_ne!(m, HcfModel::new(3, 4, m.config.clone(), 2));
    }

    fn linear_model(alpha: f64, beta: f64, gamma: f64) -> HcfModel {
        let mut m = HcfModel::new(
            2,
            2,
            HcfConfig {
                d: 2,
                hidden: vec![],
                ..HcfConfig::default()
            },
            0,
        );
        m.user_block = single_layer([alpha, beta], gamma);
        m.item_block = single_layer([alpha, beta], gamma);
        m
    }

    #[test]
    fn dynamic_embedding_examples() {
        let log = EventLog::from_triples(2, 2, &[(3, 0, 1), (4, 1, 0)]);
        let idx = HistoryIndex::build(&log, 5);
        let m = linear_model(2.0, 3.0, 0.5);
        let xu = m.user_table.row(0).to_vec();
        // empty history at day 3: alpha * x_u + gamma
        let expect: Vec<f64> = xu.iter().map(|v| 2.0 * v + 0.5).collect();
        assert_eq!(m.dynamic_user(&idx, 0, 3).unwrap(), expect);
        // before all events: same as empty history
        assert_eq!(m.dynamic_user(&idx, 0, 0).unwrap(), expect);
        // identity-on-static ignores history
        let id = linear_model(1.0, 0.0, 0.0);
        assert_eq!(id.dynamic_user(&idx, 0, 10).unwrap(), xu);
        assert_eq!(id.dynamic_item(&idx, 1, 10).unwrap(), id.item_table.row(1).to_vec());
        // item side mirror, history pools user embeddings
        let hist = m.user_table.row(0).to_vec();
        let xi = m.item_table.row(1);
        let expect: Vec<f64> = xi.iter().zip(&hist).map(|(x, h)| 2.0 * x + 3.0 * h + 0.5).collect();
        let got = m.dynamic_item(&idx, 1, 4).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(m.dynamic_user(&idx, 2, 0).is_err());
        assert!(m.score(&idx, 0, 5, 0).is_err());
    }

    #[test]
    fn score_is_dot_of_dynamic() {
        let log = EventLog::from_triples(1, 2, &[]);
        let idx = HistoryIndex::build(&log, 5);
        let mut m = linear_model(1.0, 0.0, 0.0);
        m.user_table.row_mut(0).copy_from_slice(&[1.0, 2.0]);
        m.item_table.row_mut(1).copy_from_slice(&[3.0, -1.0]);
        assert_eq!(m.score(&idx, 0, 1, 0).unwrap(), 1.0);
        m.user_table.row_mut(0).copy_from_slice(&[0.0, 0.0]);
        assert_eq!(m.score(&idx, 0, 0, 0).unwrap(), 0.0);
        assert_eq!(m.score(&idx, 0, 1, 0).unwrap(), 0.0);
    }

    #[test]
    fn tie_gives_ln2_and_half_gradient() {
        let log = EventLog::from_triples(1, 2, &[]);
        let idx = HistoryIndex::build(&log, 5);
        let mut m = linear_model(1.0, 0.0, 0.0);
        m.item_table.row_mut(0).copy_from_slice(&[0.5, 0.5]);
        m.item_table.row_mut(1).copy_from_slice(&[0.5, 0.5]);
        let entry = TripletEntry {
            day: 0,
            user: 0,
            item: 0,
            negative: 1,
            side: Side::User,
        };
        let mut g = m.zero_grad();
        let loss = m.backward(&idx, &entry, 1.0, &mut g);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        // d loss / d x_i = -0.5 * x_u
        let xu = m.user_table.row(0);
        for (k, v) in g.tensor(ITEM_TABLE)[..2].iter().enumerate() {
            assert!((v + 0.5 * xu[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn untouched_entities_get_no_gradient() {
        let log = EventLog::from_triples(4, 4, &[(0, 0, 0), (0, 1, 1), (1, 0, 2)]);
        let idx = HistoryIndex::build(&log, 3);
        let m = HcfModel::new(
            4,
            4,
            HcfConfig {
                d: 3,
                ..HcfConfig::default()
            },
            9,
        );
        let entry = TripletEntry {
            day: 2,
            user: 0,
            item: 2,
            negative: 1,
            side: Side::User,
        };
        let mut g = m.zero_grad();
        m.backward(&idx, &entry, 1.0, &mut g);
        // user 3 and item 3 never appear as anchors or history members
        assert!(g.tensor(USER_TABLE)[9..12].iter().all(|&v| v == 0.0));
        assert!(g.tensor(ITEM_TABLE)[9..12].iter().all(|&v| v == 0.0));
        assert!(!g.is_touched(USER_TABLE, 9));
        // history of user 0 at day 2 is items {0, 2}: they receive gradient
        assert!(g.is_touched(ITEM_TABLE, 0));
    }

    #[test]
    fn save_load_round_trip() {
        let m = HcfModel::new(
            3,
            5,
            HcfConfig {
                d: 4,
                hidden: vec![3],
                ..HcfConfig::default()
            },
            4,
        );
        let mut bytes = Vec::new();
        m.save(&mut bytes, serde_json::json!({"tag": "x"})).unwrap();
        let back = HcfModel::load(bytes.as_slice()).unwrap();
        assert_eq!(m, back);
    }
}
