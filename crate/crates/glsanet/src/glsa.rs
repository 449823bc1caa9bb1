//! Grid-wise local self-attention.
//!
//! Each grid entity is embedded by a shared depthwise/pointwise convolution
//! stack into a C-wide token; tokens are split into proximity groups of `§`
//! consecutive entities; multi-head self-attention runs inside each group
//! (never across groups); a sigmoid head scores each grid's objectiveness.
//! Training minimizes binary cross entropy against grid targets.

use crate::error::{Error, Result};
use crate::grid::{self, GridPartition, ObjectivenessTargets};
use crate::rng::{shuffle, SplitMix64};
use crate::tensor::{ParamSet, Scalar, SgdMomentum, Tape, TapeBinding, Tensor, TensorId};
use rayon::prelude::*;
use std::collections::BTreeMap;

/// How entities are assigned to attention groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// Consecutive row-major entity indices.
    RowMajor,
    /// Spatially square blocks of sqrt(§) x sqrt(§) grid cells.
    Block2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GLSAConfig {
    /// Grids per image side (N^2 entities).
    pub n: usize,
    /// Token width C.
    pub embed_dim: usize,
    /// Entities per attention group (§).
    pub proximity: usize,
    /// Attention heads N_h.
    pub heads: usize,
    /// Per-head width d; heads * head_dim == embed_dim.
    pub head_dim: usize,
    /// Depthwise+pointwise blocks per entity.
    pub conv_depth: usize,
    pub grouping: Grouping,
}

impl GLSAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("N must be >= 1".into()));
        }
        let tokens = self.n * self.n;
        if self.proximity == 0 || !tokens.is_multiple_of(self.proximity) {
            return Err(Error::Config(format!(
                "proximity {} does not divide N^2 = {tokens}",
                self.proximity
            )));
        }
        if self.heads == 0 || self.head_dim == 0 || self.heads * self.head_dim != self.embed_dim {
            return Err(Error::Config(format!(
                "heads ({}) x head_dim ({}) must equal embed_dim ({})",
                self.heads, self.head_dim, self.embed_dim
            )));
        }
        if self.conv_depth == 0 {
            return Err(Error::Config("conv_depth must be >= 1".into()));
        }
        if self.grouping == Grouping::Block2d {
            let side = (self.proximity as f64).sqrt().round() as usize;
            if side * side != self.proximity || !self.n.is_multiple_of(side) {
                return Err(Error::Config(format!(
                    "2d-block grouping needs proximity to be a square with side dividing N \
                     (proximity {}, N {})",
                    self.proximity, self.n
                )));
            }
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.n * self.n / self.proximity
    }

    /// Entity order such that consecutive runs of `proximity` form the groups.
    /// Identity for row-major grouping.
    pub fn group_order(&self) -> Vec<usize> {
        match self.grouping {
            Grouping::RowMajor => (0..self.n * self.n).collect(),
            Grouping::Block2d => {
                let side = (self.proximity as f64).sqrt().round() as usize;
                let blocks = self.n / side;
                let mut order = Vec::with_capacity(self.n * self.n);
                for br in 0..blocks {
                    for bc in 0..blocks {
                        for y in 0..side {
                            for x in 0..side {
                                order.push((br * side + y) * self.n + bc * side + x);
                            }
                        }
                    }
                }
                order
            }
        }
    }

    /// Closed-form forward MUL-ADD count for one `[3, h, w]` image.
    pub fn mul_add_cost(&self, h: usize, w: usize) -> u64 {
        let (eh, ew) = ((h / self.n) as u64, (w / self.n) as u64);
        let plane = eh * ew;
        let c = self.embed_dim as u64;
        let mut per_entity = 0u64;
        let mut in_ch = 3u64;
        for _ in 0..self.conv_depth {
            per_entity += in_ch * 9 * plane; // depthwise 3x3, stride 1, pad 1
            per_entity += c * in_ch * plane; // pointwise 1x1
            in_ch = c;
        }
        let tokens = (self.n * self.n) as u64;
        let embed = per_entity * tokens;

        let (p, d, heads) = (self.proximity as u64, self.head_dim as u64, self.heads as u64);
        let per_head = 3 * p * d * c + 2 * p * p * d; // Q,K,V projections + QK^T + AV
        let attention = per_head * heads * self.groups() as u64;

        let head = tokens * c; // objectiveness head, C -> 1 per token
        embed + attention + head
    }
}

impl Default for GLSAConfig {
    fn default() -> Self {
        GLSAConfig {
            n: 4,
            embed_dim: 32,
            proximity: 4,
            heads: 4,
            head_dim: 8,
            conv_depth: 2,
            grouping: Grouping::RowMajor,
        }
    }
}

/// The GLSA module: one shared convolution stack (applied to every entity),
/// per-head projections, and the sigmoid objectiveness head. Parameter count
/// is independent of N.
#[derive(Debug, Clone)]
pub struct GLSAModel {
    pub config: GLSAConfig,
    pub params: ParamSet<f32>,
}

impl GLSAModel {
    pub fn new(config: GLSAConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in param_shapes(&config) {
            params.insert(&name, Tensor::zeros(shape))?;
        }
        params.kaiming_init(seed);
        Ok(GLSAModel { config, params })
    }

    pub fn byte_size(&self) -> u64 {
        self.params.byte_size()
    }

    /// Replace parameter values from a loaded set; names and shapes must
    /// match this model's architecture exactly.
    pub fn load_params(&mut self, loaded: &ParamSet<f32>) -> Result<()> {
        if loaded.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, GLSA model expects {}",
                loaded.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in loaded.iter() {
            let target = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Data(format!("checkpoint tensor {name:?} not in GLSA model")))?;
            if target.shape() != tensor.shape() {
                return Err(Error::Dimension(format!(
                    "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    target.shape()
                )));
            }
            let keep = target.requires_grad;
            *target = tensor.clone();
            target.requires_grad = keep;
            target.grad = None;
        }
        Ok(())
    }

    /// Per-grid objectiveness scores in (0,1), row-major.
    pub fn forward(&self, image: &Tensor<f32>) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let scores = self.scores_on_tape(&mut tape, image)?;
        Ok(tape.data(scores).to_vec())
    }

    /// Build the forward pass on an existing tape with frozen parameters
    /// (used by the classifier so GLSA MUL-ADDs land on the same counter).
    pub fn scores_on_tape(&self, tape: &mut Tape<f32>, image: &Tensor<f32>) -> Result<TensorId> {
        let binding = self.params.bind(tape, false);
        forward_scores(tape, image, &binding, &self.config)
    }

    /// Minimize mean BCE between forward scores and the grid targets with
    /// SGD + momentum. Returns the mean loss of each epoch (computed from the
    /// pre-step forward passes). Deterministic for a fixed seed.
    pub fn train(
        &mut self,
        data: &[(Tensor<f32>, ObjectivenessTargets)],
        opts: &TrainOpts,
    ) -> Result<Vec<f32>> {
        if data.is_empty() {
            return Err(Error::Config("GLSA training set is empty".into()));
        }
        let shape = data[0].0.shape().to_vec();
        for (img, t) in data {
            if img.shape() != shape {
                return Err(Error::Data(format!(
                    "GLSA training images must share one shape: {:?} vs {:?}",
                    shape,
                    img.shape()
                )));
            }
            if t.values.len() != self.config.n * self.config.n {
                return Err(Error::Dimension(format!(
                    "targets have {} entries, expected N^2 = {}",
                    t.values.len(),
                    self.config.n * self.config.n
                )));
            }
        }

        let mut optim = SgdMomentum::new(opts.lr, opts.momentum);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = SplitMix64::new(opts.seed);
        let mut history = Vec::with_capacity(opts.epochs);
        let batch_size = opts.batch_size.max(1);
        for _ in 0..opts.epochs {
            shuffle(&mut rng, &mut order);
            let mut epoch_loss = 0.0f64;
            for batch in order.chunks(batch_size) {
                let params = &self.params;
                let config = &self.config;
                let results: Vec<(f32, BTreeMap<String, Vec<f32>>)> = batch
                    .par_iter()
                    .map(|&i| {
                        let (image, targets) = &data[i];
                        let mut tape = Tape::<f32>::new();
                        let binding = params.bind(&mut tape, true);
                        let scores = forward_scores(&mut tape, image, &binding, config)?;
                        let t = tape.leaf(&targets.as_tensor());
                        let loss = tape.bce(scores, t)?;
                        let value = tape.scalar_value(loss);
                        tape.backward(loss)?;
                        Ok((value, binding.harvest_grads(&tape)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                epoch_loss += results.iter().map(|(l, _)| *l as f64).sum::<f64>();
                let averaged = average_grads(results.iter().map(|(_, g)| g), batch.len());
                self.params.accumulate_grads(&averaged)?;
                optim.step(&mut self.params)?;
            }
            history.push((epoch_loss / data.len() as f64) as f32);
        }
        Ok(history)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
}

/// Average per-sample gradient maps in deterministic (name, sample) order.
pub(crate) fn average_grads<'a>(
    maps: impl Iterator<Item = &'a BTreeMap<String, Vec<f32>>>,
    count: usize,
) -> BTreeMap<String, Vec<f32>> {
    let mut acc: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for map in maps {
        for (name, g) in map {
            match acc.get_mut(name) {
                Some(a) => {
                    for (x, v) in a.iter_mut().zip(g) {
                        *x += v;
                    }
                }
                None => {
                    acc.insert(name.clone(), g.clone());
                }
            }
        }
    }
    let inv = 1.0 / count as f32;
    for g in acc.values_mut() {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    acc
}

fn param_shapes(config: &GLSAConfig) -> Vec<(String, Vec<usize>)> {
    let c = config.embed_dim;
    let mut shapes = Vec::new();
    let mut in_ch = 3usize;
    for i in 0..config.conv_depth {
        shapes.push((format!("embed.block{i}.dw.weight"), vec![in_ch, 3, 3]));
        shapes.push((format!("embed.block{i}.dw.bias"), vec![in_ch]));
        shapes.push((format!("embed.block{i}.pw.weight"), vec![c, in_ch, 1, 1]));
        shapes.push((format!("embed.block{i}.pw.bias"), vec![c]));
        in_ch = c;
    }
    for j in 0..config.heads {
        // Projections are C x head_dim in the math (Q = F W); stored
        // transposed as [head_dim, C] to match the linear-op layout.
        shapes.push((format!("attn.h{j}.wq"), vec![config.head_dim, c]));
        shapes.push((format!("attn.h{j}.wk"), vec![config.head_dim, c]));
        shapes.push((format!("attn.h{j}.wv"), vec![config.head_dim, c]));
    }
    shapes.push(("head.weight".into(), vec![1, c]));
    shapes.push(("head.bias".into(), vec![1]));
    shapes
}

/// Embed every entity through the shared conv stack: `conv_depth` blocks of
/// (depthwise 3x3, stride 1, pad 1 -> relu -> pointwise 1x1 widening to C),
/// then global average pooling. Returns the `[N^2, C]` token matrix; token e
/// depends only on entity e's pixels.
pub fn entity_embed<T: Scalar>(
    tape: &mut Tape<T>,
    partition: &GridPartition<T>,
    binding: &TapeBinding,
    config: &GLSAConfig,
) -> Result<TensorId> {
    let first = partition.entities.first().ok_or_else(|| Error::Data("empty partition".into()))?;
    let (eh, ew) = (first.shape()[1], first.shape()[2]);
    if eh < 3 || ew < 3 {
        return Err(Error::Config(format!(
            "entity spatial extent {eh}x{ew} is smaller than the 3x3 depthwise kernel"
        )));
    }
    let c = config.embed_dim;
    let mut rows = Vec::with_capacity(partition.entities.len());
    for entity in &partition.entities {
        let mut x = tape.constant(entity);
        for i in 0..config.conv_depth {
            let dw = tape.depthwise_conv2d(
                x,
                binding.id(&format!("embed.block{i}.dw.weight")),
                Some(binding.id(&format!("embed.block{i}.dw.bias"))),
                1,
                1,
            )?;
            let act = tape.relu(dw);
            x = tape.conv2d(
                act,
                binding.id(&format!("embed.block{i}.pw.weight")),
                Some(binding.id(&format!("embed.block{i}.pw.bias"))),
                1,
                0,
            )?;
        }
        let pooled = tape.global_avg_pool(x)?;
        rows.push(tape.reshape(pooled, &[1, c])?);
    }
    tape.concat(&rows, 0)
}

/// Proximity-grouped multi-head self-attention over the `[N^2, C]` token
/// matrix. Tokens are split into `g = N^2 / §` groups; inside each group and
/// head, `softmax(Q K^T / sqrt(d)) V`; heads concatenate back to width C; no
/// information crosses group boundaries. Output rows keep the input order.
pub fn grouped_attention<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: TensorId,
    binding: &TapeBinding,
    config: &GLSAConfig,
) -> Result<TensorId> {
    config.validate()?;
    let tokens_n = config.n * config.n;
    if tape.shape(tokens) != [tokens_n, config.embed_dim] {
        return Err(Error::Dimension(format!(
            "expected token matrix [{tokens_n}, {}], got {:?}",
            config.embed_dim,
            tape.shape(tokens)
        )));
    }
    let p = config.proximity;
    let order = config.group_order();
    let identity = order.iter().enumerate().all(|(i, &o)| i == o);
    let scale = T::from_f64(1.0 / (config.head_dim as f64).sqrt());

    let mut group_outputs = Vec::with_capacity(config.groups());
    for g in 0..config.groups() {
        let members = &order[g * p..(g + 1) * p];
        let rows = if identity {
            tape.crop(tokens, &[g * p, 0], &[p, config.embed_dim])?
        } else {
            let picked: Vec<TensorId> = members
                .iter()
                .map(|&m| tape.crop(tokens, &[m, 0], &[1, config.embed_dim]))
                .collect::<Result<_>>()?;
            tape.concat(&picked, 0)?
        };
        let mut heads = Vec::with_capacity(config.heads);
        for j in 0..config.heads {
            let (_, out) = head_attention(tape, rows, binding, j, scale)?;
            heads.push(out);
        }
        group_outputs.push(tape.concat(&heads, 1)?);
    }

    if identity {
        tape.concat(&group_outputs, 0)
    } else {
        // Scatter rows back to the original entity order.
        let mut rows_by_entity = vec![None; tokens_n];
        for (g, &out) in group_outputs.iter().enumerate() {
            for (pos, &entity) in order[g * p..(g + 1) * p].iter().enumerate() {
                rows_by_entity[entity] = Some(tape.crop(out, &[pos, 0], &[1, config.embed_dim])?);
            }
        }
        let rows: Vec<TensorId> =
            rows_by_entity.into_iter().map(|r| r.expect("all rows set")).collect();
        tape.concat(&rows, 0)
    }
}

/// One attention head over a `[§, C]` group: returns the softmax weight
/// matrix (rows sum to 1) and the `[§, d]` output.
fn head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    rows: TensorId,
    binding: &TapeBinding,
    head: usize,
    scale: T,
) -> Result<(TensorId, TensorId)> {
    let q = tape.linear(rows, binding.id(&format!("attn.h{head}.wq")), None)?;
    let k = tape.linear(rows, binding.id(&format!("attn.h{head}.wk")), None)?;
    let v = tape.linear(rows, binding.id(&format!("attn.h{head}.wv")), None)?;
    let logits = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(logits, scale);
    let weights = tape.softmax(scaled);
    let out = tape.matmul(weights, v)?;
    Ok((weights, out))
}

/// The `[§, §]` softmax weight matrices of every (group, head) pair in
/// group-major order, computed through the same path as the forward pass.
pub fn attention_weights<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: TensorId,
    binding: &TapeBinding,
    config: &GLSAConfig,
) -> Result<Vec<TensorId>> {
    config.validate()?;
    let p = config.proximity;
    let order = config.group_order();
    let scale = T::from_f64(1.0 / (config.head_dim as f64).sqrt());
    let mut out = Vec::with_capacity(config.groups() * config.heads);
    for g in 0..config.groups() {
        let picked: Vec<TensorId> = order[g * p..(g + 1) * p]
            .iter()
            .map(|&m| tape.crop(tokens, &[m, 0], &[1, config.embed_dim]))
            .collect::<Result<_>>()?;
        let rows = tape.concat(&picked, 0)?;
        for j in 0..config.heads {
            let (weights, _) = head_attention(tape, rows, binding, j, scale)?;
            out.push(weights);
        }
    }
    Ok(out)
}

/// Full GLSA forward: partition -> entity embed -> grouped attention ->
/// per-token sigmoid objectiveness head. Returns a `[N^2]` score node.
pub fn forward_scores<T: Scalar>(
    tape: &mut Tape<T>,
    image: &Tensor<T>,
    binding: &TapeBinding,
    config: &GLSAConfig,
) -> Result<TensorId> {
    let partition = grid::partition(image, config.n)?;
    let tokens = entity_embed(tape, &partition, binding, config)?;
    let attended = grouped_attention(tape, tokens, binding, config)?;
    let logits = tape.linear(attended, binding.id("head.weight"), Some(binding.id("head.bias")))?;
    let flat = tape.reshape(logits, &[config.n * config.n])?;
    Ok(tape.sigmoid(flat))
}
