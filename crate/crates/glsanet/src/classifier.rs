//! Dual-branch classification: a global backbone over the whole image, a
//! local backbone over GLSA-sampled patches, concatenated embeddings
//! ([local, global]), and a linear head with softmax scores. Includes the
//! training loop, Table-style evaluation, the baseline variants, and
//! closed-form MUL-ADD accounting.

use crate::error::{Error, Result};
use crate::glsa::{average_grads, GLSAModel};
use crate::grid::{self, GridSpec};
use crate::rng::{shuffle, SplitMix64};
use crate::tensor::{ParamSet, Scalar, SgdMomentum, Tape, TapeBinding, Tensor, TensorId};
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Residual backbone architecture: a 3x3 stem at the first stage width, then
/// stages of basic blocks (two 3x3 convs with a projection shortcut where the
/// shape changes), global average pooling to the last stage width.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stage_widths: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl BackboneConfig {
    /// Desk-scale default: widths 16/32/64, one block per stage, each stage
    /// halving the resolution.
    pub fn small() -> Self {
        BackboneConfig {
            stage_widths: vec![16, 32, 64],
            stage_strides: vec![2, 2, 2],
            blocks_per_stage: 1,
        }
    }

    pub fn embed_dim(&self) -> usize {
        *self.stage_widths.last().expect("at least one stage")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.stage_strides.len() {
            return Err(Error::Config(format!(
                "backbone needs matching stage widths/strides, got {:?} / {:?}",
                self.stage_widths, self.stage_strides
            )));
        }
        if self.blocks_per_stage == 0 || self.stage_strides.contains(&0) {
            return Err(Error::Config("backbone blocks and strides must be >= 1".into()));
        }
        Ok(())
    }

    fn param_shapes(&self, input_channels: usize) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let w0 = self.stage_widths[0];
        shapes.push(("stem.weight".into(), vec![w0, input_channels, 3, 3]));
        shapes.push(("stem.bias".into(), vec![w0]));
        let mut in_ch = w0;
        for (s, (&width, &stride)) in self.stage_widths.iter().zip(&self.stage_strides).enumerate()
        {
            for b in 0..self.blocks_per_stage {
                let stride = if b == 0 { stride } else { 1 };
                let prefix = format!("stage{s}.block{b}");
                shapes.push((format!("{prefix}.conv1.weight"), vec![width, in_ch, 3, 3]));
                shapes.push((format!("{prefix}.conv1.bias"), vec![width]));
                shapes.push((format!("{prefix}.conv2.weight"), vec![width, width, 3, 3]));
                shapes.push((format!("{prefix}.conv2.bias"), vec![width]));
                if in_ch != width || stride != 1 {
                    shapes.push((format!("{prefix}.proj.weight"), vec![width, in_ch, 1, 1]));
                    shapes.push((format!("{prefix}.proj.bias"), vec![width]));
                }
                in_ch = width;
            }
        }
        shapes
    }

    /// Closed-form forward MUL-ADD count for one `[input_channels, h, w]` input.
    pub fn mul_add(&self, input_channels: usize, h: usize, w: usize) -> u64 {
        let mut total = 0u64;
        let (mut h, mut w) = (h as u64, w as u64);
        let w0 = self.stage_widths[0] as u64;
        total += w0 * input_channels as u64 * 9 * h * w; // stem, stride 1, pad 1
        let mut in_ch = w0;
        for (&width, &stride) in self.stage_widths.iter().zip(&self.stage_strides) {
            let width = width as u64;
            for b in 0..self.blocks_per_stage {
                let stride = if b == 0 { stride as u64 } else { 1 };
                let (ho, wo) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
                total += width * in_ch * 9 * ho * wo; // conv1
                total += width * width * 9 * ho * wo; // conv2
                if in_ch != width || stride != 1 {
                    total += width * in_ch * ho * wo; // 1x1 projection
                }
                in_ch = width;
                h = ho;
                w = wo;
            }
        }
        total
    }
}

/// Run the backbone on a `[C,H,W]` node under the given parameter prefix,
/// returning the pooled `[E]` embedding.
pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    input: TensorId,
    binding: &TapeBinding,
    prefix: &str,
    config: &BackboneConfig,
) -> Result<TensorId> {
    let p = |name: &str| format!("{prefix}.{name}");
    let stem = tape.conv2d(
        input,
        binding.id(&p("stem.weight")),
        Some(binding.id(&p("stem.bias"))),
        1,
        1,
    )?;
    let mut x = tape.relu(stem);
    let mut in_ch = config.stage_widths[0];
    for (s, (&width, &stage_stride)) in
        config.stage_widths.iter().zip(&config.stage_strides).enumerate()
    {
        for b in 0..config.blocks_per_stage {
            let stride = if b == 0 { stage_stride } else { 1 };
            let block = format!("stage{s}.block{b}");
            let c1 = tape.conv2d(
                x,
                binding.id(&p(&format!("{block}.conv1.weight"))),
                Some(binding.id(&p(&format!("{block}.conv1.bias")))),
                stride,
                1,
            )?;
            let a1 = tape.relu(c1);
            let c2 = tape.conv2d(
                a1,
                binding.id(&p(&format!("{block}.conv2.weight"))),
                Some(binding.id(&p(&format!("{block}.conv2.bias")))),
                1,
                1,
            )?;
            let shortcut = if in_ch != width || stride != 1 {
                tape.conv2d(
                    x,
                    binding.id(&p(&format!("{block}.proj.weight"))),
                    Some(binding.id(&p(&format!("{block}.proj.bias")))),
                    stride,
                    0,
                )?
            } else {
                x
            };
            let sum = tape.add(c2, shortcut)?;
            x = tape.relu(sum);
            in_ch = width;
        }
    }
    tape.global_avg_pool(x)
}

/// Model variants compared in the evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Global branch only; head input width E.
    Single,
    /// Dual branch, the full image feeding both backbones.
    Dbn,
    /// Dual branch with the local backbone fed GLSA-sampled patches.
    DbnGlsa,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Single => "single",
            Variant::Dbn => "dbn",
            Variant::DbnGlsa => "dbn-glsa",
        }
    }
}

/// How the S_n patch embeddings become one local embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalAggregation {
    /// Shared-weight backbone per patch, embeddings mean-pooled.
    ShareAndMean,
    /// Patches converted to grayscale and stacked as the input channels of a
    /// single backbone pass.
    StackChannels,
}

/// The classifier: frozen GLSA (when present), trainable local/global
/// backbones and linear head under the `local.` / `global.` / `head.`
/// parameter prefixes.
#[derive(Debug, Clone)]
pub struct DualBranchModel {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub glsa: Option<GLSAModel>,
    pub params: ParamSet<f32>,
    pub num_classes: usize,
    pub local_aggregation: LocalAggregation,
    local_input_channels: usize,
}

impl DualBranchModel {
    pub fn new(
        variant: Variant,
        backbone: BackboneConfig,
        glsa: Option<GLSAModel>,
        num_classes: usize,
        spec: &GridSpec,
        local_aggregation: LocalAggregation,
        seed: u64,
    ) -> Result<Self> {
        backbone.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        let mut glsa = glsa;
        if variant == Variant::DbnGlsa && glsa.is_none() {
            return Err(Error::Config("dbn-glsa requires a GLSA model".into()));
        }
        if variant != Variant::DbnGlsa {
            glsa = None;
        }
        // The GLSA module is a frozen feature extractor here.
        if let Some(g) = glsa.as_mut() {
            g.params.set_requires_grad(false);
        }

        let local_input_channels = match (variant, local_aggregation) {
            (Variant::DbnGlsa, LocalAggregation::StackChannels) => spec.s_n,
            _ => 3,
        };
        let e = backbone.embed_dim();
        let head_in = match variant {
            Variant::Single => e,
            Variant::Dbn | Variant::DbnGlsa => 2 * e,
        };

        let mut params = ParamSet::new();
        for (name, shape) in backbone.param_shapes(3) {
            params.insert(&format!("global.{name}"), Tensor::zeros(shape))?;
        }
        if variant != Variant::Single {
            for (name, shape) in backbone.param_shapes(local_input_channels) {
                params.insert(&format!("local.{name}"), Tensor::zeros(shape))?;
            }
        }
        params.insert("head.weight", Tensor::zeros(vec![num_classes, head_in]))?;
        params.insert("head.bias", Tensor::zeros(vec![num_classes]))?;
        params.kaiming_init(seed);

        Ok(DualBranchModel {
            variant,
            backbone,
            glsa,
            params,
            num_classes,
            local_aggregation,
            local_input_channels,
        })
    }

    /// Logits for one image on the given tape. GLSA runs with frozen
    /// parameters on the same tape, so its MUL-ADDs are counted.
    pub fn forward_logits_on_tape(
        &self,
        tape: &mut Tape<f32>,
        image: &Tensor<f32>,
        spec: &GridSpec,
        trainable: bool,
    ) -> Result<TensorId> {
        Ok(self.forward_with_binding(tape, image, spec, trainable)?.0)
    }

    /// As [`Self::forward_logits_on_tape`], also returning the parameter
    /// binding so gradients can be harvested after backward.
    pub fn forward_with_binding(
        &self,
        tape: &mut Tape<f32>,
        image: &Tensor<f32>,
        spec: &GridSpec,
        trainable: bool,
    ) -> Result<(TensorId, TapeBinding)> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Dimension(format!("expected [3,H,W] image, got {s:?}")));
        }
        let binding = self.params.bind(tape, trainable);
        let img_id = tape.constant(image);
        let global_emb = backbone_forward(tape, img_id, &binding, "global", &self.backbone)?;

        let local_emb = match self.variant {
            Variant::Single => None,
            Variant::Dbn => {
                Some(backbone_forward(tape, img_id, &binding, "local", &self.backbone)?)
            }
            Variant::DbnGlsa => {
                let glsa = self.glsa.as_ref().expect("checked at construction");
                let scores_id = glsa.scores_on_tape(tape, image)?;
                let scores = tape.data(scores_id).to_vec();
                let patches = grid::sample_patches(image, &scores, spec)?;
                Some(self.local_embedding(tape, &binding, &patches)?)
            }
        };

        let features = match local_emb {
            Some(local) => tape.concat(&[local, global_emb], 0)?, // [X^local, X^global]
            None => global_emb,
        };
        let logits =
            tape.linear(features, binding.id("head.weight"), Some(binding.id("head.bias")))?;
        Ok((logits, binding))
    }

    fn local_embedding(
        &self,
        tape: &mut Tape<f32>,
        binding: &TapeBinding,
        patches: &grid::PatchSet,
    ) -> Result<TensorId> {
        match self.local_aggregation {
            LocalAggregation::ShareAndMean => {
                let mut acc: Option<TensorId> = None;
                for patch in &patches.patches {
                    let pid = tape.constant(patch);
                    let emb = backbone_forward(tape, pid, binding, "local", &self.backbone)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, emb)?,
                        None => emb,
                    });
                }
                let total = acc.ok_or_else(|| Error::Config("no patches sampled".into()))?;
                Ok(tape.scale(total, 1.0 / patches.patches.len() as f32))
            }
            LocalAggregation::StackChannels => {
                let mut channels = Vec::with_capacity(patches.patches.len());
                for patch in &patches.patches {
                    let pid = tape.constant(patch);
                    let gray = tape.mean_axes(pid, &[0])?;
                    let shape = tape.shape(gray).to_vec();
                    channels.push(tape.reshape(gray, &[1, shape[0], shape[1]])?);
                }
                let stacked = tape.concat(&channels, 0)?;
                backbone_forward(tape, stacked, binding, "local", &self.backbone)
            }
        }
    }

    /// Logits computed from an image node that already lives on the tape,
    /// with parameters bound as constants. This is the differentiable-in-the-
    /// image path used for saliency extraction; it exists for the
    /// single-branch model only (patch sampling is not differentiable).
    pub fn logits_from_image_node(
        &self,
        tape: &mut Tape<f32>,
        image_node: TensorId,
    ) -> Result<TensorId> {
        if self.variant != Variant::Single {
            return Err(Error::Contract(
                "input-gradient scoring requires the single-branch model".into(),
            ));
        }
        let binding = self.params.bind(tape, false);
        let emb = backbone_forward(tape, image_node, &binding, "global", &self.backbone)?;
        tape.linear(emb, binding.id("head.weight"), Some(binding.id("head.bias")))
    }

    /// Softmax class probabilities for one image.
    pub fn classify(&self, image: &Tensor<f32>, spec: &GridSpec) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let logits = self.forward_logits_on_tape(&mut tape, image, spec, false)?;
        let probs = tape.softmax(logits);
        Ok(tape.data(probs).to_vec())
    }

    /// Trainable parameter bytes (TPs).
    pub fn trainable_bytes(&self) -> u64 {
        self.params.byte_size()
    }

    /// Non-trainable parameter bytes (NTPs): the frozen GLSA.
    pub fn frozen_bytes(&self) -> u64 {
        self.glsa.as_ref().map_or(0, |g| g.byte_size())
    }

    /// Closed-form forward MUL-ADD count for one `[3, h, w]` image,
    /// independent of the tape counter.
    pub fn mul_add_closed_form(&self, spec: &GridSpec, h: usize, w: usize) -> u64 {
        let e = self.backbone.embed_dim() as u64;
        let k = self.num_classes as u64;
        let global = self.backbone.mul_add(3, h, w);
        match self.variant {
            Variant::Single => global + k * e,
            Variant::Dbn => global + self.backbone.mul_add(3, h, w) + k * 2 * e,
            Variant::DbnGlsa => {
                let glsa = self.glsa.as_ref().expect("checked at construction");
                let local = match self.local_aggregation {
                    LocalAggregation::ShareAndMean => {
                        spec.s_n as u64 * self.backbone.mul_add(3, spec.s_h, spec.s_w)
                    }
                    LocalAggregation::StackChannels => {
                        self.backbone.mul_add(self.local_input_channels, spec.s_h, spec.s_w)
                    }
                };
                global + glsa.config.mul_add_cost(h, w) + local + k * 2 * e
            }
        }
    }

    /// All parameters as one checkpointable set: `local.*`, `global.*`,
    /// `head.*`, and `glsa.*`.
    pub fn checkpoint_params(&self) -> ParamSet<f32> {
        let mut all = self.params.clone();
        if let Some(g) = &self.glsa {
            all.insert_prefixed("glsa", &g.params).expect("prefixes are disjoint");
        }
        all
    }

    /// Replace parameter values from a checkpoint produced by
    /// [`Self::checkpoint_params`]. Shapes must match the architecture.
    pub fn load_checkpoint_params(&mut self, loaded: &ParamSet<f32>) -> Result<()> {
        for (name, tensor) in loaded.iter() {
            let target = if let Some(rest) = name.strip_prefix("glsa.") {
                self.glsa
                    .as_mut()
                    .ok_or_else(|| {
                        Error::Data(format!("checkpoint has {name:?} but variant has no GLSA"))
                    })?
                    .params
                    .get_mut(rest)
            } else {
                self.params.get_mut(name)
            };
            let target = target
                .ok_or_else(|| Error::Data(format!("checkpoint tensor {name:?} not in model")))?;
            if target.shape() != tensor.shape() {
                return Err(Error::Dimension(format!(
                    "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    target.shape()
                )));
            }
            let keep_grad_flag = target.requires_grad;
            *target = tensor.clone();
            target.requires_grad = keep_grad_flag;
            target.grad = None;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FitHistory {
    /// Mean cross-entropy per epoch (pre-step forward passes).
    pub loss: Vec<f32>,
    /// Training top-1 accuracy per epoch, percent.
    pub accuracy: Vec<f64>,
}

/// Train the local/global backbones and head with cross entropy on the
/// logits; the GLSA module stays byte-identical. Deterministic per seed.
pub fn train_classifier(
    model: &mut DualBranchModel,
    data: &[(Tensor<f32>, usize)],
    spec: &GridSpec,
    opts: &FitOpts,
) -> Result<FitHistory> {
    if data.is_empty() {
        return Err(Error::Config("classifier training set is empty".into()));
    }
    for (i, (_, label)) in data.iter().enumerate() {
        if *label >= model.num_classes {
            return Err(Error::Data(format!(
                "sample {i} has label {label} >= number of classes {}",
                model.num_classes
            )));
        }
    }
    let mut optim = SgdMomentum::new(opts.lr, opts.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = SplitMix64::new(opts.seed);
    let mut history = FitHistory { loss: Vec::new(), accuracy: Vec::new() };
    let batch_size = opts.batch_size.max(1);
    for _ in 0..opts.epochs {
        shuffle(&mut rng, &mut order);
        let mut epoch_loss = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(batch_size) {
            let m = &*model;
            let results: Vec<(f32, bool, BTreeMap<String, Vec<f32>>)> = batch
                .par_iter()
                .map(|&i| {
                    let (image, label) = &data[i];
                    let mut tape = Tape::<f32>::new();
                    let (logits, binding) = m.forward_with_binding(&mut tape, image, spec, true)?;
                    let predicted = argmax(tape.data(logits));
                    let loss = tape.cross_entropy(logits, *label)?;
                    let value = tape.scalar_value(loss);
                    tape.backward(loss)?;
                    // The GLSA subgraph is bound constant and contributes no
                    // gradients; only the trainable set is harvested.
                    Ok((value, predicted == *label, binding.harvest_grads(&tape)))
                })
                .collect::<Result<Vec<_>>>()?;
            epoch_loss += results.iter().map(|(l, _, _)| *l as f64).sum::<f64>();
            correct += results.iter().filter(|(_, ok, _)| *ok).count();
            let averaged = average_grads(results.iter().map(|(_, _, g)| g), batch.len());
            model.params.accumulate_grads(&averaged)?;
            optim.step(&mut model.params)?;
        }
        history.loss.push((epoch_loss / data.len() as f64) as f32);
        history.accuracy.push(100.0 * correct as f64 / data.len() as f64);
    }
    Ok(history)
}

fn argmax(values: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Table-style evaluation report.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_class_top1: Vec<f64>,
    pub per_class_counts: Vec<usize>,
    pub overall_top1: f64,
    pub mul_add: u64,
    pub tp_bytes: u64,
    pub ntp_bytes: u64,
}

/// Top-1 accuracy per class and overall (argmax, ties to the lowest index),
/// MUL-ADD measured by one counted forward pass, and the parameter byte
/// split into trainable (TPs) and frozen (NTPs).
pub fn evaluate(
    model: &DualBranchModel,
    data: &[(Tensor<f32>, usize)],
    spec: &GridSpec,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mul_add = {
        let mut tape = Tape::<f32>::new();
        let _ = model.forward_logits_on_tape(&mut tape, &data[0].0, spec, false)?;
        tape.counter().total()
    };
    let predictions: Vec<usize> = data
        .par_iter()
        .map(|(image, _)| {
            let mut tape = Tape::<f32>::new();
            let logits = model.forward_logits_on_tape(&mut tape, image, spec, false)?;
            Ok(argmax(tape.data(logits)))
        })
        .collect::<Result<Vec<_>>>()?;

    let labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
    let (per_class_top1, per_class_counts, overall_top1) =
        tally(&predictions, &labels, model.num_classes);
    Ok(EvalReport {
        per_class_top1,
        per_class_counts,
        overall_top1,
        mul_add,
        tp_bytes: model.trainable_bytes(),
        ntp_bytes: model.frozen_bytes(),
    })
}

/// Per-class and overall top-1 percentages from (prediction, label) pairs.
fn tally(predictions: &[usize], labels: &[usize], k: usize) -> (Vec<f64>, Vec<usize>, f64) {
    let mut per_class_counts = vec![0usize; k];
    let mut per_class_correct = vec![0usize; k];
    let mut correct = 0usize;
    for (&pred, &label) in predictions.iter().zip(labels) {
        per_class_counts[label] += 1;
        if pred == label {
            per_class_correct[label] += 1;
            correct += 1;
        }
    }
    let per_class_top1 = per_class_correct
        .iter()
        .zip(&per_class_counts)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 })
        .collect();
    (per_class_top1, per_class_counts, 100.0 * correct as f64 / labels.len() as f64)
}

/// Build the three comparison models with a shared backbone architecture and
/// seed: single-branch, DBN (full image on both branches), and DBN-GLSA.
pub fn baseline_variants(
    backbone: &BackboneConfig,
    glsa: &GLSAModel,
    num_classes: usize,
    spec: &GridSpec,
    local_aggregation: LocalAggregation,
    seed: u64,
) -> Result<Vec<DualBranchModel>> {
    Ok(vec![
        DualBranchModel::new(
            Variant::Single,
            backbone.clone(),
            None,
            num_classes,
            spec,
            local_aggregation,
            seed,
        )?,
        DualBranchModel::new(
            Variant::Dbn,
            backbone.clone(),
            None,
            num_classes,
            spec,
            local_aggregation,
            seed,
        )?,
        DualBranchModel::new(
            Variant::DbnGlsa,
            backbone.clone(),
            Some(glsa.clone()),
            num_classes,
            spec,
            local_aggregation,
            seed,
        )?,
    ])
}
