//! Acceptance suite. One test per criterion; each prints a `[criterion] ...`
//! line with its measured runtime and asserts both the property and the
//! runtime budget.

use glsanet::classifier::{
    backbone_forward, evaluate, train_classifier, DualBranchModel, FitOpts, LocalAggregation,
    Variant,
};
use glsanet::config::RunConfig;
use glsanet::glsa::{self, GLSAConfig, GLSAModel, Grouping, TrainOpts};
use glsanet::grid::{self, ObjectivenessTargets};
use glsanet::io::{checkpoint, metrics, pnm};
use glsanet::rng::SplitMix64;
use glsanet::saliency;
use glsanet::synth;
use glsanet::tensor::gradcheck::{self, check_case, GradCase};
use glsanet::tensor::{ParamSet, Scalar, Tape, TapeBinding, Tensor, TensorId};
use glsanet::Result;
use std::collections::BTreeMap;
use std::time::Instant;

// ===================================================================
// Criterion 1: gradient suite
// ===================================================================

/// One differentiable operation under test, with whatever constants it needs.
enum OpCase {
    Add,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Sigmoid,
    Softmax,
    SumAll,
    Linear { bias: bool },
    Matmul,
    MatmulNT,
    Conv2d { stride: usize, pad: usize, bias: bool },
    Depthwise { stride: usize, pad: usize, bias: bool },
    MeanAxes(Vec<usize>),
    GlobalAvgPool,
    Concat(usize),
    Crop { offsets: Vec<usize>, sizes: Vec<usize> },
    Reshape(Vec<usize>),
    Bce { target: Vec<f64> },
    CrossEntropy { class: usize },
}

impl GradCase for OpCase {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, xs: &[TensorId]) -> Result<TensorId> {
        match self {
            OpCase::Add => tape.add(xs[0], xs[1]),
            OpCase::Mul => tape.mul(xs[0], xs[1]),
            OpCase::Scale(c) => Ok(tape.scale(xs[0], T::from_f64(*c))),
            OpCase::AddScalar(c) => Ok(tape.add_scalar(xs[0], T::from_f64(*c))),
            OpCase::Relu => Ok(tape.relu(xs[0])),
            OpCase::Sigmoid => Ok(tape.sigmoid(xs[0])),
            OpCase::Softmax => Ok(tape.softmax(xs[0])),
            OpCase::SumAll => Ok(tape.sum_all(xs[0])),
            OpCase::Linear { bias } => {
                tape.linear(xs[0], xs[1], bias.then(|| xs[2]))
            }
            OpCase::Matmul => tape.matmul(xs[0], xs[1]),
            OpCase::MatmulNT => tape.matmul_nt(xs[0], xs[1]),
            OpCase::Conv2d { stride, pad, bias } => {
                tape.conv2d(xs[0], xs[1], bias.then(|| xs[2]), *stride, *pad)
            }
            OpCase::Depthwise { stride, pad, bias } => {
                tape.depthwise_conv2d(xs[0], xs[1], bias.then(|| xs[2]), *stride, *pad)
            }
            OpCase::MeanAxes(axes) => tape.mean_axes(xs[0], axes),
            OpCase::GlobalAvgPool => tape.global_avg_pool(xs[0]),
            OpCase::Concat(axis) => tape.concat(xs, *axis),
            OpCase::Crop { offsets, sizes } => tape.crop(xs[0], offsets, sizes),
            OpCase::Reshape(shape) => tape.reshape(xs[0], shape),
            OpCase::Bce { target } => {
                let t: Vec<T> = target.iter().map(|&v| T::from_f64(v)).collect();
                let shape = tape.shape(xs[0]).to_vec();
                let tid = tape.leaf(&Tensor::new(shape, t)?);
                tape.bce(xs[0], tid)
            }
            OpCase::CrossEntropy { class } => tape.cross_entropy(xs[0], *class),
        }
    }
}

fn dims(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.next_below(hi - lo + 1)
}

/// Build the (case, shapes, data) triple for iteration `i` of op family `op`.
fn random_case(op: &str, i: u64) -> (OpCase, Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let mut rng = SplitMix64::new(0xACC0 + i * 1913 + op.len() as u64 * 7919);
    let (case, shapes) = match op {
        "add" | "mul" => {
            let s = vec![dims(&mut rng, 1, 4), dims(&mut rng, 1, 5)];
            (if op == "add" { OpCase::Add } else { OpCase::Mul }, vec![s.clone(), s])
        }
        "scale" => (OpCase::Scale(rng.next_range(-2.0, 2.0)), vec![vec![dims(&mut rng, 2, 8)]]),
        "add_scalar" => {
            (OpCase::AddScalar(rng.next_range(-2.0, 2.0)), vec![vec![dims(&mut rng, 2, 8)]])
        }
        "relu" => (OpCase::Relu, vec![vec![dims(&mut rng, 2, 4), dims(&mut rng, 2, 4)]]),
        "sigmoid" => (OpCase::Sigmoid, vec![vec![dims(&mut rng, 2, 8)]]),
        "softmax" => {
            (OpCase::Softmax, vec![vec![dims(&mut rng, 1, 3), dims(&mut rng, 2, 5)]])
        }
        "sum_all" => (OpCase::SumAll, vec![vec![dims(&mut rng, 2, 8)]]),
        "linear" => {
            let (b, din, dout) = (dims(&mut rng, 1, 3), dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
            let bias = rng.next_below(2) == 0;
            let mut shapes = vec![vec![b, din], vec![dout, din]];
            if bias {
                shapes.push(vec![dout]);
            }
            (OpCase::Linear { bias }, shapes)
        }
        "matmul" => {
            let (m, k, n) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
            (OpCase::Matmul, vec![vec![m, k], vec![k, n]])
        }
        "matmul_nt" => {
            let (m, k, n) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
            (OpCase::MatmulNT, vec![vec![m, k], vec![n, k]])
        }
        "conv2d" => {
            let (ci, co) = (dims(&mut rng, 1, 3), dims(&mut rng, 1, 3));
            let (kh, kw) = (dims(&mut rng, 1, 3), dims(&mut rng, 1, 3));
            let pad = rng.next_below(2);
            let h = dims(&mut rng, kh.saturating_sub(2 * pad).max(1), 6);
            let w = dims(&mut rng, kw.saturating_sub(2 * pad).max(1), 6);
            let stride = dims(&mut rng, 1, 2);
            let bias = rng.next_below(2) == 0;
            let mut shapes = vec![vec![ci, h, w], vec![co, ci, kh, kw]];
            if bias {
                shapes.push(vec![co]);
            }
            (OpCase::Conv2d { stride, pad, bias }, shapes)
        }
        "depthwise_conv2d" => {
            let c = dims(&mut rng, 1, 3);
            let (kh, kw) = (dims(&mut rng, 1, 3), dims(&mut rng, 1, 3));
            let pad = rng.next_below(2);
            let h = dims(&mut rng, kh.saturating_sub(2 * pad).max(1), 6);
            let w = dims(&mut rng, kw.saturating_sub(2 * pad).max(1), 6);
            let stride = dims(&mut rng, 1, 2);
            let bias = rng.next_below(2) == 0;
            let mut shapes = vec![vec![c, h, w], vec![c, kh, kw]];
            if bias {
                shapes.push(vec![c]);
            }
            (OpCase::Depthwise { stride, pad, bias }, shapes)
        }
        "mean_axes" => {
            let rank = dims(&mut rng, 1, 3);
            let shape: Vec<usize> = (0..rank).map(|_| dims(&mut rng, 1, 4)).collect();
            let mut axes: Vec<usize> = (0..rank).filter(|_| rng.next_below(2) == 0).collect();
            if axes.is_empty() {
                axes.push(rng.next_below(rank));
            }
            (OpCase::MeanAxes(axes), vec![shape])
        }
        "global_avg_pool" => {
            let shape = vec![dims(&mut rng, 1, 3), dims(&mut rng, 1, 4), dims(&mut rng, 1, 4)];
            (OpCase::GlobalAvgPool, vec![shape])
        }
        "concat" => {
            let rank = dims(&mut rng, 1, 3);
            let axis = rng.next_below(rank);
            let base: Vec<usize> = (0..rank).map(|_| dims(&mut rng, 1, 3)).collect();
            let parts = dims(&mut rng, 2, 3);
            let shapes: Vec<Vec<usize>> = (0..parts)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = dims(&mut rng, 1, 3);
                    s
                })
                .collect();
            (OpCase::Concat(axis), shapes)
        }
        "crop" => {
            let rank = dims(&mut rng, 1, 3);
            let shape: Vec<usize> = (0..rank).map(|_| dims(&mut rng, 2, 5)).collect();
            let sizes: Vec<usize> = shape.iter().map(|&d| dims(&mut rng, 1, d)).collect();
            let offsets: Vec<usize> =
                shape.iter().zip(&sizes).map(|(&d, &s)| rng.next_below(d - s + 1)).collect();
            (OpCase::Crop { offsets, sizes }, vec![shape])
        }
        "reshape" => {
            let (a, b) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
            (OpCase::Reshape(vec![b, a]), vec![vec![a, b]])
        }
        "bce" => {
            let n = dims(&mut rng, 2, 8);
            let target: Vec<f64> = (0..n).map(|_| rng.next_below(2) as f64).collect();
            (OpCase::Bce { target }, vec![vec![n]])
        }
        "cross_entropy" => {
            let k = dims(&mut rng, 2, 6);
            (OpCase::CrossEntropy { class: rng.next_below(k) }, vec![vec![k]])
        }
        other => panic!("unknown op family {other}"),
    };
    let mut data = gradcheck::random_inputs(&shapes, 0xDA7A + i * 31 + op.len() as u64);
    // Keep finite-difference probes away from non-smooth points.
    match op {
        "relu" => {
            for v in &mut data[0] {
                let sign = if *v >= 0.0 { 1.0 } else { -1.0 };
                *v = sign * (v.abs().max(0.05));
            }
        }
        "bce" => {
            for v in &mut data[0] {
                *v = 0.05 + 0.9 * (*v + 1.0) / 2.0; // into [0.05, 0.95]
            }
        }
        _ => {}
    }
    (case, shapes, data)
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let ops = [
        "add", "mul", "scale", "add_scalar", "relu", "sigmoid", "softmax", "sum_all", "linear",
        "matmul", "matmul_nt", "conv2d", "depthwise_conv2d", "mean_axes", "global_avg_pool",
        "concat", "crop", "reshape", "bce", "cross_entropy",
    ];
    let mut worst: (f64, &str) = (0.0, "");
    let mut total_checked = 0usize;
    for op in ops {
        for i in 0..20u64 {
            let (case, shapes, data) = random_case(op, i);
            let report = check_case(&case, &shapes, &data, 1e-3, 0x9AEE + i)
                .unwrap_or_else(|e| panic!("{op} case {i}: {e}"));
            total_checked += report.checked;
            if report.max_rel_err > worst.0 {
                worst = (report.max_rel_err, op);
            }
            assert!(
                report.max_rel_err < 1e-4,
                "{op} case {i}: max relative error {} >= 1e-4",
                report.max_rel_err
            );
        }
    }

    // Composed GLSA BCE loss: every model parameter against 64-bit central
    // differences at the looser composed tolerance.
    let config = GLSAConfig {
        n: 4,
        embed_dim: 8,
        proximity: 4,
        heads: 2,
        head_dim: 4,
        conv_depth: 2,
        grouping: Grouping::RowMajor,
    };
    let model = GLSAModel::new(config.clone(), 4242).unwrap();
    let mut img_rng = SplitMix64::new(777);
    let image: Vec<f64> = (0..3 * 16 * 16).map(|_| img_rng.next_f64()).collect();
    let mut target = vec![0.0f64; 16];
    for t in target.iter_mut().step_by(3) {
        *t = 1.0;
    }
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    let shapes: Vec<Vec<usize>> = model.params.iter().map(|(_, t)| t.shape().to_vec()).collect();
    let data: Vec<Vec<f64>> =
        model.params.iter().map(|(_, t)| t.data().iter().map(|&v| v as f64).collect()).collect();
    let case = GlsaLossCase { config, names, image, target };
    let report = check_case(&case, &shapes, &data, 1e-3, 31415).unwrap();
    total_checked += report.checked;
    assert!(
        report.max_rel_err < 1e-3,
        "composed GLSA loss: max relative error {} >= 1e-3",
        report.max_rel_err
    );

    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "[gradient-suite] PASS: {total_checked} partial derivatives checked, worst core-op \
         rel err {:.2e} ({}), composed GLSA rel err {:.2e}, {elapsed:.1}s",
        worst.0, worst.1, report.max_rel_err
    );
    assert!(elapsed < 60.0, "gradient suite took {elapsed:.1}s >= 60s");
}

/// Full GLSA forward + BCE as one gradient case over the parameter list.
struct GlsaLossCase {
    config: GLSAConfig,
    names: Vec<String>,
    image: Vec<f64>,
    target: Vec<f64>,
}

impl GradCase for GlsaLossCase {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, xs: &[TensorId]) -> Result<TensorId> {
        let ids: BTreeMap<String, TensorId> =
            self.names.iter().cloned().zip(xs.iter().copied()).collect();
        let binding = TapeBinding::from_ids(ids);
        let image = Tensor::new(
            vec![3, 16, 16],
            self.image.iter().map(|&v| T::from_f64(v)).collect(),
        )?;
        let scores = glsa::forward_scores(tape, &image, &binding, &self.config)?;
        let target = Tensor::new(
            vec![self.target.len()],
            self.target.iter().map(|&v| T::from_f64(v)).collect(),
        )?;
        let tid = tape.leaf(&target);
        tape.bce(scores, tid)
    }
}

// ===================================================================
// Criterion 2: saliency oracle
// ===================================================================

#[test]
fn criterion_2_saliency_oracle() {
    let start = Instant::now();
    let shape = vec![3usize, 8, 8];
    let mut rng = SplitMix64::new(20_2020);
    for trial in 0..10 {
        let w = Tensor::new(
            shape.clone(),
            (0..192).map(|_| rng.next_range(-1.0, 1.0) as f32).collect(),
        )
        .unwrap();
        let bias = rng.next_range(-1.0, 1.0) as f32;
        let img =
            Tensor::new(shape.clone(), (0..192).map(|_| rng.next_f64() as f32).collect()).unwrap();

        let w_for_model = w.clone();
        let forward = move |tape: &mut Tape<f32>, img: TensorId| {
            let wid = tape.constant(&w_for_model);
            let prod = tape.mul(wid, img)?;
            let s = tape.sum_all(prod);
            let sb = tape.add_scalar(s, bias);
            tape.reshape(sb, &[1])
        };
        let ig = saliency::input_gradient(forward, &img, None).unwrap();
        let map = saliency::saliency_map(&ig.grad, ig.class_index).unwrap();

        // independent oracle: channel-max |w|, then the same min-max rule
        let mut field = vec![0.0f32; 64];
        for (p, f) in field.iter_mut().enumerate() {
            for c in 0..3 {
                *f = f.max(w.data()[c * 64 + p].abs());
            }
        }
        let maxv = field.iter().cloned().fold(0.0f32, f32::max);
        let minv = field.iter().cloned().fold(f32::INFINITY, f32::min);
        for f in &mut field {
            *f = (*f - minv) / (maxv - minv);
        }
        for (p, (got, want)) in map.values.iter().zip(&field).enumerate() {
            assert!(
                (got - want).abs() < 1e-6,
                "trial {trial}, pixel {p}: {got} vs oracle {want}"
            );
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    println!("[saliency-oracle] PASS: 10 affine models, 64 pixels each, {elapsed:.2}s");
    assert!(elapsed < 5.0, "saliency oracle took {elapsed:.2}s >= 5s");
}

// ===================================================================
// Criterion 3: GLSA structural suite
// ===================================================================

fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.next_f64() as f32).collect()).unwrap()
}

#[test]
fn criterion_3_glsa_structural_suite() {
    let start = Instant::now();
    let config = GLSAConfig {
        n: 4,
        embed_dim: 16,
        proximity: 4,
        heads: 4,
        head_dim: 4,
        conv_depth: 2,
        grouping: Grouping::RowMajor,
    };
    // width check: N_h * d == C enforced, violations rejected
    assert_eq!(config.heads * config.head_dim, config.embed_dim);
    assert!(GLSAConfig { head_dim: 5, ..config.clone() }.validate().is_err());

    let model = GLSAModel::new(config.clone(), 333).unwrap();
    let image = random_image(16, 16, 334);

    // attention rows sum to 1 within 1e-6
    {
        let mut tape = Tape::<f32>::new();
        let binding = model.params.bind(&mut tape, false);
        let part = grid::partition(&image, config.n).unwrap();
        let tokens = glsa::entity_embed(&mut tape, &part, &binding, &config).unwrap();
        let weights = glsa::attention_weights(&mut tape, tokens, &binding, &config).unwrap();
        assert_eq!(weights.len(), config.groups() * config.heads);
        for &wid in &weights {
            let p = config.proximity;
            let data = tape.data(wid);
            assert_eq!(tape.shape(wid), &[p, p]);
            for row in 0..p {
                let sum: f32 = data[row * p..(row + 1) * p].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "attention row sum {sum}");
            }
        }
    }

    // exact group locality: perturbing an entity in group 2 leaves the
    // attended tokens of every other group bit-identical
    {
        let attended = |img: &Tensor<f32>| {
            let mut tape = Tape::<f32>::new();
            let binding = model.params.bind(&mut tape, false);
            let part = grid::partition(img, config.n).unwrap();
            let tokens = glsa::entity_embed(&mut tape, &part, &binding, &config).unwrap();
            let out = glsa::grouped_attention(&mut tape, tokens, &binding, &config).unwrap();
            tape.data(out).to_vec()
        };
        let base = attended(&image);
        let mut perturbed = image.clone();
        // entity 6 lives in group 1 (rows 4..8, cols 8..12)
        for ch in 0..3 {
            for y in 4..8 {
                for x in 8..12 {
                    perturbed.data_mut()[(ch * 16 + y) * 16 + x] = 1.0 - perturbed.at(&[ch, y, x]);
                }
            }
        }
        let changed = attended(&perturbed);
        let c = config.embed_dim;
        for row in 0..16 {
            let group = row / config.proximity;
            let same = base[row * c..(row + 1) * c] == changed[row * c..(row + 1) * c];
            if group == 1 {
                assert!(!same, "row {row} in the perturbed group did not change");
            } else {
                assert!(same, "row {row} outside the perturbed group changed");
            }
        }
    }

    // proximity = N^2 degenerates to full multi-head self-attention,
    // checked against an independent flat reference implementation
    {
        let full = GLSAConfig { proximity: 16, ..config.clone() };
        let mut tape = Tape::<f32>::new();
        let binding = model.params.bind(&mut tape, false);
        let part = grid::partition(&image, full.n).unwrap();
        let tokens_id = glsa::entity_embed(&mut tape, &part, &binding, &full).unwrap();
        let tokens: Vec<f32> = tape.data(tokens_id).to_vec();
        let out_id = glsa::grouped_attention(&mut tape, tokens_id, &binding, &full).unwrap();
        let got = tape.data(out_id).to_vec();

        let reference = reference_full_mhsa(&tokens, 16, &full, &model.params);
        assert_eq!(tape.shape(out_id), &[16, full.embed_dim]);
        for (i, (a, b)) in got.iter().zip(&reference).enumerate() {
            assert!((a - b).abs() < 1e-6, "element {i}: {a} vs reference {b}");
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "[glsa-structural] PASS: row sums, exact locality, width check, full-MHSA degeneracy, \
         {elapsed:.2}s"
    );
    assert!(elapsed < 30.0, "structural suite took {elapsed:.2}s >= 30s");
}

/// Plain-loop multi-head self-attention over all tokens (f64 accumulation),
/// independent of the tape implementation.
fn reference_full_mhsa(
    tokens: &[f32],
    rows: usize,
    config: &GLSAConfig,
    params: &ParamSet<f32>,
) -> Vec<f32> {
    let c = config.embed_dim;
    let d = config.head_dim;
    let mut out = vec![0.0f32; rows * c];
    for j in 0..config.heads {
        let wq = params.get(&format!("attn.h{j}.wq")).unwrap().data(); // [d, C]
        let wk = params.get(&format!("attn.h{j}.wk")).unwrap().data();
        let wv = params.get(&format!("attn.h{j}.wv")).unwrap().data();
        let project = |w: &[f32]| -> Vec<f64> {
            let mut p = vec![0.0f64; rows * d];
            for r in 0..rows {
                for o in 0..d {
                    let mut acc = 0.0f64;
                    for i in 0..c {
                        acc += tokens[r * c + i] as f64 * w[o * c + i] as f64;
                    }
                    p[r * d + o] = acc;
                }
            }
            p
        };
        let (q, k, v) = (project(wq), project(wk), project(wv));
        let scale = 1.0 / (d as f64).sqrt();
        for r in 0..rows {
            let mut logits = vec![0.0f64; rows];
            for (s, logit) in logits.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for o in 0..d {
                    acc += q[r * d + o] * k[s * d + o];
                }
                *logit = acc * scale;
            }
            let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - maxv).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for o in 0..d {
                let mut acc = 0.0f64;
                for s in 0..rows {
                    acc += exps[s] / denom * v[s * d + o];
                }
                out[r * c + j * d + o] = acc as f32;
            }
        }
    }
    out
}

// ===================================================================
// Criterion 4: GLSA learning check
// ===================================================================

#[test]
fn criterion_4_glsa_learning_check() {
    let start = Instant::now();
    let n = 4;
    let all = synth::generate_planted(250, 32, n, 7);
    let (train, held_out) = all.split_at(200);

    let as_targets = |set: &[(Tensor<f32>, usize)]| -> Vec<(Tensor<f32>, ObjectivenessTargets)> {
        set.iter()
            .map(|(img, grid)| {
                let mut values = vec![0u8; n * n];
                values[*grid] = 1;
                let source_scores = values.iter().map(|&v| v as f32).collect();
                (img.clone(), ObjectivenessTargets { values, source_scores })
            })
            .collect()
    };

    let config = RunConfig::default().glsa_config();
    let mut model = GLSAModel::new(config, 7).unwrap();
    let opts = TrainOpts { epochs: 12, batch_size: 16, lr: 0.05, momentum: 0.9, seed: 7 };
    assert!(opts.epochs <= 30);
    let history = model.train(&as_targets(train), &opts).unwrap();

    let mut hits = 0usize;
    for (img, planted) in held_out {
        let scores = model.forward(img).unwrap();
        let top = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        if top == *planted {
            hits += 1;
        }
    }
    let rate = hits as f64 / held_out.len() as f64;
    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "[glsa-learning] PASS: planted grid ranked first on {hits}/{} held-out images \
         ({:.1}%), loss {:.4} -> {:.4}, {elapsed:.1}s",
        held_out.len(),
        100.0 * rate,
        history.first().unwrap(),
        history.last().unwrap()
    );
    assert!(rate >= 0.95, "planted grid top-ranked on only {:.1}% of held-out", 100.0 * rate);
    assert!(elapsed < 300.0, "GLSA learning check took {elapsed:.1}s >= 5min");
}

// ===================================================================
// Criterion 5: dual-branch desk experiment
// ===================================================================

#[test]
fn criterion_5_dual_branch_desk_experiment() {
    let start = Instant::now();
    let config = RunConfig::default();
    let spec = config.grid_spec();
    let classes = 6usize;
    let minority: Vec<usize> = vec![4, 5];
    let seeds = [101u64, 202, 303];

    let mut single_minority = Vec::new();
    let mut glsa_minority = Vec::new();
    let mut dbn_overall = Vec::new();
    let mut glsa_overall = Vec::new();

    for &seed in &seeds {
        let mut per_class = vec![200usize; classes];
        for &m in &minority {
            per_class[m] = 20;
        }
        let train_spec = synth::ClassSpec {
            classes,
            per_class,
            image_size: config.input_size,
            seed,
        };
        let test_spec = synth::ClassSpec {
            classes,
            per_class: vec![50; classes],
            image_size: config.input_size,
            seed: seed ^ 0xBEEF,
        };
        let train_images = synth::generate_classification(&train_spec);
        let test_images = synth::generate_classification(&test_spec);
        let train: Vec<(Tensor<f32>, usize)> =
            train_images.iter().map(|s| (s.image.clone(), s.label)).collect();
        let test: Vec<(Tensor<f32>, usize)> =
            test_images.iter().map(|s| (s.image.clone(), s.label)).collect();

        // GLSA learns grid objectiveness from the generator's glyph truth.
        let glsa_pairs: Vec<(Tensor<f32>, ObjectivenessTargets)> = train_images
            .iter()
            .map(|s| {
                let mut values = vec![0u8; config.n * config.n];
                values[s.glyph_grid(config.n)] = 1;
                let source_scores = values.iter().map(|&v| v as f32).collect();
                (s.image.clone(), ObjectivenessTargets { values, source_scores })
            })
            .collect();
        let mut glsa_model = GLSAModel::new(config.glsa_config(), seed).unwrap();
        let glsa_opts = TrainOpts {
            epochs: 3,
            batch_size: config.batch_size,
            lr: config.lr,
            momentum: config.momentum,
            seed,
        };
        glsa_model.train(&glsa_pairs, &glsa_opts).unwrap();

        let fit = FitOpts {
            epochs: config.epochs,
            batch_size: config.batch_size,
            lr: config.lr,
            momentum: config.momentum,
            seed,
        };
        let mut reports = Vec::new();
        for variant in [Variant::Single, Variant::Dbn, Variant::DbnGlsa] {
            let glsa_arg = (variant == Variant::DbnGlsa).then(|| glsa_model.clone());
            let mut model = DualBranchModel::new(
                variant,
                config.backbone_config(),
                glsa_arg,
                classes,
                &spec,
                LocalAggregation::ShareAndMean,
                seed,
            )
            .unwrap();
            train_classifier(&mut model, &train, &spec, &fit).unwrap();
            let report = evaluate(&model, &test, &spec).unwrap();
            let minority_mean: f64 =
                minority.iter().map(|&m| report.per_class_top1[m]).sum::<f64>()
                    / minority.len() as f64;
            println!(
                "  seed {seed} {:>9}: top-1 {:.2}%  minority {:.2}%  per-class {:?}",
                variant.as_str(),
                report.overall_top1,
                minority_mean,
                report.per_class_top1.iter().map(|a| (a * 10.0).round() / 10.0).collect::<Vec<_>>()
            );
            reports.push((variant, report, minority_mean));
        }
        for (variant, report, minority_mean) in reports {
            match variant {
                Variant::Single => single_minority.push(minority_mean),
                Variant::Dbn => dbn_overall.push(report.overall_top1),
                Variant::DbnGlsa => {
                    glsa_minority.push(minority_mean);
                    glsa_overall.push(report.overall_top1);
                }
            }
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let single_min = mean(&single_minority);
    let glsa_min = mean(&glsa_minority);
    let dbn_top = mean(&dbn_overall);
    let glsa_top = mean(&glsa_overall);
    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "[dual-branch] minority top-1: dbn-glsa {glsa_min:.2}% vs single {single_min:.2}%; \
         overall: dbn-glsa {glsa_top:.2}% vs dbn {dbn_top:.2}%; {elapsed:.0}s"
    );
    assert!(
        glsa_min >= single_min,
        "mean minority top-1: dbn-glsa {glsa_min:.2}% < single-branch {single_min:.2}%"
    );
    // "within 2 points of DBN": dbn-glsa must not trail dbn by more than 2.
    assert!(
        glsa_top >= dbn_top - 2.0,
        "overall top-1: dbn-glsa {glsa_top:.2}% trails dbn {dbn_top:.2}% by more than 2 points"
    );
    println!("[dual-branch] PASS");
    assert!(elapsed < 1800.0, "desk experiment took {elapsed:.0}s >= 30min");
}

// ===================================================================
// Criterion 6: cost-model suite
// ===================================================================

#[test]
fn criterion_6_cost_model_suite() {
    let start = Instant::now();
    let config = RunConfig::default();
    let spec = config.grid_spec();
    let image = Tensor::zeros(vec![3, config.input_size, config.input_size]);
    let glsa_model = GLSAModel::new(config.glsa_config(), 55).unwrap();

    let mut totals = BTreeMap::new();
    for variant in [Variant::Single, Variant::Dbn, Variant::DbnGlsa] {
        let glsa_arg = (variant == Variant::DbnGlsa).then(|| glsa_model.clone());
        let model = DualBranchModel::new(
            variant,
            config.backbone_config(),
            glsa_arg,
            6,
            &spec,
            LocalAggregation::ShareAndMean,
            55,
        )
        .unwrap();
        let mut tape = Tape::<f32>::new();
        let _ = model.forward_logits_on_tape(&mut tape, &image, &spec, false).unwrap();
        let measured = tape.counter().total();
        let closed = model.mul_add_closed_form(&spec, config.input_size, config.input_size);
        assert_eq!(measured, closed, "{variant:?}: measured {measured} != closed-form {closed}");
        totals.insert(variant.as_str(), (measured, model.trainable_bytes(), model.frozen_bytes()));
    }
    let (single, dbn, dbn_glsa) =
        (totals["single"].0, totals["dbn"].0, totals["dbn-glsa"].0);
    assert!(dbn_glsa < dbn, "dbn-glsa {dbn_glsa} must cost less than dbn {dbn}");

    // The local branch's backbone count is exactly S_n x (one patch forward).
    let patch_cost = {
        let model = DualBranchModel::new(
            Variant::DbnGlsa,
            config.backbone_config(),
            Some(glsa_model.clone()),
            6,
            &spec,
            LocalAggregation::ShareAndMean,
            55,
        )
        .unwrap();
        let mut tape = Tape::<f32>::new();
        let binding = model.params.bind(&mut tape, false);
        let patch = Tensor::zeros(vec![3, spec.s_h, spec.s_w]);
        let pid = tape.constant(&patch);
        let _ = backbone_forward(&mut tape, pid, &binding, "local", &model.backbone).unwrap();
        tape.counter().total()
    };
    let global_cost = config.backbone_config().mul_add(3, config.input_size, config.input_size);
    let glsa_cost = config.glsa_config().mul_add_cost(config.input_size, config.input_size);
    let head_cost = 6u64 * 2 * config.backbone_config().embed_dim() as u64;
    assert_eq!(
        dbn_glsa,
        global_cost + glsa_cost + spec.s_n as u64 * patch_cost + head_cost,
        "dbn-glsa total does not decompose into global + GLSA + S_n x patch + head"
    );

    // counter additivity across ops on one tape vs separate tapes
    {
        let run_conv = |tape: &mut Tape<f32>| {
            let x = tape.leaf(&Tensor::zeros(vec![3, 8, 8]));
            let k = tape.leaf(&Tensor::zeros(vec![4, 3, 3, 3]));
            tape.conv2d(x, k, None, 1, 1).unwrap()
        };
        let run_linear = |tape: &mut Tape<f32>| {
            let x = tape.leaf(&Tensor::zeros(vec![5]));
            let w = tape.leaf(&Tensor::zeros(vec![2, 5]));
            tape.linear(x, w, None).unwrap()
        };
        let mut both = Tape::<f32>::new();
        run_conv(&mut both);
        run_linear(&mut both);
        let mut only_conv = Tape::<f32>::new();
        run_conv(&mut only_conv);
        let mut only_linear = Tape::<f32>::new();
        run_linear(&mut only_linear);
        assert_eq!(
            both.counter().total(),
            only_conv.counter().total() + only_linear.counter().total()
        );
    }

    // trainable/frozen byte split mirrors the variant table structure
    assert_eq!(totals["dbn-glsa"].1, totals["dbn"].1, "TPs(dbn-glsa) != TPs(dbn)");
    assert_eq!(totals["dbn"].2, 0, "dbn has no frozen parameters");
    assert!(totals["dbn-glsa"].2 > 0, "dbn-glsa must report frozen GLSA bytes");

    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "[cost-model] PASS: single {single}, dbn {dbn}, dbn-glsa {dbn_glsa} MUL-ADDs, all exact; \
         local branch = S_n x {patch_cost}; {elapsed:.2}s"
    );
    assert!(elapsed < 10.0, "cost-model suite took {elapsed:.2}s >= 10s");
}

// ===================================================================
// Criterion 7: format suite
// ===================================================================

#[test]
fn criterion_7_format_suite() {
    let start = Instant::now();

    // checkpoint round-trip, 100 random tensors with ranks <= 4
    {
        let mut rng = SplitMix64::new(0xF0F0);
        let mut params = ParamSet::new();
        for i in 0..100 {
            let rank = rng.next_below(5);
            let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.next_below(5)).collect();
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = (0..numel).map(|_| rng.next_range(-1e3, 1e3) as f32).collect();
            params.insert(&format!("t{i:03}.weight"), Tensor::new(shape, data).unwrap()).unwrap();
        }
        let bytes = checkpoint::encode(&params);
        let loaded = checkpoint::decode(&bytes).unwrap();
        assert_eq!(loaded.len(), params.len());
        for (name, tensor) in params.iter() {
            let got = loaded.get(name).unwrap();
            assert_eq!(got.shape(), tensor.shape());
            // bit-exact comparison
            for (a, b) in got.data().iter().zip(tensor.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
        assert_eq!(checkpoint::encode(&loaded), bytes);
    }

    // PGM / PPM byte-level fixtures
    {
        assert_eq!(pnm::encode_pgm(&[0, 255, 128, 64], 2, 2), b"P5\n2 2\n255\n\x00\xff\x80\x40");
        let mut ppm = b"P6\n2 1\n255\n".to_vec();
        ppm.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let (w, h, rgb) = pnm::decode_ppm(&ppm).unwrap();
        let t = pnm::rgb_to_tensor(&rgb, w, h);
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(pnm::encode_ppm(&rgb, w, h), ppm);
    }

    // identical config+seed -> identical metric records, via the CLI
    {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("fmt.cfg");
        std::fs::write(
            &cfg_path,
            "input_size = 32\nn = 4\ns_n = 4\ns_w = 8\ns_h = 8\nepochs = 1\nbatch_size = 8\nseed = 3\n",
        )
        .unwrap();
        let cfg = cfg_path.to_string_lossy().to_string();
        let data_dir = dir.path().join("data");
        let run = |args: &[&str]| {
            let mut argv = vec!["glsanet".to_string()];
            argv.extend(args.iter().map(|s| s.to_string()));
            assert_eq!(glsanet::cli::run(argv), 0, "command failed: {args:?}");
        };
        run(&[
            "gen-data", "--config", &cfg, "--out", data_dir.to_str().unwrap(),
            "--classes", "2", "--majority", "6", "--minority", "3",
            "--minority-classes", "1", "--test-per-class", "4",
        ]);
        let train_dir = data_dir.join("train");
        let test_dir = data_dir.join("test");
        let run1 = dir.path().join("r1");
        let run2 = dir.path().join("r2");
        for out in [&run1, &run2] {
            run(&[
                "train-base", "--config", &cfg, "--data", train_dir.to_str().unwrap(),
                "--out", out.to_str().unwrap(),
            ]);
            run(&[
                "eval", "--config", &cfg, "--data", test_dir.to_str().unwrap(),
                "--model", out.join("base.ckpt").to_str().unwrap(),
                "--variant", "single", "--out", out.to_str().unwrap(),
            ]);
        }
        let m1 = std::fs::read(run1.join("metrics.jsonl")).unwrap();
        let m2 = std::fs::read(run2.join("metrics.jsonl")).unwrap();
        assert_eq!(m1, m2, "identical config+seed produced different metric records");
        let records = metrics::parse_lines(std::str::from_utf8(&m1).unwrap()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].seed, 3);
    }

    let elapsed = start.elapsed().as_secs_f64();
    println!("[format-suite] PASS: checkpoint bit-exact, PNM fixtures, reproducible records, {elapsed:.1}s");
    assert!(elapsed < 10.0, "format suite took {elapsed:.1}s >= 10s");
}
