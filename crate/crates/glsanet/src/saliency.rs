//! Per-pixel importance maps: backpropagate a class score to the input image,
//! collapse channels, normalize, and export as PGM.

use crate::error::{Error, Result};
use crate::io::{atomic_write, pnm};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};
use std::path::Path;

/// Importance field over one image, normalized to [0,1].
/// `raw_max` is the pre-normalization maximum so maps can be de-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub source_class: usize,
    pub raw_max: f32,
}

/// How the class score driving the backward pass is selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSelect {
    /// Highest score; ties resolve to the lowest class index.
    Argmax,
    /// A caller-fixed class index.
    Fixed(usize),
    /// Mean of the strictly positive scores (falls back to argmax when no
    /// score is positive).
    MeanPositive,
}

/// Channel-collapse convention for [`saliency_map_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelCollapse {
    MaxAbs,
    MeanAbs,
}

/// Result of [`input_gradient`]: the gradient of the selected score with
/// respect to the image, the class the score came from, and the score itself.
#[derive(Debug, Clone)]
pub struct InputGradient<T: Scalar = f32> {
    pub grad: Tensor<T>,
    pub class_index: usize,
    pub score: T,
}

/// Gradient of one class score with respect to the image.
///
/// `forward` builds the model's score vector on the tape; its parameters must
/// be bound as constants, so they receive no gradient and are left untouched.
/// With `class_index` absent the predicted (argmax) class is used.
pub fn input_gradient<T, F>(
    forward: F,
    image: &Tensor<T>,
    class_index: Option<usize>,
) -> Result<InputGradient<T>>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, TensorId) -> Result<TensorId>,
{
    let select = match class_index {
        Some(c) => ScoreSelect::Fixed(c),
        None => ScoreSelect::Argmax,
    };
    selected_score_gradient(forward, image, select)
}

/// [`input_gradient`] generalized over the score-selection rule.
pub fn selected_score_gradient<T, F>(
    forward: F,
    image: &Tensor<T>,
    select: ScoreSelect,
) -> Result<InputGradient<T>>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::<T>::new();
    let mut img = image.clone();
    img.requires_grad = true;
    let img_id = tape.leaf(&img);
    let scores = forward(&mut tape, img_id)?;
    if tape.shape(scores).len() != 1 {
        return Err(Error::Dimension(format!(
            "model must produce a per-class score vector, got {:?}",
            tape.shape(scores)
        )));
    }
    let k = tape.numel(scores);
    let data = tape.data(scores).to_vec();
    let argmax = argmax_lowest(&data);

    let (loss, class_index) = match select {
        ScoreSelect::Fixed(c) => {
            if c >= k {
                return Err(Error::Range(format!("class index {c} >= number of classes {k}")));
            }
            (select_entry(&mut tape, scores, c)?, c)
        }
        ScoreSelect::Argmax => (select_entry(&mut tape, scores, argmax)?, argmax),
        ScoreSelect::MeanPositive => {
            let positive: Vec<usize> = (0..k).filter(|&i| data[i] > T::zero()).collect();
            if positive.is_empty() {
                (select_entry(&mut tape, scores, argmax)?, argmax)
            } else {
                let mut acc = select_entry(&mut tape, scores, positive[0])?;
                for &i in &positive[1..] {
                    let e = select_entry(&mut tape, scores, i)?;
                    acc = tape.add(acc, e)?;
                }
                let mean = tape.scale(acc, T::from_f64(1.0 / positive.len() as f64));
                (mean, argmax)
            }
        }
    };

    let score = tape.scalar_value(loss);
    tape.backward(loss)?;
    let grad_data = match tape.grad(img_id) {
        Some(g) => g.to_vec(),
        None => vec![T::zero(); image.numel()],
    };
    Ok(InputGradient {
        grad: Tensor::new(image.shape().to_vec(), grad_data)?,
        class_index,
        score,
    })
}

fn select_entry<T: Scalar>(tape: &mut Tape<T>, scores: TensorId, index: usize) -> Result<TensorId> {
    let picked = tape.crop(scores, &[index], &[1])?;
    tape.reshape(picked, &[])
}

fn argmax_lowest<T: Scalar>(data: &[T]) -> usize {
    let mut best = 0usize;
    for (i, &v) in data.iter().enumerate().skip(1) {
        if v > data[best] {
            best = i;
        }
    }
    best
}

/// Collapse a `[C,H,W]` gradient to a normalized per-pixel map using the
/// max-of-absolute-values channel convention.
pub fn saliency_map(grad: &Tensor<f32>, source_class: usize) -> Result<SaliencyMap> {
    saliency_map_with(grad, source_class, ChannelCollapse::MaxAbs)
}

/// Channel-collapse `|grad|` per pixel, then min–max normalize to [0,1].
/// An identically-zero field stays zero; a constant nonzero field maps to 1.
pub fn saliency_map_with(
    grad: &Tensor<f32>,
    source_class: usize,
    collapse: ChannelCollapse,
) -> Result<SaliencyMap> {
    let s = grad.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("expected [C,H,W] gradient, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let data = grad.data();
    let mut values = vec![0.0f32; plane];
    for (p, slot) in values.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for ch in 0..c {
            let a = data[ch * plane + p].abs();
            match collapse {
                ChannelCollapse::MaxAbs => acc = acc.max(a),
                ChannelCollapse::MeanAbs => acc += a,
            }
        }
        if collapse == ChannelCollapse::MeanAbs {
            acc /= c as f32;
        }
        *slot = acc;
    }
    let raw_max = values.iter().cloned().fold(0.0f32, f32::max);
    let raw_min = values.iter().cloned().fold(f32::INFINITY, f32::min);
    if raw_max > 0.0 {
        let span = raw_max - raw_min;
        if span > 0.0 {
            for v in &mut values {
                *v = (*v - raw_min) / span;
            }
        } else {
            values.fill(1.0);
        }
    }
    Ok(SaliencyMap { height: h, width: w, values, source_class, raw_max })
}

impl SaliencyMap {
    /// Pixel bytes for PGM export: round(value * 255), half away from zero.
    pub fn quantize(&self) -> Vec<u8> {
        self.values.iter().map(|&v| pnm::quantize_unit(v)).collect()
    }
}

/// Write the map as a binary PGM (`P5`, maxval 255).
pub fn write_pgm(map: &SaliencyMap, path: &Path) -> Result<()> {
    atomic_write(path, &pnm::encode_pgm(&map.quantize(), map.width, map.height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn affine_forward(
        w: Tensor<f32>,
        b: f32,
    ) -> impl FnOnce(&mut Tape<f32>, TensorId) -> Result<TensorId> {
        move |tape, img| {
            let wid = tape.constant(&w);
            let prod = tape.mul(wid, img)?;
            let s = tape.sum_all(prod);
            let sb = tape.add_scalar(s, b);
            tape.reshape(sb, &[1])
        }
    }

    #[test]
    fn linear_model_gradient_is_its_weights() {
        let shape = vec![3, 4, 4];
        let w =
            Tensor::new(shape.clone(), (0..48).map(|i| (i as f32) * 0.1 - 2.0).collect()).unwrap();
        let img = Tensor::new(shape, (0..48).map(|i| (i as f32) * 0.01).collect()).unwrap();
        let got = input_gradient(affine_forward(w.clone(), 0.5), &img, None).unwrap();
        for (g, expect) in got.grad.data().iter().zip(w.data()) {
            assert!((g - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_model_gives_zero_gradient() {
        let img = Tensor::new(vec![3, 2, 2], vec![0.3; 12]).unwrap();
        let forward = |tape: &mut Tape<f32>, _img: TensorId| {
            let c = tape.leaf(&Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
            Ok(c)
        };
        let got = input_gradient(forward, &img, None).unwrap();
        assert!(got.grad.data().iter().all(|&v| v == 0.0));
        assert_eq!(got.class_index, 0);
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let img = Tensor::new(vec![3, 2, 2], vec![0.0; 12]).unwrap();
        let forward = |tape: &mut Tape<f32>, img: TensorId| tape.global_avg_pool(img);
        assert!(matches!(input_gradient(forward, &img, Some(5)), Err(Error::Range(_))));
    }

    #[test]
    fn argmax_ties_resolve_to_lowest_index() {
        let img = Tensor::new(vec![3, 2, 2], vec![0.0; 12]).unwrap();
        let forward = |tape: &mut Tape<f32>, _img: TensorId| {
            Ok(tape.leaf(&Tensor::new(vec![3], vec![2.0, 2.0, 1.0]).unwrap()))
        };
        let got = input_gradient(forward, &img, None).unwrap();
        assert_eq!(got.class_index, 0);
    }

    #[test]
    fn zero_gradient_maps_to_zero_with_zero_raw_max() {
        let grad = Tensor::zeros(vec![3, 4, 4]);
        let map = saliency_map(&grad, 0).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
        assert_eq!(map.raw_max, 0.0);
    }

    #[test]
    fn single_nonzero_entry_normalizes_to_one() {
        let mut grad = Tensor::zeros(vec![3, 4, 5]);
        // channel 1, row 2, col 3 = -0.5
        let plane = 4 * 5;
        grad.data_mut()[plane + 2 * 5 + 3] = -0.5;
        let map = saliency_map(&grad, 0).unwrap();
        assert_eq!(map.raw_max, 0.5);
        for (p, &v) in map.values.iter().enumerate() {
            let want = if p == 2 * 5 + 3 { 1.0 } else { 0.0 };
            assert_eq!(v, want, "pixel {p}");
        }
    }

    #[test]
    fn channel_max_of_abs_is_half_for_example_pixel() {
        // channels (0.2, -0.5, 0.1) -> pre-normalization value 0.5
        let grad = Tensor::new(vec![3, 1, 1], vec![0.2, -0.5, 0.1]).unwrap();
        let map = saliency_map(&grad, 0).unwrap();
        assert_eq!(map.raw_max, 0.5);
        // single pixel: normalizes to 1
        assert_eq!(map.values, vec![1.0]);
    }

    #[test]
    fn map_is_sign_and_scale_invariant() {
        let grad = Tensor::new(
            vec![3, 2, 2],
            vec![0.1, -0.2, 0.3, 0.0, 0.5, 0.25, -0.125, 0.75, 0.0, 0.1, 0.9, -0.4],
        )
        .unwrap();
        let base = saliency_map(&grad, 0).unwrap();

        let neg =
            Tensor::new(grad.shape().to_vec(), grad.data().iter().map(|v| -v).collect()).unwrap();
        assert_eq!(saliency_map(&neg, 0).unwrap().values, base.values);

        let scaled =
            Tensor::new(grad.shape().to_vec(), grad.data().iter().map(|v| v * 4.0).collect())
                .unwrap();
        let scaled_map = saliency_map(&scaled, 0).unwrap();
        for (a, b) in scaled_map.values.iter().zip(&base.values) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((scaled_map.raw_max - 4.0 * base.raw_max).abs() < 1e-6);
    }

    #[test]
    fn pgm_payload_matches_quantization_fixture() {
        // 2x2 map [0, 1, 0.5, 0.25] -> bytes [0, 255, 128, 64]
        let map = SaliencyMap {
            height: 2,
            width: 2,
            values: vec![0.0, 1.0, 0.5, 0.25],
            source_class: 0,
            raw_max: 1.0,
        };
        assert_eq!(map.quantize(), vec![0, 255, 128, 64]);
    }

    #[test]
    fn pgm_file_round_trips_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let map = SaliencyMap {
            height: 1,
            width: 3,
            values: vec![0.0, 0.42, 1.0],
            source_class: 2,
            raw_max: 3.0,
        };
        let path = dir.path().join("m.pgm");
        write_pgm(&map, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let (w, h, px) = crate::io::pnm::decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (3, 1));
        assert_eq!(px, map.quantize());
    }

    #[test]
    fn one_pixel_map_writes_header_plus_single_byte() {
        let dir = tempfile::tempdir().unwrap();
        let map =
            SaliencyMap { height: 1, width: 1, values: vec![1.0], source_class: 0, raw_max: 1.0 };
        let path = dir.path().join("p.pgm");
        write_pgm(&map, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"P5\n1 1\n255\n\xff");
    }

    #[test]
    fn model_parameters_are_untouched_by_input_gradient() {
        use crate::tensor::ParamSet;
        let mut params = ParamSet::<f32>::new();
        params.insert("w", Tensor::new(vec![2, 12], vec![0.25; 24]).unwrap().with_grad()).unwrap();
        params.insert("b", Tensor::new(vec![2], vec![0.1, -0.1]).unwrap().with_grad()).unwrap();
        let before = params.clone();

        let img = Tensor::new(vec![3, 2, 2], (0..12).map(|i| i as f32 * 0.05).collect()).unwrap();
        let p = &params;
        let forward = |tape: &mut Tape<f32>, img: TensorId| {
            let bind = p.bind(tape, false);
            let flat = tape.reshape(img, &[12])?;
            tape.linear(flat, bind.id("w"), Some(bind.id("b")))
        };
        let _ = input_gradient(forward, &img, None).unwrap();
        assert_eq!(params, before);
    }
}
