//! N×N image grids: partition into per-grid entities, score each grid's
//! saliency, threshold into binary objectiveness targets, and sample the top
//! salient patches for the local classifier branch.

use crate::error::{Error, Result};
use crate::saliency::{self, SaliencyMap, ScoreSelect};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};
use rayon::prelude::*;

/// Partition and sampling geometry: grids per side, number of sampled
/// patches, patch size in pixels, and the objectiveness threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub n: usize,
    pub s_n: usize,
    pub s_w: usize,
    pub s_h: usize,
    pub tau: f32,
}

impl GridSpec {
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("grid count N must be >= 1".into()));
        }
        if !height.is_multiple_of(self.n) || !width.is_multiple_of(self.n) {
            return Err(Error::Config(format!(
                "N = {} does not divide image size {height}x{width}",
                self.n
            )));
        }
        if self.s_n == 0 || self.s_n > self.n * self.n {
            return Err(Error::Config(format!(
                "S_n = {} outside 1..=N^2 = {}",
                self.s_n,
                self.n * self.n
            )));
        }
        if self.s_h == 0 || self.s_h > height || self.s_w == 0 || self.s_w > width {
            return Err(Error::Config(format!(
                "patch size {}x{} outside image {height}x{width}",
                self.s_h, self.s_w
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau = {} outside [0,1]", self.tau)));
        }
        Ok(())
    }
}

/// The N^2 entities of one image, row-major grid order, with their pixel
/// origins. Each entity is `[3, H/N, W/N]`; reassembling them reproduces the
/// image exactly.
#[derive(Debug, Clone)]
pub struct GridPartition<T: Scalar = f32> {
    pub n: usize,
    pub entities: Vec<Tensor<T>>,
    pub offsets: Vec<(usize, usize)>,
}

impl<T: Scalar> GridPartition<T> {
    /// Total feature-map count: channels x entities (3N^2 for RGB input).
    pub fn feature_map_count(&self) -> usize {
        self.entities.iter().map(|e| e.shape()[0]).sum()
    }

    /// Paste the entities back at their offsets. Exact inverse of `partition`.
    pub fn reassemble(&self) -> Result<Tensor<T>> {
        let first = self.entities.first().ok_or_else(|| Error::Data("empty partition".into()))?;
        let (c, eh, ew) = (first.shape()[0], first.shape()[1], first.shape()[2]);
        let (h, w) = (eh * self.n, ew * self.n);
        let mut out = Tensor::zeros(vec![c, h, w]);
        for (entity, &(oy, ox)) in self.entities.iter().zip(&self.offsets) {
            let src = entity.data();
            let dst = out.data_mut();
            for ch in 0..c {
                for row in 0..eh {
                    let s = (ch * eh + row) * ew;
                    let d = (ch * h + oy + row) * w + ox;
                    dst[d..d + ew].copy_from_slice(&src[s..s + ew]);
                }
            }
        }
        Ok(out)
    }
}

/// Slice `[C,H,W]` into N^2 entities of `[C, H/N, W/N]`, row-major grid order.
pub fn partition<T: Scalar>(image: &Tensor<T>, n: usize) -> Result<GridPartition<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("expected [C,H,W] image, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if n == 0 || h % n != 0 || w % n != 0 {
        return Err(Error::Config(format!("N = {n} does not divide image shape {s:?}")));
    }
    let (eh, ew) = (h / n, w / n);
    let mut entities = Vec::with_capacity(n * n);
    let mut offsets = Vec::with_capacity(n * n);
    for r in 0..n {
        for col in 0..n {
            let (oy, ox) = (r * eh, col * ew);
            entities.push(image.crop(&[0, oy, ox], &[c, eh, ew])?);
            offsets.push((oy, ox));
        }
    }
    Ok(GridPartition { n, entities, offsets })
}

/// Binary per-grid training targets plus the scores they were cut from.
/// `values[i] == 1` iff `source_scores[i] > tau` (strict).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectivenessTargets {
    pub values: Vec<u8>,
    pub source_scores: Vec<f32>,
}

impl ObjectivenessTargets {
    pub fn as_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.values.len()], self.values.iter().map(|&v| v as f32).collect())
            .expect("lengths agree")
    }
}

/// Mean saliency per grid, row-major, in [0,1].
pub fn grid_objectiveness(map: &SaliencyMap, n: usize) -> Result<Vec<f32>> {
    if n == 0 || !map.height.is_multiple_of(n) || !map.width.is_multiple_of(n) {
        return Err(Error::Config(format!(
            "N = {n} does not divide saliency map {}x{}",
            map.height, map.width
        )));
    }
    let (gh, gw) = (map.height / n, map.width / n);
    let mut scores = vec![0.0f32; n * n];
    for r in 0..n {
        for c in 0..n {
            let mut acc = 0.0f64;
            for y in 0..gh {
                let row = (r * gh + y) * map.width + c * gw;
                for &v in &map.values[row..row + gw] {
                    acc += v as f64;
                }
            }
            scores[r * n + c] = (acc / (gh * gw) as f64) as f32;
        }
    }
    Ok(scores)
}

/// Strict threshold: target is 1 where score > tau.
pub fn thresh_targets(scores: &[f32], tau: f32) -> ObjectivenessTargets {
    ObjectivenessTargets {
        values: scores.iter().map(|&s| u8::from(s > tau)).collect(),
        source_scores: scores.to_vec(),
    }
}

/// The S_n sampled patches, sorted by descending score (ties by ascending
/// row-major grid index). Crops always lie fully inside the image.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<Tensor<f32>>,
    pub grid_indices: Vec<usize>,
    pub offsets: Vec<(usize, usize)>,
    pub scores: Vec<f32>,
}

/// Rank grids by objectiveness and crop an `S_h x S_w` patch from the source
/// image around each selected grid's center, clamped to the image borders.
pub fn sample_patches(image: &Tensor<f32>, scores: &[f32], spec: &GridSpec) -> Result<PatchSet> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("expected [C,H,W] image, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    spec.validate_for(h, w)?;
    if scores.len() != spec.n * spec.n {
        return Err(Error::Dimension(format!(
            "expected {} grid scores, got {}",
            spec.n * spec.n,
            scores.len()
        )));
    }
    let order = rank_grids(scores);
    let selected = &order[..spec.s_n];

    let (gh, gw) = (h / spec.n, w / spec.n);
    let mut patches = Vec::with_capacity(spec.s_n);
    let mut offsets = Vec::with_capacity(spec.s_n);
    for &g in selected {
        let (r, col) = (g / spec.n, g % spec.n);
        let oy = clamp_offset(r * gh + gh / 2, spec.s_h, h);
        let ox = clamp_offset(col * gw + gw / 2, spec.s_w, w);
        patches.push(image.crop(&[0, oy, ox], &[c, spec.s_h, spec.s_w])?);
        offsets.push((oy, ox));
    }
    Ok(PatchSet {
        patches,
        grid_indices: selected.to_vec(),
        offsets,
        scores: selected.iter().map(|&g| scores[g]).collect(),
    })
}

/// Grid indices sorted by (score desc, index asc).
fn rank_grids(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("scores are finite").then(a.cmp(&b))
    });
    order
}

/// Offset of a `size`-long window centered at `center`, clamped into [0, extent-size].
fn clamp_offset(center: usize, size: usize, extent: usize) -> usize {
    let half = size / 2;
    let raw = center as isize - half as isize;
    raw.clamp(0, (extent - size) as isize) as usize
}

/// Grid-target construction for GLSA training: run the frozen scorer, take
/// the input gradient of the selected score, collapse to a saliency map,
/// average per grid, and threshold.
///
/// `forward` must bind its parameters as constants (see
/// [`saliency::input_gradient`]); images are processed in parallel.
pub fn build_glsa_dataset<F>(
    forward: F,
    images: &[Tensor<f32>],
    n: usize,
    tau: f32,
    select: ScoreSelect,
) -> Result<Vec<(Tensor<f32>, ObjectivenessTargets)>>
where
    F: Fn(&mut Tape<f32>, TensorId) -> Result<TensorId> + Sync,
{
    images
        .par_iter()
        .map(|image| {
            let ig = saliency::selected_score_gradient(&forward, image, select)?;
            let map = saliency::saliency_map(&ig.grad, ig.class_index)?;
            let scores = grid_objectiveness(&map, n)?;
            Ok((image.clone(), thresh_targets(&scores, tau)))
        })
        .collect()
}
