//! Synthetic image generation: class-discriminative glyphs on textured
//! backgrounds (for classification experiments, with controllable class
//! imbalance) and planted-bright-patch images (for grid-objectiveness
//! training and checks). Everything is a pure function of the seed.

use crate::error::Result;
use crate::io::{atomic_write, pnm};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;
use std::path::Path;

/// Classification-set geometry: K classes with per-class sample counts.
#[derive(Debug, Clone)]
pub struct ClassSpec {
    pub classes: usize,
    pub per_class: Vec<usize>,
    pub image_size: usize,
    pub seed: u64,
}

/// One generated sample with its glyph-placement ground truth.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Tensor<f32>,
    pub label: usize,
    /// Center pixel of the class glyph, (row, col).
    pub glyph_center: (usize, usize),
}

impl LabeledImage {
    /// Row-major index of the grid cell holding the glyph center.
    pub fn glyph_grid(&self, n: usize) -> usize {
        let size = self.image.shape()[1];
        let cell = size / n;
        (self.glyph_center.0 / cell) * n + self.glyph_center.1 / cell
    }

    /// Row-major indices of every grid cell the glyph's bounding box
    /// overlaps (a glyph near a cell border spans several cells).
    pub fn glyph_grids(&self, n: usize) -> Vec<usize> {
        let size = self.image.shape()[1];
        let cell = size / n;
        let half = (size * 3 / 16).max(4) / 2;
        let (cy, cx) = self.glyph_center;
        let lo = |c: usize| c.saturating_sub(half) / cell;
        let hi = |c: usize| ((c + half - 1).min(size - 1)) / cell;
        let mut out = Vec::new();
        for row in lo(cy)..=hi(cy) {
            for col in lo(cx)..=hi(cx) {
                out.push(row * n + col);
            }
        }
        out
    }
}

/// Glyph shapes cycled over the class index.
const SHAPES: usize = 6;

/// Saturated glyph colors. Classes share a color with the class four below
/// them (class 4 with class 0, class 5 with class 1, ...), so those pairs can
/// only be told apart by the glyph's local shape.
const COLORS: [[f32; 3]; 4] = [
    [1.0, 0.3, 0.3],
    [0.3, 1.0, 0.3],
    [0.35, 0.5, 1.0],
    [1.0, 1.0, 0.35],
];

/// Class-characteristic glyph regions, one per color, as fractions of the
/// image side. Color twins share the region as well.
const ANCHORS: [(f64, f64); 4] = [(0.3, 0.3), (0.7, 0.7), (0.3, 0.7), (0.62, 0.34)];

/// Generate the full classification set, ordered by (class, index).
///
/// Each class has a characteristic glyph color, shape, and image region;
/// color and region repeat with period 4 while shapes have period 6, so in a
/// six-class set classes 4 and 5 are shape-only variants of classes 0 and 1.
pub fn generate_classification(spec: &ClassSpec) -> Vec<LabeledImage> {
    assert_eq!(spec.classes, spec.per_class.len(), "one count per class");
    let mut out = Vec::new();
    for (label, &count) in spec.per_class.iter().enumerate() {
        for index in 0..count {
            out.push(render_sample(spec, label, index as u64));
        }
    }
    out
}

fn render_sample(spec: &ClassSpec, label: usize, index: u64) -> LabeledImage {
    let size = spec.image_size;
    let mut rng = SplitMix64::new(derive_seed(spec.seed, &[label as u64, index]));
    let mut image = Tensor::zeros(vec![3, size, size]);

    render_background(&mut image, size, &mut rng);
    for _ in 0..2 {
        render_distractor(&mut image, size, &mut rng);
    }

    let glyph = (size * 3 / 16).max(4);
    let (fy, fx) = ANCHORS[label % ANCHORS.len()];
    let jitter = (size / 8).max(1) as f64;
    let cy = (fy * size as f64 + rng.next_range(-jitter, jitter))
        .clamp(glyph as f64 / 2.0, (size - glyph / 2 - 1) as f64) as usize;
    let cx = (fx * size as f64 + rng.next_range(-jitter, jitter))
        .clamp(glyph as f64 / 2.0, (size - glyph / 2 - 1) as f64) as usize;

    render_glyph(&mut image, size, label, (cy, cx), glyph, &mut rng);
    LabeledImage { image, label, glyph_center: (cy, cx) }
}

/// A dim rectangle in one of the glyph colors: global color statistics stay
/// noisy while the true glyph remains the brightest saturated region.
fn render_distractor(image: &mut Tensor<f32>, size: usize, rng: &mut SplitMix64) {
    let w = 4 + rng.next_below(size / 8);
    let h = 4 + rng.next_below(size / 8);
    let oy = rng.next_below(size - h);
    let ox = rng.next_below(size - w);
    let color = COLORS[rng.next_below(COLORS.len())];
    let dim = rng.next_range(0.45, 0.6) as f32;
    let data = image.data_mut();
    for c in 0..3 {
        for y in oy..oy + h {
            for x in ox..ox + w {
                data[(c * size + y) * size + x] = dim * color[c];
            }
        }
    }
}

fn render_background(image: &mut Tensor<f32>, size: usize, rng: &mut SplitMix64) {
    let fy = rng.next_range(0.1, 0.5);
    let fx = rng.next_range(0.1, 0.5);
    let (py, px) = (rng.next_range(0.0, 6.28), rng.next_range(0.0, 6.28));
    let data = image.data_mut();
    for y in 0..size {
        for x in 0..size {
            let grating =
                0.06 * ((fy * y as f64 + py).sin() * (fx * x as f64 + px).sin()) as f32;
            for c in 0..3 {
                let noise = rng.next_range(0.0, 0.06) as f32;
                data[(c * size + y) * size + x] = (0.22 + grating + noise).clamp(0.0, 1.0);
            }
        }
    }
}

fn render_glyph(
    image: &mut Tensor<f32>,
    size: usize,
    label: usize,
    center: (usize, usize),
    glyph: usize,
    rng: &mut SplitMix64,
) {
    let color = COLORS[label % COLORS.len()];
    let shape = label % SHAPES;
    let half = (glyph / 2) as i64;
    let (cy, cx) = (center.0 as i64, center.1 as i64);
    let brightness = rng.next_range(0.9, 1.0) as f32;
    let data = image.data_mut();
    for dy in -half..half {
        for dx in -half..half {
            if !glyph_mask(shape, dy, dx, half) {
                continue;
            }
            let (y, x) = (cy + dy, cx + dx);
            if y < 0 || x < 0 || y >= size as i64 || x >= size as i64 {
                continue;
            }
            for c in 0..3 {
                data[(c * size + y as usize) * size + x as usize] =
                    (brightness * color[c]).min(1.0);
            }
        }
    }
}

// Shapes within a color pair (0/4, 1/5) have near-equal pixel areas, so the
// pairs cannot be told apart by total brightness, only by local structure.
fn glyph_mask(shape: usize, dy: i64, dx: i64, half: i64) -> bool {
    let bar = (half / 2).max(1);
    match shape {
        0 => dy * dy + dx * dx < half * half,                  // disc
        1 => dy.abs() < bar || dx.abs() < bar,                 // plus
        2 => true,                                             // filled square
        3 => (dy - dx).abs() < bar,                            // diagonal stripe
        4 => dy.abs() >= half - bar || dx.abs() >= half - bar, // ring (vs class 0's disc)
        _ => (dy - dx).abs() < bar || (dy + dx).abs() < bar,   // X (vs class 1's plus)
    }
}

/// Planted-bright-patch images: a noisy background with one grid cell filled
/// bright. Returns (image, planted grid index) pairs.
pub fn generate_planted(
    count: usize,
    image_size: usize,
    n: usize,
    seed: u64,
) -> Vec<(Tensor<f32>, usize)> {
    let cell = image_size / n;
    (0..count)
        .map(|i| {
            let mut rng = SplitMix64::new(derive_seed(seed, &[0x9a7c, i as u64]));
            let mut image = Tensor::zeros(vec![3, image_size, image_size]);
            {
                let data = image.data_mut();
                for v in data.iter_mut() {
                    *v = rng.next_range(0.1, 0.35) as f32;
                }
            }
            let grid = rng.next_below(n * n);
            let (r, c) = (grid / n, grid % n);
            let data = image.data_mut();
            for ch in 0..3 {
                for y in r * cell..(r + 1) * cell {
                    for x in c * cell..(c + 1) * cell {
                        data[(ch * image_size + y) * image_size + x] =
                            rng.next_range(0.75, 1.0) as f32;
                    }
                }
            }
            (image, grid)
        })
        .collect()
}

/// Class directory name used by [`write_ppm_tree`]: `class00`, `class01`, ...
/// (zero-padded so lexicographic order equals label order).
pub fn class_dir_name(label: usize) -> String {
    format!("class{label:02}")
}

/// Write samples as `<root>/<class>/img<idx>.ppm`, byte-deterministic.
pub fn write_ppm_tree(root: &Path, images: &[LabeledImage]) -> Result<()> {
    let mut per_class_index = std::collections::BTreeMap::<usize, usize>::new();
    for sample in images {
        let idx = per_class_index.entry(sample.label).or_insert(0);
        let path = root.join(class_dir_name(sample.label)).join(format!("img{idx:04}.ppm"));
        *idx += 1;
        let (w, h, rgb) = pnm::tensor_to_rgb(&sample.image)?;
        atomic_write(&path, &pnm::encode_ppm(&rgb, w, h))?;
    }
    Ok(())
}
