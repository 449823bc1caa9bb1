//! Directory-of-PPM datasets: one subdirectory per class, class indices
//! assigned in sorted directory-name order, samples in path-sorted order.

use super::pnm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceKind {
    PpmTree,
    Synthetic,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub per_class_counts: Vec<usize>,
    pub image_height: usize,
    pub image_width: usize,
    pub source: SourceKind,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub path: PathBuf,
}

/// Load `<root>/<class>/<name>.ppm` into memory. All images must share one
/// size; labels follow sorted class-directory names.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let mut class_names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            class_names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    class_names.sort();
    if class_names.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", root.display())));
    }

    let mut samples = Vec::new();
    let mut per_class_counts = vec![0usize; class_names.len()];
    let mut size: Option<(usize, usize, PathBuf)> = None;
    for (label, class) in class_names.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(root.join(class))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        files.sort();
        for path in files {
            let bytes = std::fs::read(&path)?;
            let (w, h, rgb) = pnm::decode_ppm(&bytes).map_err(|e| match e {
                Error::Parse { offset, message } => Error::Parse {
                    offset,
                    message: format!("{}: {message}", path.display()),
                },
                other => other,
            })?;
            match &size {
                None => size = Some((w, h, path.clone())),
                Some((w0, h0, first)) => {
                    if (w, h) != (*w0, *h0) {
                        return Err(Error::Data(format!(
                            "mixed image sizes: {} is {}x{}, {} is {w}x{h}",
                            first.display(),
                            w0,
                            h0,
                            path.display()
                        )));
                    }
                }
            }
            samples.push(Sample { image: pnm::rgb_to_tensor(&rgb, w, h), label, path });
            per_class_counts[label] += 1;
        }
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("no .ppm files under {}", root.display())));
    }
    let (w, h, _) = size.expect("at least one sample");
    Ok((
        DatasetManifest {
            root: root.to_path_buf(),
            class_names,
            per_class_counts,
            image_height: h,
            image_width: w,
            source: SourceKind::PpmTree,
        },
        samples,
    ))
}
