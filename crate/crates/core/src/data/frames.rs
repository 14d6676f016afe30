//! Loader for real clips stored as `root/<class>/<clip>/<frame>.png|jpg`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use crate::data::{Clip, Domain};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frame indices `round(i·(F−1)/(T−1))` for `i < T`.
pub fn subsample_indices(frames: usize, t: usize) -> Vec<usize> {
    if t <= 1 || frames <= 1 {
        return vec![0; t];
    }
    (0..t)
        .map(|i| ((i * (frames - 1)) as f64 / (t - 1) as f64).round() as usize)
        .collect()
}

fn path_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Path {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn sorted_entries(dir: &Path, want_dir: bool) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| path_err(dir, e.to_string()))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry?.path();
        if path.is_dir() == want_dir {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn is_frame(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

fn stem(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads every clip below `root`. Classes are the sorted subdirectory names
/// and label clips by their position; frames are sorted by file name,
/// uniformly subsampled to `T`, resized to `H×W`, and converted to luma
/// (`C = 1`) or RGB (`C = 3`) in `[0, 1]`.
///
/// Returns the clips and the class names.
pub fn load_frame_directory(root: &Path, target_shape: [usize; 4], domain: Domain) -> Result<(Vec<Clip>, Vec<String>)> {
    let [c, t, h, w] = target_shape;
    if !matches!(c, 1 | 3) || t == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "target shape {target_shape:?} needs C in {{1, 3}} and positive T, H, W"
        )));
    }
    if !root.is_dir() {
        return Err(path_err(root, "not a directory"));
    }
    let classes = sorted_entries(root, true)?;
    if classes.is_empty() {
        return Err(path_err(root, "no class subdirectories"));
    }
    let mut clips = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        let clip_dirs = sorted_entries(class_dir, true)?;
        if clip_dirs.is_empty() {
            return Err(path_err(class_dir, "empty class directory"));
        }
        for clip_dir in clip_dirs {
            let frames: Vec<PathBuf> = sorted_entries(&clip_dir, false)?.into_iter().filter(|p| is_frame(p)).collect();
            if frames.is_empty() {
                return Err(path_err(&clip_dir, "no .png or .jpg frames"));
            }
            let plane = h * w;
            let mut data = vec![0f32; c * t * plane];
            for (ti, fi) in subsample_indices(frames.len(), t).into_iter().enumerate() {
                let path = &frames[fi];
                let img = image::open(path).map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
                let img = img.resize_exact(w as u32, h as u32, FilterType::Triangle);
                if c == 1 {
                    let px = img.to_luma32f();
                    data[ti * plane..(ti + 1) * plane].copy_from_slice(px.as_raw());
                } else {
                    let px = img.to_rgb32f();
                    for (i, rgb) in px.as_raw().chunks_exact(3).enumerate() {
                        for ch in 0..3 {
                            data[(ch * t + ti) * plane + i] = rgb[ch];
                        }
                    }
                }
            }
            for v in &mut data {
                *v = v.clamp(0.0, 1.0);
            }
            clips.push(Clip {
                id: format!("{}-{}", stem(class_dir), stem(&clip_dir)),
                video: Tensor::new(&target_shape, data)?,
                action: Some(label),
                domain,
            });
        }
    }
    Ok((clips, classes.iter().map(|p| stem(p)).collect()))
}
