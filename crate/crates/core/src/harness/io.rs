//! Image/label directories: one `<stem>.png` per image, one `<stem>.txt` per label
//! file with lines `class cx cy w h` (normalized).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::training::{Dataset, GroundTruthBox, Sample};

use super::synthetic::{sample_name, SyntheticData};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "ppm"];

/// Parses one label file body. Errors name `file`, the 1-based line and the field.
pub fn parse_labels(file: &str, text: &str, num_classes: Option<usize>) -> Result<Vec<GroundTruthBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let err = |what: String| Error::Data(format!("{file}:{line_no}: {what}"));
        if tokens.len() != 5 {
            return Err(err(format!("expected 5 fields `class cx cy w h`, found {}", tokens.len())));
        }
        let class: usize = tokens[0].parse().map_err(|_| err(format!("field class: invalid token `{}`", tokens[0])))?;
        let mut v = [0f32; 4];
        for (j, name) in ["cx", "cy", "w", "h"].iter().enumerate() {
            let tok = tokens[j + 1];
            v[j] = tok.parse().map_err(|_| err(format!("field {name}: invalid token `{tok}`")))?;
        }
        let b = GroundTruthBox::new(class, v[0], v[1], v[2], v[3]);
        if let Some((field, why)) = b.violation(num_classes.unwrap_or(usize::MAX)) {
            return Err(err(format!("field {field}: {why}")));
        }
        out.push(b);
    }
    Ok(out)
}

/// Label lists keyed by file stem, sorted by stem.
pub fn load_labels(dir: &Path, num_classes: Option<usize>) -> Result<Vec<(String, Vec<GroundTruthBox>)>> {
    let mut out = Vec::new();
    for path in sorted_files(dir)? {
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        out.push((stem(&path), parse_labels(&path.display().to_string(), &text, num_classes)?));
    }
    Ok(out)
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    files.retain(|p| p.is_file());
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn format_labels(boxes: &[GroundTruthBox]) -> String {
    boxes.iter().map(|b| format!("{} {} {} {} {}\n", b.class, b.cx, b.cy, b.w, b.h)).collect()
}

/// Writes `[3, N, N]` bytes as an RGB PNG.
pub fn write_png(path: &Path, chw: &[u8], size: usize) -> Result<()> {
    let plane = size * size;
    let hwc: Vec<u8> = (0..plane).flat_map(|i| [chw[i], chw[plane + i], chw[2 * plane + i]]).collect();
    let img = image::RgbImage::from_raw(size as u32, size as u32, hwc)
        .ok_or_else(|| Error::Data(format!("{}: pixel buffer does not match {size}x{size}", path.display())))?;
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes `images/<stem>.png` and `labels/<stem>.txt` under `root`.
pub fn write_dataset(root: &Path, data: &SyntheticData, image_size: usize) -> Result<()> {
    let (images, labels) = (root.join("images"), root.join("labels"));
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (i, (img, boxes)) in data.images.iter().zip(&data.labels).enumerate() {
        let name = sample_name(i);
        write_png(&images.join(format!("{name}.png")), img, image_size)?;
        let path = labels.join(format!("{name}.txt"));
        fs::write(&path, format_labels(boxes)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads an RGB image as a `[3, size, size]` tensor scaled to [0, 1].
pub fn load_image(path: &Path, input_size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    if img.width() as usize != input_size || img.height() as usize != input_size {
        return Err(Error::Data(format!(
            "{}: image is {}x{}, expected {input_size}x{input_size}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let plane = input_size * input_size;
    let mut chw = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            chw[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, input_size, input_size], chw)
}

/// Loads images, which must already be `input_size` square, and pairs them with
/// labels by stem. An image without a label file has no objects.
pub fn load_dataset(images: &Path, labels: &Path, input_size: usize, num_classes: usize) -> Result<Dataset> {
    let mut by_stem: std::collections::HashMap<String, Vec<GroundTruthBox>> =
        load_labels(labels, Some(num_classes))?.into_iter().collect();
    let mut samples = Vec::new();
    for path in sorted_files(images)? {
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let image = load_image(&path, input_size)?;
        let name = stem(&path);
        let boxes = by_stem.remove(&name).unwrap_or_default();
        samples.push(Sample { name, image, boxes });
    }
    if let Some(orphan) = by_stem.keys().next() {
        return Err(Error::Data(format!("label file `{orphan}.txt` has no matching image")));
    }
    Dataset::new(samples, input_size, num_classes)
}
