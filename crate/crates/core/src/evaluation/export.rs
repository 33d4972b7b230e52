//! Feature-map export as binary PGM (and optional pseudocolor PPM) files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::detector::DetectionModel;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor};

/// Activation taps available for export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSite {
    P0Out,
    P3Pre,
    P3Post,
    P4,
    P5,
}

impl FeatureSite {
    pub const ALL: [FeatureSite; 5] =
        [FeatureSite::P0Out, FeatureSite::P3Pre, FeatureSite::P3Post, FeatureSite::P4, FeatureSite::P5];

    pub fn label(self) -> &'static str {
        match self {
            FeatureSite::P0Out => "P0-out",
            FeatureSite::P3Pre => "P3-pre",
            FeatureSite::P3Post => "P3-post",
            FeatureSite::P4 => "P4",
            FeatureSite::P5 => "P5",
        }
    }
}

impl fmt::Display for FeatureSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FeatureSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|site| site.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|s| s.label()).collect();
                Error::Config(format!("unknown feature site `{s}` (known: {})", known.join(", ")))
            })
    }
}

/// Purple -> cyan -> green -> yellow.
const COLORMAP: [[f64; 3]; 4] = [[68.0, 1.0, 84.0], [33.0, 145.0, 140.0], [94.0, 201.0, 98.0], [253.0, 231.0, 37.0]];

pub fn pseudocolor(v: u8) -> [u8; 3] {
    let t = v as f64 / 255.0 * (COLORMAP.len() - 1) as f64;
    let i = (t.floor() as usize).min(COLORMAP.len() - 2);
    let f = t - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    [0, 1, 2].map(|c| (a[c] + (b[c] - a[c]) * f).round() as u8)
}

/// Min-max scaling to `0..=255`. A constant map has no range and becomes uniform 128.
pub fn normalize_map(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

fn write_pnm(path: &Path, width: usize, height: usize, pixels: &[u8], color: bool) -> Result<()> {
    let mut bytes = Vec::new();
    let (subtype, ty) = if color {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    PnmEncoder::new(&mut bytes)
        .with_subtype(subtype)
        .write_image(pixels, width as u32, height as u32, ty)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes one PGM per channel plus a channel-mean PGM for the first image of the
/// batch (and matching PPMs when `colormap`). Returns the written paths.
pub fn export_feature_maps(
    model: &DetectionModel,
    image: &Tensor<f32>,
    site: FeatureSite,
    out_dir: &Path,
    colormap: bool,
) -> Result<Vec<PathBuf>> {
    let mut g = Graph::with_store(&model.store);
    let x = g.input(image.clone());
    let out = model.network.forward(&mut g, x)?;
    let var = match site {
        FeatureSite::P0Out => out.taps.p0_out,
        FeatureSite::P3Pre => out.taps.p3_pre,
        FeatureSite::P3Post => out.taps.p3_post,
        FeatureSite::P4 => out.taps.p4,
        FeatureSite::P5 => out.taps.p5,
    };
    let shape = g.shape(var).to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let plane = h * w;
    let data = &g.value(var)[..c * plane];

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut maps: Vec<(String, Vec<f32>)> =
        (0..c).map(|ch| (format!("{site}_c{ch:03}"), data[ch * plane..(ch + 1) * plane].to_vec())).collect();
    let mean = (0..plane).map(|i| (0..c).map(|ch| data[ch * plane + i]).sum::<f32>() / c as f32).collect();
    maps.push((format!("{site}_mean"), mean));

    let mut written = Vec::new();
    for (stem, values) in maps {
        let gray = normalize_map(&values);
        let path = out_dir.join(format!("{stem}.pgm"));
        write_pnm(&path, w, h, &gray, false)?;
        written.push(path);
        if colormap {
            let rgb: Vec<u8> = gray.iter().flat_map(|&v| pseudocolor(v)).collect();
            let path = out_dir.join(format!("{stem}.ppm"));
            write_pnm(&path, w, h, &rgb, true)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{build_model, ModelConfig};
    use crate::injection::IntegrationStrategy;
    use crate::numeric::gradcheck::random_tensor;

    #[test]
    fn site_names_parse() {
        for s in FeatureSite::ALL {
            assert_eq!(s.label().parse::<FeatureSite>().unwrap(), s);
        }
        assert!("p3-post".parse::<FeatureSite>().is_ok());
        assert!("P6".parse::<FeatureSite>().is_err());
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_map(&[3.0; 4]), vec![128; 4]);
        assert_eq!(normalize_map(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(pseudocolor(0), [68, 1, 84]);
        assert_eq!(pseudocolor(255), [253, 231, 37]);
        assert_eq!(pseudocolor(85), [33, 145, 140]);
    }

    #[test]
    fn exports_p3_maps_deterministically() {
        let cfg = ModelConfig::new("S", "toy-tiny", IntegrationStrategy::SingleP3);
        let (model, _) = build_model(&cfg).unwrap();
        let img = random_tensor(&[1, 3, 64, 64], 1, 1.0).cast();
        let dir = tempfile::tempdir().unwrap();
        let a = export_feature_maps(&model, &img, FeatureSite::P3Post, &dir.path().join("a"), true).unwrap();
        let b = export_feature_maps(&model, &img, FeatureSite::P3Post, &dir.path().join("b"), true).unwrap();
        assert_eq!(a.len(), 2 * 65);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
        }
        let pgm = fs::read(&a[0]).unwrap();
        assert!(pgm.starts_with(b"P5\n8 8 255\n"), "{:?}", &pgm[..12]);
        assert_eq!(pgm.len(), 11 + 64);
        let ppm = fs::read(&a[1]).unwrap();
        assert!(ppm.starts_with(b"P6\n8 8 255\n"));
        assert_eq!(ppm.len(), 11 + 3 * 64);
    }

    #[test]
    fn constant_map_is_mid_gray() {
        let cfg = ModelConfig::new("S", "toy-tiny", IntegrationStrategy::None);
        let (model, _) = build_model(&cfg).unwrap();
        let img = Tensor::zeros([1, 3, 64, 64]);
        let dir = tempfile::tempdir().unwrap();
        let files = export_feature_maps(&model, &img, FeatureSite::P0Out, dir.path(), false).unwrap();
        let pgm = fs::read(&files[0]).unwrap();
        assert!(pgm[pgm.len() - 64 * 64..].iter().all(|&v| v == 128));
    }
}
