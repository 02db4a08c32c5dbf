//! Dataset manifest: JSON listing images and their landmarks in the
//! images' own pixel frame. Loading resizes images to the target size and
//! rescales landmark coordinates per axis by `target / original`.

use std::path::{Path, PathBuf};

use hyatt_core::heatmap::LandmarkSet;
use hyatt_core::kernels::resize_forward;
use hyatt_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{read_bytes, write_bytes, HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub image: String,
    pub landmarks: Vec<[f64; 2]>,
    pub spacing_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_landmarks: usize,
    /// `[h, w]`
    pub target_size: [usize; 2],
    pub samples: Vec<ManifestSample>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Manifest(m));
        if self.num_landmarks == 0 {
            return bad("num_landmarks must be at least 1".into());
        }
        if self.target_size.contains(&0) {
            return bad("target_size must be positive".into());
        }
        if self.samples.is_empty() {
            return bad("no samples".into());
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.landmarks.len() != self.num_landmarks {
                return bad(format!(
                    "sample {i} ({}) has {} landmarks, expected {}",
                    s.image,
                    s.landmarks.len(),
                    self.num_landmarks
                ));
            }
            if s.landmarks.iter().flatten().any(|v| !v.is_finite()) {
                return bad(format!("sample {i} ({}) has a non-finite coordinate", s.image));
            }
            if s.spacing_mm.is_some_and(|v| !(v > 0.0)) {
                return bad(format!("sample {i} ({}) has non-positive spacing", s.image));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &[u8], origin: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(text).map_err(|e| HarnessError::json(origin, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&read_bytes(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_json().as_bytes())
    }
}

/// One sample ready for the network, in target-size pixels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    /// `[1, h, w]` intensities in [0, 1].
    pub image: Tensor<f32>,
    pub landmarks: LandmarkSet,
    /// Original image size `[h, w]`, used to map predictions back.
    pub original_size: [usize; 2],
    pub spacing_mm: Option<f64>,
}

impl Sample {
    /// Per-axis factors `(sx, sy)` from original to target pixels.
    pub fn scale(&self) -> (f64, f64) {
        let s = self.image.shape();
        (
            s[2] as f64 / self.original_size[1] as f64,
            s[1] as f64 / self.original_size[0] as f64,
        )
    }

    /// Target-frame points mapped back to the original image frame.
    pub fn to_original(&self, points: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let (sx, sy) = self.scale();
        points.iter().map(|p| [p[0] / sx, p[1] / sy]).collect()
    }
}

/// Decode an 8- or 16-bit grayscale PNG into `[0, 1]` intensities.
pub fn read_gray(path: &Path) -> Result<([usize; 2], Vec<f32>)> {
    let img_err = |msg: String| HarnessError::Image {
        path: path.display().to_string(),
        msg,
    };
    let bytes = read_bytes(path)?;
    let img =
        image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| img_err(e.to_string()))?;
    let size = [img.height() as usize, img.width() as usize];
    let data = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        image::DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        other => return Err(img_err(format!("expected 8/16-bit grayscale, got {:?}", other.color()))),
    };
    Ok((size, data))
}

pub fn resolve(manifest_path: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Read every image, resize to the target size and rescale landmarks.
pub fn load_samples(manifest: &DatasetManifest, manifest_path: &Path) -> Result<Vec<Sample>> {
    let [th, tw] = manifest.target_size;
    manifest
        .samples
        .iter()
        .map(|s| {
            let (size, data) = read_gray(&resolve(manifest_path, &s.image))?;
            let data = if size == [th, tw] {
                data
            } else {
                resize_forward(&data, 1, size[0], size[1], th, tw)
            };
            let (sx, sy) = (tw as f64 / size[1] as f64, th as f64 / size[0] as f64);
            let pts = s.landmarks.iter().map(|p| [p[0] * sx, p[1] * sy]).collect();
            Ok(Sample {
                name: s.image.clone(),
                image: Tensor::new(&[1, th, tw], data)?,
                landmarks: LandmarkSet::new(pts, None)?,
                original_size: size,
                spacing_mm: s.spacing_mm,
            })
        })
        .collect()
}
