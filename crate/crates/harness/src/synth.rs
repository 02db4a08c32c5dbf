//! Deterministic synthetic "anatomy": a filled outer ellipse, a brighter
//! inner ellipse and one or more bright ridge curves. Landmarks sit on
//! geometric loci of the figure: the two ends of the outer ellipse's major
//! axis, then the two endpoints of each ridge.

use std::path::Path;

use hyatt_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::manifest::{DatasetManifest, ManifestSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub count: usize,
    /// `[h, w]`
    pub size: [usize; 2],
    pub num_landmarks: usize,
    /// Outer ellipse semi-major axis as a fraction of `min(h, w)`.
    pub major_range: [f64; 2],
    /// Semi-minor over semi-major.
    pub aspect_range: [f64; 2],
    /// Ridge endpoint distance from the centre as a fraction of the semi-major axis.
    pub ridge_range: [f64; 2],
    /// Standard deviation of additive Gaussian noise on the [0, 1] intensity scale.
    pub noise: f64,
    pub spacing_mm: Option<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 8,
            size: [128, 128],
            num_landmarks: 4,
            major_range: [0.2, 0.3],
            aspect_range: [0.45, 0.75],
            ridge_range: [0.25, 0.7],
            noise: 0.02,
            spacing_mm: None,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(format!("synthetic spec: {m}")));
        if self.count == 0 {
            return bad("count must be at least 1");
        }
        if self.size[0] < 16 || self.size[1] < 16 {
            return bad("size must be at least 16x16");
        }
        if self.num_landmarks < 2 {
            return bad("num_landmarks must be at least 2");
        }
        let in_unit = |r: [f64; 2], hi: f64| r[0] > 0.0 && r[0] <= r[1] && r[1] <= hi;
        if !in_unit(self.major_range, 0.4) {
            return bad("major_range must satisfy 0 < lo <= hi <= 0.4");
        }
        if !in_unit(self.aspect_range, 1.0) || !in_unit(self.ridge_range, 1.0) {
            return bad("aspect_range and ridge_range must satisfy 0 < lo <= hi <= 1");
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        if self.spacing_mm.is_some_and(|s| !(s > 0.0)) {
            return bad("spacing_mm must be positive");
        }
        Ok(())
    }

    pub fn ridges(&self) -> usize {
        (self.num_landmarks - 1) / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Major-axis direction in radians.
    pub angle: f64,
}

impl Ellipse {
    /// Normalised radial coordinate: < 1 inside, 1 on the boundary.
    fn radius(&self, p: [f64; 2]) -> f64 {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = (dx * c + dy * s) / self.semi_major;
        let v = (-dx * s + dy * c) / self.semi_minor;
        (u * u + v * v).sqrt()
    }

    pub fn major_ends(&self) -> [[f64; 2]; 2] {
        let d = [self.semi_major * self.angle.cos(), self.semi_major * self.angle.sin()];
        [
            [self.center[0] + d[0], self.center[1] + d[1]],
            [self.center[0] - d[0], self.center[1] - d[1]],
        ]
    }
}

/// Quadratic Bézier ridge.
#[derive(Clone, Debug, PartialEq)]
pub struct Ridge {
    pub start: [f64; 2],
    pub control: [f64; 2],
    pub end: [f64; 2],
}

impl Ridge {
    fn point(&self, t: f64) -> [f64; 2] {
        let u = 1.0 - t;
        [0, 1].map(|i| u * u * self.start[i] + 2.0 * u * t * self.control[i] + t * t * self.end[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Figure {
    /// Integer end points of the outer major axis.
    pub axis_ends: [[f64; 2]; 2],
    pub outer: Ellipse,
    pub inner: Ellipse,
    pub ridges: Vec<Ridge>,
}

impl Figure {
    /// Landmark loci in landmark order.
    pub fn loci(&self, n: usize) -> Vec<[f64; 2]> {
        let mut out: Vec<[f64; 2]> = self.axis_ends.to_vec();
        for r in &self.ridges {
            out.push(r.start);
            out.push(r.end);
        }
        out.truncate(n);
        out
    }
}

fn round2(p: [f64; 2]) -> [f64; 2] {
    p.map(f64::round)
}

/// Random figure whose landmark loci fall exactly on integer pixels.
pub fn sample_figure(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Figure {
    let [h, w] = spec.size.map(|v| v as f64);
    let side = h.min(w);
    let c0 = [rng.gen_range(0.4..=0.6) * w, rng.gen_range(0.4..=0.6) * h];
    let a0 = rng.gen_range(spec.major_range[0]..=spec.major_range[1]) * side;
    let angle0 = rng.gen_range(0.0..std::f64::consts::PI);
    let d = [a0 * angle0.cos(), a0 * angle0.sin()];
    let p1 = round2([c0[0] + d[0], c0[1] + d[1]]);
    let p2 = round2([c0[0] - d[0], c0[1] - d[1]]);
    // rebuild the ellipse from the integer axis ends so they are exact vertices
    let center = [(p1[0] + p2[0]) / 2.0, (p1[1] + p2[1]) / 2.0];
    let semi_major = ((p1[0] - p2[0]).hypot(p1[1] - p2[1]) / 2.0).max(2.0);
    let angle = (p1[1] - p2[1]).atan2(p1[0] - p2[0]);
    let semi_minor = semi_major * rng.gen_range(spec.aspect_range[0]..=spec.aspect_range[1]);
    let outer = Ellipse {
        center,
        semi_major,
        semi_minor,
        angle,
    };
    let inner = Ellipse {
        center,
        semi_major: semi_major * rng.gen_range(0.35..=0.55),
        semi_minor: semi_minor * rng.gen_range(0.35..=0.55),
        angle: angle + rng.gen_range(-0.4..=0.4),
    };
    let ridges = (0..spec.ridges())
        .map(|_| {
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let spread = rng.gen_range(0.6..=1.4) * std::f64::consts::FRAC_PI_2;
            let r1 = rng.gen_range(spec.ridge_range[0]..=spec.ridge_range[1]) * semi_minor;
            let r2 = rng.gen_range(spec.ridge_range[0]..=spec.ridge_range[1]) * semi_minor;
            let at = |r: f64, t: f64| [center[0] + r * t.cos(), center[1] + r * t.sin()];
            let start = round2(at(r1, phi));
            let end = round2(at(r2, phi + spread));
            let mid = at(
                rng.gen_range(0.2..=0.9) * semi_minor,
                phi + spread / 2.0 + rng.gen_range(-0.5..=0.5),
            );
            Ridge {
                start,
                control: mid,
                end,
            }
        })
        .collect();
    Figure {
        axis_ends: [p1, p2],
        outer,
        inner,
        ridges,
    }
}

fn smoothstep_edge(r: f64, scale: f64) -> f64 {
    // 1 well inside, 0 well outside, linear over ~1 px around the boundary
    ((1.0 - r) * scale + 0.5).clamp(0.0, 1.0)
}

/// Noise-free intensities in [0, 1], row-major `h × w`.
pub fn render(fig: &Figure, size: [usize; 2]) -> Vec<f64> {
    let [h, w] = size;
    let samples: Vec<Vec<[f64; 2]>> = fig
        .ridges
        .iter()
        .map(|r| (0..=200).map(|i| r.point(i as f64 / 200.0)).collect())
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64, y as f64];
            let mut v = 0.08;
            let outer = smoothstep_edge(fig.outer.radius(p), fig.outer.semi_minor);
            v += 0.32 * outer;
            let inner = smoothstep_edge(fig.inner.radius(p), fig.inner.semi_minor);
            v += 0.2 * inner;
            for pts in &samples {
                let d2 = pts
                    .iter()
                    .map(|q| (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2))
                    .fold(f64::INFINITY, f64::min);
                v += 0.4 * (-d2 / 2.0).exp();
            }
            out[y * w + x] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Quantise to 8 bits after adding Gaussian noise.
pub fn quantize(clean: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let dist = (noise > 0.0).then(|| Normal::new(0.0, noise).expect("finite noise"));
    clean
        .iter()
        .map(|&v| {
            let n = dist.as_ref().map_or(0.0, |d| d.sample(rng));
            ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub figure: Figure,
    pub pixels: Vec<u8>,
    pub landmarks: Vec<[f64; 2]>,
}

/// Sample `index` of the dataset; each sample draws from its own stream.
pub fn synthesize(spec: &SyntheticSpec, index: usize) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let figure = sample_figure(spec, &mut rng);
    let clean = render(&figure, spec.size);
    let pixels = quantize(&clean, spec.noise, &mut rng);
    let landmarks = figure.loci(spec.num_landmarks);
    SyntheticSample {
        figure,
        pixels,
        landmarks,
    }
}

pub fn encode_png(pixels: &[u8], size: [usize; 2]) -> Result<Vec<u8>> {
    let img = image::GrayImage::from_raw(size[1] as u32, size[0] as u32, pixels.to_vec())
        .ok_or_else(|| HarnessError::Config("pixel buffer does not match size".into()))?;
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| HarnessError::Image {
            path: "<memory>".into(),
            msg: e.to_string(),
        })?;
    Ok(bytes)
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Write `img_XXXX.png` files and `manifest.json` into `out`.
pub fn generate(spec: &SyntheticSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let mut samples = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let s = synthesize(spec, i);
        let name = format!("img_{i:04}.png");
        crate::error::write_bytes(&out.join(&name), &encode_png(&s.pixels, spec.size)?)?;
        samples.push(ManifestSample {
            image: name,
            landmarks: s.landmarks,
            spacing_mm: spec.spacing_mm,
        });
    }
    let manifest = DatasetManifest {
        num_landmarks: spec.num_landmarks,
        target_size: spec.size,
        samples,
    };
    manifest.write(&out.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// Image tensor `[1, h, w]` in [0, 1] from 8-bit pixels.
pub fn to_tensor(pixels: &[u8], size: [usize; 2]) -> Result<Tensor<f32>> {
    Ok(Tensor::new(
        &[1, size[0], size[1]],
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loci_are_integer_and_inside() {
        let spec = SyntheticSpec {
            num_landmarks: 6,
            ..SyntheticSpec::default()
        };
        for seed in 0..50 {
            let s = synthesize(&SyntheticSpec { seed, ..spec.clone() }, 0);
            assert_eq!(s.landmarks.len(), 6);
            for p in &s.landmarks {
                assert_eq!(p[0], p[0].round());
                assert!(p[0] >= 0.0 && p[0] < 128.0 && p[1] >= 0.0 && p[1] < 128.0, "{p:?}");
            }
        }
    }

    #[test]
    fn major_axis_ends_lie_on_the_outer_boundary() {
        let s = synthesize(&SyntheticSpec::default(), 3);
        for (p, q) in s.figure.axis_ends.iter().zip(s.figure.outer.major_ends()) {
            assert!((s.figure.outer.radius(*p) - 1.0).abs() < 1e-12);
            assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
        }
        assert_eq!(s.landmarks[0], s.figure.axis_ends[0]);
    }

    #[test]
    fn samples_differ_and_repeat() {
        let spec = SyntheticSpec::default();
        let a = synthesize(&spec, 0);
        let b = synthesize(&spec, 1);
        assert_ne!(a.landmarks, b.landmarks);
        assert_eq!(synthesize(&spec, 0).pixels, a.pixels);
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = SyntheticSpec {
            num_landmarks: 1,
            ..SyntheticSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
