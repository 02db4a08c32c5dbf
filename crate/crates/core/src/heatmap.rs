//! Gaussian heatmap encoding and decoding, the deep-supervision loss and
//! radial-error metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tape::{argmax_first, NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// `N` landmark positions `(x, y)` in pixels of some grid, with optional
/// physical spacing in millimetres per pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
    pub spacing: Option<f64>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>, spacing: Option<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("a landmark set needs at least one point".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("landmark coordinates must be finite".into()));
        }
        if let Some(s) = spacing {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Invalid(format!("spacing must be positive, got {s}")));
            }
        }
        Ok(Self { points, spacing })
    }

    pub fn pixels(points: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(points, None)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Full-resolution coordinates mapped onto a grid downsampled by `stride`
    /// (half-pixel-centre convention, matching the bilinear resize).
    pub fn to_grid(&self, stride: usize) -> Self {
        let s = stride as f64;
        Self {
            points: self.points.iter().map(|p| p.map(|v| (v + 0.5) / s - 0.5)).collect(),
            spacing: self.spacing.map(|sp| sp * s),
        }
    }

    /// Inverse of [`LandmarkSet::to_grid`].
    pub fn from_grid(&self, stride: usize) -> Self {
        let s = stride as f64;
        Self {
            points: self.points.iter().map(|p| p.map(|v| (v + 0.5) * s - 0.5)).collect(),
            spacing: self.spacing.map(|sp| sp / s),
        }
    }

    pub fn with_spacing(mut self, spacing: Option<f64>) -> Self {
        self.spacing = spacing;
        self
    }
}

/// Gaussian amplitude: `1/(√(2π)σ)`, or 1 when peak-normalised.
pub fn gaussian_amplitude(sigma: f64, peak_normalize: bool) -> f64 {
    if peak_normalize {
        1.0
    } else {
        1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma)
    }
}

/// One channel per landmark holding
/// `A·exp(-((x-xᵢ)² + (y-yᵢ)²) / (2σ²))` at every pixel centre.
pub fn encode_heatmap<T: Scalar>(
    landmarks: &LandmarkSet,
    grid: (usize, usize),
    sigma: f64,
    peak_normalize: bool,
) -> Result<Tensor<T>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = grid;
    let amp = gaussian_amplitude(sigma, peak_normalize);
    let denom = 2.0 * sigma * sigma;
    let mut data = Vec::with_capacity(landmarks.len() * h * w);
    for &[lx, ly] in &landmarks.points {
        let gy: Vec<f64> = (0..h).map(|y| (y as f64 - ly).powi(2)).collect();
        let gx: Vec<f64> = (0..w).map(|x| (x as f64 - lx).powi(2)).collect();
        for dy in &gy {
            for dx in &gx {
                data.push(T::of(amp * (-(dx + dy) / denom).exp()));
            }
        }
    }
    Tensor::new(&[landmarks.len(), h, w], data)
}

/// Argmax decoding per channel (ties → lowest linear index). With `refine`,
/// each coordinate moves a quarter pixel toward its larger axis neighbour.
pub fn decode_heatmap<T: Scalar>(heatmap: &Tensor<T>, refine: bool) -> Result<LandmarkSet> {
    let s = heatmap.shape();
    if s.len() != 3 {
        return Err(shape_err("decode_heatmap", format!("expected [N,h,w], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let mut points = Vec::with_capacity(n);
    for ch in heatmap.data().chunks(h * w) {
        let i = argmax_first(ch);
        let (y, x) = (i / w, i % w);
        let (mut px, mut py) = (x as f64, y as f64);
        if refine {
            if x > 0 && x + 1 < w {
                px += 0.25 * (ch[i + 1] - ch[i - 1]).f64().signum() * ((ch[i + 1] != ch[i - 1]) as u8 as f64);
            }
            if y > 0 && y + 1 < h {
                py += 0.25 * (ch[i + w] - ch[i - w]).f64().signum() * ((ch[i + w] != ch[i - w]) as u8 as f64);
            }
        }
        points.push([px, py]);
    }
    debug_assert_eq!(points.len(), n);
    LandmarkSet::pixels(points)
}

/// Mean squared error over all elements, on the tape.
pub fn mse<T: Scalar>(tape: &mut Tape<T>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(shape_err(
            "mse",
            format!("prediction {:?} vs target {:?}", tape.shape(pred), tape.shape(target)),
        ));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// `L = w₁·MSE(H1,G1) + w₂·MSE(H2,G2) + w₃·MSE(H3,G3)`.
/// Returns the total and the three unweighted components.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    preds: [NodeId; 3],
    targets: [NodeId; 3],
    weights: [f64; 3],
) -> Result<(NodeId, [NodeId; 3])> {
    let mut parts = [preds[0]; 3];
    for i in 0..3 {
        parts[i] = mse(tape, preds[i], targets[i])?;
    }
    let mut total = tape.scale(parts[0], T::of(weights[0]));
    for i in 1..3 {
        let wpart = tape.scale(parts[i], T::of(weights[i]));
        total = tape.add(total, wpart)?;
    }
    Ok((total, parts))
}

/// Weighted sum of already computed component losses.
pub fn weighted_total(components: [f64; 3], weights: [f64; 3]) -> f64 {
    components.iter().zip(&weights).map(|(l, w)| l * w).sum()
}

/// Radial errors and their mean / population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialErrors {
    pub mre: f64,
    pub std: f64,
    pub per_point: Vec<f64>,
    /// `true` when errors are in millimetres.
    pub physical: bool,
}

pub fn mre(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<RadialErrors> {
    if pred.len() != gt.len() {
        return Err(Error::Dim {
            op: "mre",
            axis: "landmarks",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if pred.spacing != gt.spacing {
        return Err(Error::Invalid(format!(
            "mre: spacing mismatch {:?} vs {:?}",
            pred.spacing, gt.spacing
        )));
    }
    let scale = gt.spacing.unwrap_or(1.0);
    let per_point: Vec<f64> = pred
        .points
        .iter()
        .zip(&gt.points)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt() * scale)
        .collect();
    let (mre, std) = mean_std(&per_point);
    Ok(RadialErrors {
        mre,
        std,
        per_point,
        physical: gt.spacing.is_some(),
    })
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Percentage of radial errors strictly below each threshold.
pub fn sdr(per_point: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let n = per_point.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&z| {
            let hit = per_point.iter().filter(|&&r| r < z).count();
            (z, hit as f64 / n * 100.0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mre: f64,
    pub std: f64,
    /// `"mm"` or `"px"`.
    pub unit: String,
    pub n_landmarks: usize,
    /// `(threshold, percent)` in threshold order.
    pub sdr: Vec<(f64, f64)>,
    pub per_landmark: Vec<f64>,
}

impl EvalReport {
    /// Aggregate radial errors from any number of samples.
    pub fn from_errors(per_point: Vec<f64>, physical: bool, thresholds: &[f64]) -> Self {
        let (mre, std) = mean_std(&per_point);
        Self {
            mre,
            std,
            unit: if physical { "mm" } else { "px" }.into(),
            n_landmarks: per_point.len(),
            sdr: sdr(&per_point, thresholds),
            per_landmark: per_point,
        }
    }

    /// `threshold,sdr_percent` table.
    pub fn sdr_csv(&self) -> String {
        let mut s = String::from("threshold,sdr_percent\n");
        for (z, p) in &self.sdr {
            let _ = writeln!(s, "{z},{p}");
        }
        s
    }

    /// `mre,std,n_landmarks,unit` header plus one data line.
    pub fn summary_csv(&self) -> String {
        format!(
            "mre,std,n_landmarks,unit\n{},{},{},{}\n",
            self.mre, self.std, self.n_landmarks, self.unit
        )
    }

    /// Human-readable `MRE ± STD` line with SDR percentages at two decimals.
    pub fn display_line(&self) -> String {
        let sdr: Vec<String> = self.sdr.iter().map(|(z, p)| format!("<{z}: {p:.2}%")).collect();
        format!(
            "MRE {:.3} ± {:.3} {} | SDR {}",
            self.mre,
            self.std,
            self.unit,
            sdr.join(", ")
        )
    }
}
