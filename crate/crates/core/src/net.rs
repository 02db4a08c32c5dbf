//! The U-shaped hybrid network: five BiFormer + ARM encoder stages, a
//! transposed-convolution decoder with projected skips, two intermediate
//! heatmap heads and a full-resolution head behind the fusion module.

use serde::{Deserialize, Serialize};

use crate::blocks::{ArmParams, Downsample, FfcmParams};
use crate::bra::{AttentionMode, BiFormerBlock, BraConfig};
use crate::error::{Error, Result};
use crate::heatmap::{combined_loss, decode_heatmap, encode_heatmap, LandmarkSet};
use crate::kernels::Conv2dParams;
use crate::nn::{Conv, ConvTranspose, Ctx, Init, ParamStore};
use crate::tape::NodeId;
use crate::tensor::{Scalar, Tensor};

pub const STAGES: usize = 5;
/// Total downsampling at the deepest stage: patch embed ×4, then four ×2.
pub const MAX_STRIDE: usize = 64;
/// Strides of the three supervised heatmaps relative to the input.
pub const HEAD_STRIDES: [usize; 3] = [8, 4, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyattConfig {
    /// `(H, W)` of the network input.
    pub input_size: [usize; 2],
    pub num_landmarks: usize,
    pub stage_dims: [usize; STAGES],
    pub stage_region_grid: [usize; STAGES],
    pub stage_topk: [usize; STAGES],
    pub stage_heads: [usize; STAGES],
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    /// Hidden width of the 3×3 conv in each heatmap head.
    pub head_dim: usize,
    /// Output width of the fusion module's 3×3 conv.
    pub ffcm_dim: usize,
    pub context_dim: usize,
    pub stem_dim: usize,
    pub cbam_reduction: usize,
    /// σ for H1, H2, H3, each in that head's own pixel grid.
    pub sigmas: [f64; 3],
    pub loss_weights: [f64; 3],
    /// Train against unit-peak Gaussians instead of the `1/(√(2π)σ)` amplitude.
    pub peak_normalize: bool,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HyattConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl HyattConfig {
    /// Desk-scale default: 128×128 input, four landmarks.
    pub fn toy() -> Self {
        Self {
            input_size: [128, 128],
            num_landmarks: 4,
            stage_dims: [16, 32, 64, 96, 128],
            stage_region_grid: [4, 4, 2, 2, 1],
            stage_topk: [4, 8, 2, 4, 1],
            stage_heads: [1, 2, 2, 4, 4],
            mlp_ratio: 3,
            decoder_dim: 256,
            head_dim: 64,
            ffcm_dim: 32,
            context_dim: 32,
            stem_dim: 8,
            cbam_reduction: 4,
            sigmas: [2.0, 2.0, 4.0],
            loss_weights: [1.0, 3.0, 3.0],
            peak_normalize: true,
            optimizer: OptimizerConfig::default(),
            epochs: 150,
            batch_size: 2,
            seed: 0,
        }
    }

    /// Small variant (under 0.5M parameters) used for the overfitting run.
    pub fn compact() -> Self {
        Self {
            stage_dims: [16, 24, 32, 48, 64],
            stage_heads: [1, 2, 2, 4, 4],
            decoder_dim: 32,
            head_dim: 32,
            ffcm_dim: 16,
            ..Self::toy()
        }
    }

    /// Feature-map side lengths `(h, w)` of stage `i` (0-based).
    pub fn stage_size(&self, i: usize) -> (usize, usize) {
        let s = 4 << i;
        (self.input_size[0] / s, self.input_size[1] / s)
    }

    pub fn bra_config(&self, i: usize) -> Result<BraConfig> {
        BraConfig::new(
            self.stage_region_grid[i],
            self.stage_topk[i],
            self.stage_heads[i],
            self.stage_dims[i],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        for (what, v) in [("input height", h), ("input width", w)] {
            if v == 0 || v % MAX_STRIDE != 0 {
                return Err(Error::Divisibility {
                    what: what.into(),
                    divisor: MAX_STRIDE,
                    value: v,
                });
            }
        }
        if self.num_landmarks == 0 {
            return Err(Error::Invalid("num_landmarks must be at least 1".into()));
        }
        for i in 0..STAGES {
            let bra = self
                .bra_config(i)
                .map_err(|e| Error::Invalid(format!("stage {}: {e}", i + 1)))?;
            let (sh, sw) = self.stage_size(i);
            bra.check_map(sh, sw)
                .map_err(|e| Error::Invalid(format!("stage {}: {e}", i + 1)))?;
            if self.stage_dims[i] % self.cbam_reduction.max(1) != 0 || self.cbam_reduction == 0 {
                return Err(Error::Divisibility {
                    what: format!("stage {} channels", i + 1),
                    divisor: self.cbam_reduction,
                    value: self.stage_dims[i],
                });
            }
        }
        if [
            self.decoder_dim,
            self.head_dim,
            self.ffcm_dim,
            self.context_dim,
            self.stem_dim,
            self.mlp_ratio,
        ]
        .contains(&0)
        {
            return Err(Error::Invalid("layer widths must be positive".into()));
        }
        if self.sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invalid("sigmas must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Grid `(h, w)` of heatmap head `i` (0 → H1, 1 → H2, 2 → H3).
    pub fn head_grid(&self, i: usize) -> (usize, usize) {
        (
            self.input_size[0] / HEAD_STRIDES[i],
            self.input_size[1] / HEAD_STRIDES[i],
        )
    }
}

/// 3×3 conv → ReLU → 1×1 conv to one channel per landmark.
#[derive(Clone, Debug)]
pub struct HeatmapHead {
    pub conv3: Conv,
    pub conv1: Conv,
}

impl HeatmapHead {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, hidden: usize, n: usize) -> Self {
        init.scope(name, |i| Self {
            conv3: Conv::new(i, "conv3", cin, hidden, 3, Conv2dParams::padded(1), true),
            conv1: Conv::new(i, "conv1", hidden, n, 1, Conv2dParams::default(), true),
        })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.conv3.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        self.conv1.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub down: Downsample,
    pub block: BiFormerBlock,
    pub arm: ArmParams,
}

/// Encoder outputs `D1..D5` and their decoder-width projections.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub features: Vec<NodeId>,
    pub projected: Vec<NodeId>,
}

/// Tape nodes of the three supervised heatmaps.
#[derive(Clone, Copy, Debug)]
pub struct HeatmapNodes {
    pub h1: NodeId,
    pub h2: NodeId,
    pub h3: NodeId,
}

impl HeatmapNodes {
    pub fn as_array(&self) -> [NodeId; 3] {
        [self.h1, self.h2, self.h3]
    }
}

/// The three heatmaps as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack<T: Scalar> {
    pub h1: Tensor<T>,
    pub h2: Tensor<T>,
    pub h3: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct HyattNet {
    pub cfg: HyattConfig,
    pub stages: Vec<Stage>,
    pub proj: Vec<Conv>,
    pub ups: Vec<ConvTranspose>,
    pub head1: HeatmapHead,
    pub head2: HeatmapHead,
    pub ffcm: FfcmParams,
    pub head3: Conv,
    pub mode: AttentionMode,
}

impl HyattNet {
    /// Build the network and its freshly initialised parameters.
    pub fn new<T: Scalar>(cfg: &HyattConfig) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let net = Self::build(cfg, &mut store, cfg.seed)?;
        Ok((net, store))
    }

    pub fn build<T: Scalar>(cfg: &HyattConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(store, seed);
        let mut stages = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let c = cfg.stage_dims[i];
            let bra = cfg.bra_config(i)?;
            let stage = init.scope(format!("enc{}", i + 1), |it| -> Result<Stage> {
                let down = if i == 0 {
                    Downsample::patch_embed(it, "embed", 1, c)
                } else {
                    Downsample::stride2(it, "down", cfg.stage_dims[i - 1], c)
                };
                Ok(Stage {
                    down,
                    block: BiFormerBlock::new(it, "biformer", bra, cfg.mlp_ratio),
                    arm: ArmParams::new(it, "arm", c, c, cfg.cbam_reduction)?,
                })
            })?;
            stages.push(stage);
        }
        let dd = cfg.decoder_dim;
        let proj = (0..STAGES)
            .map(|i| {
                Conv::new(
                    &mut init,
                    &format!("proj{}", i + 1),
                    cfg.stage_dims[i],
                    dd,
                    1,
                    Conv2dParams::default(),
                    true,
                )
            })
            .collect();
        let ups = (0..STAGES - 1)
            .map(|i| ConvTranspose::new(&mut init, &format!("up{}", i + 1), dd, dd, 2, 2))
            .collect();
        let n = cfg.num_landmarks;
        let head1 = HeatmapHead::new(&mut init, "head1", dd, cfg.head_dim, n);
        let head2 = HeatmapHead::new(&mut init, "head2", dd, cfg.head_dim, n);
        let ffcm = FfcmParams::new(&mut init, "ffcm", 1, dd, n, cfg.stem_dim, cfg.context_dim, cfg.ffcm_dim);
        let head3 = Conv::new(&mut init, "head3", cfg.ffcm_dim, n, 1, Conv2dParams::default(), true);
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            proj,
            ups,
            head1,
            head2,
            ffcm,
            head3,
            mode: AttentionMode::Routed,
        })
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let [h, w] = self.cfg.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != h || shape[3] != w {
            return Err(Error::Shape {
                op: "hyatt_net",
                msg: format!("expected image [B,1,{h},{w}], got {shape:?}"),
            });
        }
        Ok(())
    }

    /// `D_i` for every stage plus their 1×1 projections to the decoder width.
    pub fn encode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: NodeId) -> Result<FeaturePyramid> {
        self.check_image(ctx.tape.shape(image))?;
        let mut x = image;
        let mut features = Vec::with_capacity(STAGES);
        for (i, st) in self.stages.iter().enumerate() {
            x = st.down.forward(ctx, x)?;
            x = st.block.forward(ctx, x, self.mode, &format!("stage{}", i + 1))?;
            x = st.arm.forward(ctx, x)?;
            features.push(x);
        }
        let projected = features
            .iter()
            .zip(&self.proj)
            .map(|(&f, p)| p.forward(ctx, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid { features, projected })
    }

    /// `U1 = P5`, `U_{i+1} = deconv(U_i) + P_{5-i}`.
    pub fn decode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, pyr: &FeaturePyramid) -> Result<Vec<NodeId>> {
        let mut u = pyr.projected[STAGES - 1];
        let mut out = vec![u];
        for (i, up) in self.ups.iter().enumerate() {
            let d = up.forward(ctx, u)?;
            u = ctx.tape.add(d, pyr.projected[STAGES - 2 - i])?;
            out.push(u);
        }
        Ok(out)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: NodeId) -> Result<HeatmapNodes> {
        let pyr = self.encode(ctx, image)?;
        let us = self.decode(ctx, &pyr)?;
        let h1 = self.head1.forward(ctx, us[3])?;
        let h2 = self.head2.forward(ctx, us[4])?;
        let f = self.ffcm.forward(ctx, us[4], h2, image)?;
        let f = ctx.tape.relu(f);
        let h3 = self.head3.forward(ctx, f)?;
        Ok(HeatmapNodes { h1, h2, h3 })
    }

    /// Evaluation-mode heatmaps for a batch of images.
    pub fn heatmaps<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<HeatmapStack<T>> {
        let mut ctx = Ctx::eval(store);
        let x = ctx.tape.constant(images.clone());
        let h = self.forward(&mut ctx, x)?;
        Ok(HeatmapStack {
            h1: ctx.tape.value(h.h1).clone(),
            h2: ctx.tape.value(h.h2).clone(),
            h3: ctx.tape.value(h.h3).clone(),
        })
    }

    /// Landmarks (input-pixel coordinates) for every image in the batch.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Vec<LandmarkSet>> {
        let stack = self.heatmaps(store, images)?;
        predict_from_stack(&stack)
    }

    /// Gaussian targets for the three heads, `[B, N, h, w]` each.
    pub fn targets<T: Scalar>(&self, landmarks: &[LandmarkSet]) -> Result<[Tensor<T>; 3]> {
        let cfg = &self.cfg;
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(3);
        for level in 0..3 {
            let (h, w) = cfg.head_grid(level);
            let mut data = Vec::with_capacity(landmarks.len() * cfg.num_landmarks * h * w);
            for l in landmarks {
                if l.len() != cfg.num_landmarks {
                    return Err(Error::Dim {
                        op: "targets",
                        axis: "landmarks",
                        expected: cfg.num_landmarks,
                        got: l.len(),
                    });
                }
                let g = l.to_grid(HEAD_STRIDES[level]);
                let t = encode_heatmap::<T>(&g, (h, w), cfg.sigmas[level], cfg.peak_normalize)?;
                data.extend_from_slice(t.data());
            }
            out.push(Tensor::new(&[landmarks.len(), cfg.num_landmarks, h, w], data)?);
        }
        let [a, b, c]: [Tensor<T>; 3] = out.try_into().expect("three levels");
        Ok([a, b, c])
    }

    /// Forward plus deep-supervision loss. Returns the scalar loss node.
    pub fn loss<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        images: &Tensor<T>,
        landmarks: &[LandmarkSet],
    ) -> Result<NodeId> {
        let x = ctx.tape.constant(images.clone());
        let heads = self.forward(ctx, x)?;
        let targets = self.targets::<T>(landmarks)?;
        let tids = targets.map(|t| ctx.tape.constant(t));
        Ok(combined_loss(&mut ctx.tape, heads.as_array(), tids, self.cfg.loss_weights)?.0)
    }
}

/// Upsample H1 and H2 to full resolution, average with H3 and decode.
pub fn predict_from_stack<T: Scalar>(stack: &HeatmapStack<T>) -> Result<Vec<LandmarkSet>> {
    let s3 = stack.h3.shape().to_vec();
    let (b, n, h, w) = (s3[0], s3[1], s3[2], s3[3]);
    let avg = average_stack(stack)?;
    (0..b)
        .map(|i| {
            let plane = Tensor::new(&[n, h, w], avg.data()[i * n * h * w..(i + 1) * n * h * w].to_vec())?;
            decode_heatmap(&plane, false)
        })
        .collect()
}

/// `(up(H1) + up(H2) + H3) / 3` at H3's resolution.
pub fn average_stack<T: Scalar>(stack: &HeatmapStack<T>) -> Result<Tensor<T>> {
    let s3 = stack.h3.shape().to_vec();
    let mut tape = crate::tape::Tape::<T>::new();
    let a = tape.constant(stack.h1.clone());
    let b = tape.constant(stack.h2.clone());
    let c = tape.constant(stack.h3.clone());
    let a = tape.resize_bilinear(a, s3[2], s3[3])?;
    let b = tape.resize_bilinear(b, s3[2], s3[3])?;
    let s = tape.add(a, b)?;
    let s = tape.add(s, c)?;
    let s = tape.scale(s, T::of(1.0 / 3.0));
    Ok(tape.value(s).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid() {
        HyattConfig::toy().validate().unwrap();
        HyattConfig::compact().validate().unwrap();
        let mut c = HyattConfig::toy();
        c.input_size = [96, 128];
        assert!(c.validate().is_err());
        let mut c = HyattConfig::toy();
        c.stage_topk[0] = 17;
        assert!(c.validate().is_err());
        let mut c = HyattConfig::toy();
        c.stage_region_grid[3] = 4; // stage 4 is 8x8 at 128 input: fine
        c.validate().unwrap();
        c.stage_region_grid[4] = 4; // stage 5 is 2x2: not divisible by 4
        assert!(c.validate().is_err());
    }

    #[test]
    fn compact_config_parameter_budget() {
        let (_, store) = HyattNet::new::<f32>(&HyattConfig::compact()).unwrap();
        assert!(store.num_trainable() <= 500_000, "{}", store.num_trainable());
    }

    #[test]
    fn config_json_round_trip() {
        let c = HyattConfig::compact();
        let s = serde_json::to_string(&c).unwrap();
        let back: HyattConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let partial: HyattConfig = serde_json::from_str(r#"{"num_landmarks": 6}"#).unwrap();
        assert_eq!(partial.num_landmarks, 6);
        assert_eq!(partial.stage_dims, HyattConfig::toy().stage_dims);
    }
}
