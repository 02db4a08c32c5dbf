//! Convolutional building blocks: CBAM gating, the attention residual
//! module, patch embedding, stride-2 downsampling and the feature fusion
//! correction module.

use crate::error::{Error, Result};
use crate::kernels::Conv2dParams;
use crate::nn::{BatchNorm, Conv, Ctx, Init, LayerNorm, Linear};
use crate::tape::{NodeId, PoolKind};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct CbamParams {
    pub channels: usize,
    pub fc1: Linear,
    pub fc2: Linear,
    /// 7×7 conv over the stacked channel-average and channel-max maps.
    pub spatial: Conv,
}

impl CbamParams {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Divisibility {
                what: "CBAM channels".into(),
                divisor: reduction,
                value: channels,
            });
        }
        let hidden = channels / reduction;
        Ok(init.scope(name, |i| Self {
            channels,
            fc1: Linear::new(i, "fc1", channels, hidden),
            fc2: Linear::new(i, "fc2", hidden, channels),
            spatial: Conv::new(i, "spatial", 2, 1, 7, Conv2dParams::padded(3), false),
        }))
    }

    fn mlp<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, pooled: NodeId) -> Result<NodeId> {
        let b = ctx.tape.shape(pooled)[0];
        let v = ctx.tape.reshape(pooled, &[b, self.channels])?;
        let h = self.fc1.forward(ctx, v)?;
        let h = ctx.tape.relu(h);
        self.fc2.forward(ctx, h)
    }

    /// `sigmoid(MLP(avg(f)) + MLP(max(f)))`, `[B,C,1,1]`.
    pub fn channel_attention<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: NodeId) -> Result<NodeId> {
        let s = ctx.tape.shape(f).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Dim {
                op: "channel_attention",
                axis: "channels",
                expected: self.channels,
                got: s.get(1).copied().unwrap_or(0),
            });
        }
        let avg = ctx.tape.pool(f, PoolKind::GlobalAvg)?;
        let max = ctx.tape.pool(f, PoolKind::GlobalMax)?;
        let a = self.mlp(ctx, avg)?;
        let m = self.mlp(ctx, max)?;
        let z = ctx.tape.add(a, m)?;
        let z = ctx.tape.sigmoid(z);
        ctx.tape.reshape(z, &[s[0], s[1], 1, 1])
    }

    /// `sigmoid(conv7×7([avg_c(f); max_c(f)]))`, `[B,1,H,W]`.
    pub fn spatial_attention<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: NodeId) -> Result<NodeId> {
        let avg = ctx.tape.pool(f, PoolKind::ChannelAvg)?;
        let max = ctx.tape.pool(f, PoolKind::ChannelMax)?;
        let stack = ctx.tape.concat(&[avg, max], 1)?;
        let z = self.spatial.forward(ctx, stack)?;
        Ok(ctx.tape.sigmoid(z))
    }

    /// `SA(CA(f)⊙f) ⊙ (CA(f)⊙f)`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: NodeId) -> Result<NodeId> {
        let ca = self.channel_attention(ctx, f)?;
        let fc = ctx.tape.mul(f, ca)?;
        let sa = self.spatial_attention(ctx, fc)?;
        ctx.tape.mul(fc, sa)
    }
}

/// `ReLU(Conv1×1(f) + CBAM(BN(Conv_d2(ReLU(BN(Conv_d1(f)))))))`.
#[derive(Clone, Debug)]
pub struct ArmParams {
    pub conv1: Conv,
    pub norm1: BatchNorm,
    pub conv2: Conv,
    pub norm2: BatchNorm,
    pub cbam: CbamParams,
    pub residual: Conv,
}

impl ArmParams {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        reduction: usize,
    ) -> Result<Self> {
        init.scope(name, |i| {
            Ok(Self {
                conv1: Conv::new(i, "conv1", cin, cout, 3, Conv2dParams::same(1), true),
                norm1: BatchNorm::new(i, "norm1", cout),
                conv2: Conv::new(i, "conv2", cout, cout, 3, Conv2dParams::same(2), true),
                norm2: BatchNorm::new(i, "norm2", cout),
                cbam: CbamParams::new(i, "cbam", cout, reduction)?,
                residual: Conv::new(i, "residual", cin, cout, 1, Conv2dParams::default(), true),
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: NodeId) -> Result<NodeId> {
        let h = self.conv1.forward(ctx, f)?;
        let h = self.norm1.forward(ctx, h)?;
        let h = ctx.tape.relu(h);
        let h = self.conv2.forward(ctx, h)?;
        let h = self.norm2.forward(ctx, h)?;
        let h = self.cbam.forward(ctx, h)?;
        let r = self.residual.forward(ctx, f)?;
        let s = ctx.tape.add(r, h)?;
        Ok(ctx.tape.relu(s))
    }
}

/// Strided convolution followed by channel layer-norm. Used with a 4×4/4
/// kernel as the patch embedding and with 3×3/2 between stages.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv,
    pub norm: LayerNorm,
    pub factor: usize,
}

impl Downsample {
    pub fn patch_embed<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        init.scope(name, |i| Self {
            conv: Conv::new(i, "conv", cin, cout, 4, Conv2dParams::strided(4, 0), true),
            norm: LayerNorm::new(i, "norm", cout),
            factor: 4,
        })
    }

    pub fn stride2<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        init.scope(name, |i| Self {
            conv: Conv::new(i, "conv", cin, cout, 3, Conv2dParams::strided(2, 1), true),
            norm: LayerNorm::new(i, "norm", cout),
            factor: 2,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let s = ctx.tape.shape(x).to_vec();
        for (what, v) in [("input height", s[2]), ("input width", s[3])] {
            if v % self.factor != 0 {
                return Err(Error::Divisibility {
                    what: what.into(),
                    divisor: self.factor,
                    value: v,
                });
            }
        }
        let y = self.conv.forward(ctx, x)?;
        self.norm.forward_nchw(ctx, y)
    }
}

/// Fuses upsampled decoder features, the stride-4 heatmap and a global
/// image-context vector at full input resolution.
#[derive(Clone, Debug)]
pub struct FfcmParams {
    pub stem: Conv,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fuse: Conv,
    pub context_dim: usize,
}

impl FfcmParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        in_channels: usize,
        decoder_dim: usize,
        landmarks: usize,
        stem_dim: usize,
        context_dim: usize,
        out_dim: usize,
    ) -> Self {
        init.scope(name, |i| Self {
            stem: Conv::new(i, "stem", in_channels, stem_dim, 3, Conv2dParams::padded(1), true),
            fc1: Linear::new(i, "fc1", stem_dim, context_dim),
            fc2: Linear::new(i, "fc2", context_dim, context_dim),
            fuse: Conv::new(
                i,
                "fuse",
                decoder_dim + landmarks + context_dim,
                out_dim,
                3,
                Conv2dParams::padded(1),
                true,
            ),
            context_dim,
        })
    }

    /// `FC(ReLU(FC(avg(ReLU(stem(image))))))`, `[B, context_dim]`.
    pub fn context<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: NodeId) -> Result<NodeId> {
        let b = ctx.tape.shape(image)[0];
        let s = self.stem.forward(ctx, image)?;
        let s = ctx.tape.relu(s);
        let p = ctx.tape.pool(s, PoolKind::GlobalAvg)?;
        let stem_dim = ctx.tape.shape(p)[1];
        let p = ctx.tape.reshape(p, &[b, stem_dim])?;
        let h = self.fc1.forward(ctx, p)?;
        let h = ctx.tape.relu(h);
        self.fc2.forward(ctx, h)
    }

    /// U6 = [up(u5); up(h2); context] at image resolution, then 3×3 conv.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, u5: NodeId, h2: NodeId, image: NodeId) -> Result<NodeId> {
        let (su, sh, si) = (
            ctx.tape.shape(u5).to_vec(),
            ctx.tape.shape(h2).to_vec(),
            ctx.tape.shape(image).to_vec(),
        );
        if su[2..] != sh[2..] || su[0] != sh[0] {
            return Err(Error::Shape {
                op: "ffcm",
                msg: format!("decoder features {su:?} and heatmap {sh:?} are not aligned"),
            });
        }
        if si[0] != su[0] || si[2] != 4 * su[2] || si[3] != 4 * su[3] {
            return Err(Error::Shape {
                op: "ffcm",
                msg: format!("image {si:?} is not 4x the decoder grid {su:?}"),
            });
        }
        let (b, h, w) = (si[0], si[2], si[3]);
        let up_u = ctx.tape.resize_bilinear(u5, h, w)?;
        let up_h = ctx.tape.resize_bilinear(h2, h, w)?;
        let c = self.context(ctx, image)?;
        let c = ctx.tape.reshape(c, &[b, self.context_dim, 1, 1])?;
        let c = ctx.tape.expand(c, &[b, self.context_dim, h, w])?;
        let u6 = ctx.tape.concat(&[up_u, up_h, c], 1)?;
        self.fuse.forward(ctx, u6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn zero_mlp_channel_attention_is_half() {
        let mut store = ParamStore::<f64>::new();
        let cbam = CbamParams::new(&mut Init::new(&mut store, 2), "cbam", 8, 4).unwrap();
        store.zero_where(|n| n.contains("fc"));
        let mut ctx = Ctx::eval(&store);
        let f = ctx.tape.constant(Tensor::full(&[1, 8, 3, 3], 2.0));
        let ca = cbam.channel_attention(&mut ctx, f).unwrap();
        assert_eq!(ctx.tape.shape(ca), &[1, 8, 1, 1]);
        assert!(ctx.tape.value(ca).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_conv_spatial_attention_is_half() {
        let mut store = ParamStore::<f64>::new();
        let cbam = CbamParams::new(&mut Init::new(&mut store, 2), "cbam", 4, 4).unwrap();
        store.zero_where(|n| n.contains("spatial"));
        let mut ctx = Ctx::eval(&store);
        let f = ctx.tape.constant(Tensor::full(&[2, 4, 5, 5], -1.0));
        let sa = cbam.spatial_attention(&mut ctx, f).unwrap();
        assert_eq!(ctx.tape.shape(sa), &[2, 1, 5, 5]);
        assert!(ctx.tape.value(sa).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn cbam_requires_divisible_reduction() {
        let mut store = ParamStore::<f64>::new();
        assert!(CbamParams::new(&mut Init::new(&mut store, 2), "cbam", 6, 4).is_err());
    }

    #[test]
    fn patch_embed_shape_and_divisibility() {
        let mut store = ParamStore::<f32>::new();
        let pe = Downsample::patch_embed(&mut Init::new(&mut store, 0), "pe", 1, 8);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(Tensor::full(&[1, 1, 64, 64], 0.3));
        let y = pe.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[1, 8, 16, 16]);
        let bad = ctx.tape.constant(Tensor::full(&[1, 1, 62, 64], 0.3));
        assert!(matches!(pe.forward(&mut ctx, bad), Err(Error::Divisibility { .. })));
    }

    #[test]
    fn ffcm_shape_contract() {
        let mut store = ParamStore::<f32>::new();
        let f = FfcmParams::new(&mut Init::new(&mut store, 0), "ffcm", 1, 16, 4, 8, 32, 8);
        let mut ctx = Ctx::eval(&store);
        let u5 = ctx.tape.constant(Tensor::full(&[1, 16, 8, 8], 0.1));
        let h2 = ctx.tape.constant(Tensor::full(&[1, 4, 8, 8], 0.1));
        let im = ctx.tape.constant(Tensor::full(&[1, 1, 32, 32], 0.1));
        let y = f.forward(&mut ctx, u5, h2, im).unwrap();
        assert_eq!(ctx.tape.shape(y), &[1, 8, 32, 32]);
        let bad = ctx.tape.constant(Tensor::full(&[1, 4, 4, 4], 0.1));
        assert!(f.forward(&mut ctx, u5, bad, im).is_err());
    }
}
