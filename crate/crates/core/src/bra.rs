//! Bi-level routing attention and the BiFormer block.
//!
//! A feature map is cut into an `S×S` grid of regions. Region-mean queries
//! and keys give a region-to-region affinity; each query region keeps the
//! top-k key regions and attends only to their tokens. A depthwise 5×5
//! convolution of the values (local context enhancement) is added back.
//!
//! Internally everything runs in token layout `[B, H, W, C]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Conv2dParams;
use crate::nn::{AttentionRecord, Conv, Ctx, Init, LayerNorm, Linear};
use crate::ops::topk_rows;
use crate::tape::{NodeId, Tape};
use crate::tensor::{IndexMatrix, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BraConfig {
    /// Regions per side; the map is split into `region_grid²` regions.
    pub region_grid: usize,
    pub topk: usize,
    pub heads: usize,
    pub channels: usize,
    pub lce_kernel: usize,
}

impl BraConfig {
    pub fn new(region_grid: usize, topk: usize, heads: usize, channels: usize) -> Result<Self> {
        let cfg = Self {
            region_grid,
            topk,
            heads,
            channels,
            lce_kernel: 5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn regions(&self) -> usize {
        self.region_grid * self.region_grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.region_grid == 0 || self.heads == 0 || self.channels == 0 {
            return Err(Error::Invalid(
                "region grid, heads and channels must be positive".into(),
            ));
        }
        if self.topk == 0 || self.topk > self.regions() {
            return Err(Error::Invalid(format!(
                "topk {} outside 1..={} for a {}x{} region grid",
                self.topk,
                self.regions(),
                self.region_grid,
                self.region_grid
            )));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Divisibility {
                what: "channels".into(),
                divisor: self.heads,
                value: self.channels,
            });
        }
        if self.lce_kernel % 2 == 0 {
            return Err(Error::Invalid("LCE kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn check_map(&self, h: usize, w: usize) -> Result<()> {
        for (what, v) in [("feature height", h), ("feature width", w)] {
            if v % self.region_grid != 0 {
                return Err(Error::Divisibility {
                    what: what.into(),
                    divisor: self.region_grid,
                    value: v,
                });
            }
        }
        Ok(())
    }
}

/// Top-k routed regions for every query region of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingIndices {
    pub indices: IndexMatrix,
}

/// Region-mean queries and keys, each `[S², C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSummaries<T: Scalar> {
    pub q_mean: Tensor<T>,
    pub k_mean: Tensor<T>,
}

/// `[B,H,W,C]` tokens to `[B, S², HW/S², C]` regions (row-major grid,
/// row-major tokens within a region).
pub fn partition_tokens<T: Scalar>(tape: &mut Tape<T>, x: NodeId, s: usize) -> Result<NodeId> {
    let sh = tape.shape(x).to_vec();
    let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    check_divisible(h, w, s)?;
    let (rh, rw) = (h / s, w / s);
    let t = tape.reshape(x, &[b, s, rh, s, rw, c])?;
    let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(t, &[b, s * s, rh * rw, c])
}

/// Inverse of [`partition_tokens`].
pub fn merge_tokens<T: Scalar>(tape: &mut Tape<T>, x: NodeId, s: usize, h: usize, w: usize) -> Result<NodeId> {
    let sh = tape.shape(x).to_vec();
    let (b, c) = (sh[0], sh[3]);
    check_divisible(h, w, s)?;
    let (rh, rw) = (h / s, w / s);
    let t = tape.reshape(x, &[b, s, s, rh, rw, c])?;
    let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(t, &[b, h, w, c])
}

/// `[B,C,H,W]` feature map to `[B, S², HW/S², C]` regions.
pub fn region_partition<T: Scalar>(tape: &mut Tape<T>, x: NodeId, s: usize) -> Result<NodeId> {
    let t = tape.permute(x, &[0, 2, 3, 1])?;
    partition_tokens(tape, t, s)
}

/// `[B, S², HW/S², C]` regions back to a `[B,C,H,W]` feature map.
pub fn region_merge<T: Scalar>(tape: &mut Tape<T>, x: NodeId, s: usize, h: usize, w: usize) -> Result<NodeId> {
    let t = merge_tokens(tape, x, s, h, w)?;
    tape.permute(t, &[0, 3, 1, 2])
}

fn check_divisible(h: usize, w: usize, s: usize) -> Result<()> {
    for (what, v) in [("feature height", h), ("feature width", w)] {
        if s == 0 || v % s != 0 {
            return Err(Error::Divisibility {
                what: what.into(),
                divisor: s,
                value: v,
            });
        }
    }
    Ok(())
}

/// Mean token of every region of `[R, T, C]` values, giving `[R, C]`.
pub fn region_means<T: Scalar>(regions: &[T], r: usize, t: usize, c: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); r * c];
    let inv = T::of(1.0 / t as f64);
    for ri in 0..r {
        let acc = &mut out[ri * c..(ri + 1) * c];
        for ti in 0..t {
            let tok = &regions[(ri * t + ti) * c..(ri * t + ti + 1) * c];
            for (a, &v) in acc.iter_mut().zip(tok) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    Tensor::new(&[r, c], out).expect("region means")
}

/// Region affinity `q_mean · k_meanᵀ`, `[R, R]`.
pub fn region_affinity<T: Scalar>(s: &RegionSummaries<T>) -> Result<Tensor<T>> {
    let (qs, ks) = (s.q_mean.shape(), s.k_mean.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::Dim {
            op: "routing",
            axis: "channels",
            expected: qs.get(1).copied().unwrap_or(0),
            got: ks.get(1).copied().unwrap_or(0),
        });
    }
    let (r, rk, c) = (qs[0], ks[0], qs[1]);
    let (q, k) = (s.q_mean.data(), s.k_mean.data());
    let mut a = Vec::with_capacity(r * rk);
    for i in 0..r {
        for j in 0..rk {
            let mut acc = T::zero();
            for ch in 0..c {
                acc += q[i * c + ch] * k[j * c + ch];
            }
            a.push(acc);
        }
    }
    Tensor::new(&[r, rk], a)
}

/// Top-k key regions per query region.
pub fn routing<T: Scalar>(s: &RegionSummaries<T>, k: usize) -> Result<RoutingIndices> {
    let a = region_affinity(s)?;
    Ok(RoutingIndices {
        indices: topk_rows(&a, k)?,
    })
}

/// How token attention is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Region routing with top-k gathering.
    #[default]
    Routed,
    /// Every token attends to every token (reference path).
    Dense,
}

#[derive(Clone, Debug)]
pub struct BraParams {
    pub cfg: BraConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub lce: Conv,
    pub out: Linear,
}

impl BraParams {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: BraConfig) -> Self {
        let c = cfg.channels;
        init.scope(name, |i| Self {
            cfg,
            q: Linear::new(i, "q", c, c),
            k: Linear::new(i, "k", c, c),
            v: Linear::new(i, "v", c, c),
            lce: Conv::new(
                i,
                "lce",
                c,
                c,
                cfg.lce_kernel,
                Conv2dParams::depthwise(c, cfg.lce_kernel / 2),
                true,
            ),
            out: Linear::new(i, "out", c, c),
        })
    }

    /// Attention over a `[B,C,H,W]` map, returning the same shape.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId, mode: AttentionMode) -> Result<NodeId> {
        let t = ctx.tape.permute(x, &[0, 2, 3, 1])?;
        let y = self.forward_tokens(ctx, t, mode, "bra")?;
        ctx.tape.permute(y, &[0, 3, 1, 2])
    }

    /// Attention over `[B,H,W,C]` tokens.
    pub fn forward_tokens<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: NodeId,
        mode: AttentionMode,
        label: &str,
    ) -> Result<NodeId> {
        let cfg = self.cfg;
        let sh = ctx.tape.shape(x).to_vec();
        if sh.len() != 4 {
            return Err(Error::Shape {
                op: "bra",
                msg: format!("expected [B,H,W,C] tokens, got {sh:?}"),
            });
        }
        let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
        if c != cfg.channels {
            return Err(Error::Dim {
                op: "bra",
                axis: "channels",
                expected: cfg.channels,
                got: c,
            });
        }
        cfg.check_map(h, w)?;
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, x)?;
        let v = self.v.forward(ctx, x)?;
        let (heads, d) = (cfg.heads, c / cfg.heads);
        let scale = T::of(1.0 / (d as f64).sqrt());

        let macs_before = ctx.tape.matmul_macs();
        let attended = match mode {
            AttentionMode::Routed => {
                let s = cfg.region_grid;
                let (r, tr) = (s * s, h * w / (s * s));
                let qr = partition_tokens(&mut ctx.tape, q, s)?;
                let kr = partition_tokens(&mut ctx.tape, k, s)?;
                let vr = partition_tokens(&mut ctx.tape, v, s)?;
                let idx = self.route(&ctx.tape, qr, kr, b, r, tr, c)?;
                let kk = cfg.topk;
                let kg = ctx.tape.gather(kr, &idx, kk)?;
                let vg = ctx.tape.gather(vr, &idx, kk)?;
                // heads: [B,R,N,h,d] -> [B,h,R,N,d]
                let qh = split_heads(&mut ctx.tape, qr, &[b, r, tr], heads, d)?;
                let kgh = split_heads(&mut ctx.tape, kg, &[b, r, kk * tr], heads, d)?;
                let vgh = split_heads(&mut ctx.tape, vg, &[b, r, kk * tr], heads, d)?;
                let scores = ctx.tape.matmul(qh, kgh, true)?;
                let scores = ctx.tape.scale(scores, scale);
                let attn = ctx.tape.softmax(scores)?;
                let o = ctx.tape.matmul(attn, vgh, false)?;
                let o = ctx.tape.permute(o, &[0, 2, 3, 1, 4])?;
                let o = ctx.tape.reshape(o, &[b, r, tr, c])?;
                merge_tokens(&mut ctx.tape, o, s, h, w)?
            }
            AttentionMode::Dense => {
                let n = h * w;
                let qf = ctx.tape.reshape(q, &[b, 1, n, c])?;
                let kf = ctx.tape.reshape(k, &[b, 1, n, c])?;
                let vf = ctx.tape.reshape(v, &[b, 1, n, c])?;
                let qh = split_heads(&mut ctx.tape, qf, &[b, 1, n], heads, d)?;
                let kh = split_heads(&mut ctx.tape, kf, &[b, 1, n], heads, d)?;
                let vh = split_heads(&mut ctx.tape, vf, &[b, 1, n], heads, d)?;
                let scores = ctx.tape.matmul(qh, kh, true)?;
                let scores = ctx.tape.scale(scores, scale);
                let attn = ctx.tape.softmax(scores)?;
                let o = ctx.tape.matmul(attn, vh, false)?;
                let o = ctx.tape.permute(o, &[0, 2, 3, 1, 4])?;
                ctx.tape.reshape(o, &[b, h, w, c])?
            }
        };
        let macs = ctx.tape.matmul_macs() - macs_before;
        ctx.attention.push(AttentionRecord {
            label: label.to_string(),
            tokens: h * w,
            regions: cfg.regions(),
            topk: cfg.topk,
            channels: c,
            batch: b,
            macs,
            routed: mode == AttentionMode::Routed,
        });

        let vmap = ctx.tape.permute(v, &[0, 3, 1, 2])?;
        let lce = self.lce.forward(ctx, vmap)?;
        let lce = ctx.tape.permute(lce, &[0, 2, 3, 1])?;
        let o = ctx.tape.add(attended, lce)?;
        self.out.forward(ctx, o)
    }

    /// Routing indices for every image, flattened `[B, R, k]`.
    #[allow(clippy::too_many_arguments)]
    fn route<T: Scalar>(
        &self,
        tape: &Tape<T>,
        qr: NodeId,
        kr: NodeId,
        b: usize,
        r: usize,
        tr: usize,
        c: usize,
    ) -> Result<Vec<usize>> {
        let per = r * tr * c;
        let (qv, kv) = (tape.value(qr).data(), tape.value(kr).data());
        let mut idx = Vec::with_capacity(b * r * self.cfg.topk);
        for bi in 0..b {
            let summaries = RegionSummaries {
                q_mean: region_means(&qv[bi * per..(bi + 1) * per], r, tr, c),
                k_mean: region_means(&kv[bi * per..(bi + 1) * per], r, tr, c),
            };
            idx.extend_from_slice(&routing(&summaries, self.cfg.topk)?.indices.data);
        }
        Ok(idx)
    }
}

fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: NodeId, lead: &[usize], heads: usize, d: usize) -> Result<NodeId> {
    let (b, r, n) = (lead[0], lead[1], lead[2]);
    let t = tape.reshape(x, &[b, r, n, heads, d])?;
    tape.permute(t, &[0, 3, 1, 2, 4])
}

/// `y1 = x + DWConv3×3(x)`, `y2 = y1 + BRA(LN(y1))`, `y = y2 + MLP(LN(y2))`.
#[derive(Clone, Debug)]
pub struct BiFormerBlock {
    pub pos: Conv,
    pub norm1: LayerNorm,
    pub attn: BraParams,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BiFormerBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: BraConfig, mlp_ratio: usize) -> Self {
        let c = cfg.channels;
        init.scope(name, |i| Self {
            pos: Conv::new(i, "pos", c, c, 3, Conv2dParams::depthwise(c, 1), true),
            norm1: LayerNorm::new(i, "norm1", c),
            attn: BraParams::new(i, "attn", cfg),
            norm2: LayerNorm::new(i, "norm2", c),
            fc1: Linear::new(i, "fc1", c, c * mlp_ratio),
            fc2: Linear::new(i, "fc2", c * mlp_ratio, c),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: NodeId,
        mode: AttentionMode,
        label: &str,
    ) -> Result<NodeId> {
        let pos = self.pos.forward(ctx, x)?;
        let y1 = ctx.tape.add(x, pos)?;
        let t = ctx.tape.permute(y1, &[0, 2, 3, 1])?;
        let n1 = self.norm1.forward(ctx, t)?;
        let a = self.attn.forward_tokens(ctx, n1, mode, label)?;
        let y2 = ctx.tape.add(t, a)?;
        let n2 = self.norm2.forward(ctx, y2)?;
        let m = self.fc1.forward(ctx, n2)?;
        let m = ctx.tape.gelu(m);
        let m = self.fc2.forward(ctx, m)?;
        let y = ctx.tape.add(y2, m)?;
        ctx.tape.permute(y, &[0, 3, 1, 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn iota(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn partition_places_tokens_by_region() {
        // 1 channel 4x4 map, value = linear pixel index
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(iota(&[1, 1, 4, 4]));
        let p = region_partition(&mut tape, x, 2).unwrap();
        assert_eq!(tape.shape(p), &[1, 4, 4, 1]);
        let v = tape.value(p);
        // token (0,0) is region 0 slot 0; token (2,3) = pixel 11 is region 3
        assert_eq!(v.at(&[0, 0, 0, 0]), 0.0);
        let region3: Vec<f64> = (0..4).map(|t| v.at(&[0, 3, t, 0])).collect();
        assert_eq!(region3, vec![10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn single_region_is_row_major() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(iota(&[1, 1, 3, 3]));
        let p = region_partition(&mut tape, x, 1).unwrap();
        assert_eq!(tape.value(p).data(), iota(&[9]).data());
    }

    #[test]
    fn partition_rejects_indivisible_map() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(iota(&[1, 1, 6, 4]));
        assert!(matches!(
            region_partition(&mut tape, x, 4),
            Err(Error::Divisibility { .. })
        ));
    }

    #[test]
    fn routing_identity_summaries() {
        let eye = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = RegionSummaries {
            q_mean: eye.clone(),
            k_mean: eye,
        };
        assert_eq!(routing(&s, 1).unwrap().indices.to_rows(), vec![vec![0], vec![1]]);
        let full = routing(&s, 2).unwrap();
        for row in full.indices.to_rows() {
            let mut r = row.clone();
            r.sort();
            assert_eq!(r, vec![0, 1]);
        }
    }

    #[test]
    fn config_invariants() {
        assert!(BraConfig::new(2, 5, 1, 8).is_err());
        assert!(BraConfig::new(2, 0, 1, 8).is_err());
        assert!(BraConfig::new(2, 4, 3, 8).is_err());
        assert!(BraConfig::new(2, 4, 2, 8).is_ok());
    }

    #[test]
    fn zero_value_path_leaves_output_bias() {
        let mut store = ParamStore::<f64>::new();
        let cfg = BraConfig::new(2, 2, 2, 4).unwrap();
        let p = BraParams::new(&mut Init::new(&mut store, 5), "bra", cfg);
        store.zero_where(|n| n.starts_with("bra.v.") || n.starts_with("bra.lce."));
        let bias = store.get(p.out.bias).data().to_vec();
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(iota(&[1, 4, 4, 4]).cast());
        let y = p.forward(&mut ctx, x, AttentionMode::Routed).unwrap();
        let out = ctx.tape.value(y);
        for ch in 0..4 {
            for i in 0..4 {
                for j in 0..4 {
                    assert!((out.at(&[0, ch, i, j]) - bias[ch]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn biformer_shape_contract() {
        let mut store = ParamStore::<f32>::new();
        let cfg = BraConfig::new(2, 2, 2, 16).unwrap();
        let blk = BiFormerBlock::new(&mut Init::new(&mut store, 1), "blk", cfg, 3);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(Tensor::full(&[1, 16, 8, 8], 0.5));
        let y = blk.forward(&mut ctx, x, AttentionMode::Routed, "s").unwrap();
        assert_eq!(ctx.tape.shape(y), &[1, 16, 8, 8]);
    }
}
