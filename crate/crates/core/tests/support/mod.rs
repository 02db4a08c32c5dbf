//! Plain nested-loop reference implementations in f64. Nothing here calls
//! into the library's kernels; only parameter values are read from the store.
#![allow(dead_code)]

use hyatt_core::nn::{Conv, Linear, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NORM_EPS: f64 = 1e-5;

/// Dense row-major 4-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array4 {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Array4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    pub fn idx(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        ((a * self.shape[1] + b) * self.shape[2] + c) * self.shape[3] + d
    }

    pub fn get(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        self.data[self.idx(a, b, c, d)]
    }

    pub fn set(&mut self, a: usize, b: usize, c: usize, d: usize, v: f64) {
        let i = self.idx(a, b, c, d);
        self.data[i] = v;
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `max |a - b| / max |b|`.
pub fn max_rel(a: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(a.len(), reference.len());
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(reference).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

/// Direct convolution; weight `[cout, cin/groups, kh, kw]`.
pub fn conv2d(x: &Array4, w: &Array4, bias: Option<&[f64]>, spec: &ConvSpec) -> Array4 {
    let [b, cin, h, wd] = x.shape;
    let [cout, cig, kh, kw] = w.shape;
    let cog = cout / spec.groups;
    assert_eq!(cig * spec.groups, cin);
    let oh = (h + 2 * spec.pad - spec.dilation * (kh - 1) - 1) / spec.stride + 1;
    let ow = (wd + 2 * spec.pad - spec.dilation * (kw - 1) - 1) / spec.stride + 1;
    let mut y = Array4::zeros([b, cout, oh, ow]);
    for n in 0..b {
        for co in 0..cout {
            let g = co / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias.map_or(0.0, |bv| bv[co]);
                    for ci in 0..cig {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.get(n, g * cig + ci, iy as usize, ix as usize) * w.get(co, ci, ky, kx);
                            }
                        }
                    }
                    y.set(n, co, oy, ox, s);
                }
            }
        }
    }
    y
}

/// Scatter form of the transposed convolution; weight `[cin, cout, k, k]`.
pub fn conv_transpose2d(x: &Array4, w: &Array4, bias: Option<&[f64]>, stride: usize) -> Array4 {
    let [b, cin, h, wd] = x.shape;
    let [_, cout, kh, kw] = w.shape;
    let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
    let mut y = Array4::zeros([b, cout, oh, ow]);
    for n in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    y.set(n, co, oy, ox, bias.map_or(0.0, |bv| bv[co]));
                }
            }
        }
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x.get(n, ci, iy, ix);
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let i = y.idx(n, co, iy * stride + ky, ix * stride + kx);
                                y.data[i] += v * w.get(ci, co, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn param(store: &ParamStore<f64>, id: hyatt_core::nn::ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

pub fn param4(store: &ParamStore<f64>, id: hyatt_core::nn::ParamId) -> Array4 {
    let t = store.get(id);
    let s = t.shape();
    Array4 {
        shape: [s[0], s[1], s[2], s[3]],
        data: t.data().to_vec(),
    }
}

pub fn apply_conv(store: &ParamStore<f64>, conv: &Conv, x: &Array4) -> Array4 {
    let p = conv.params;
    let spec = ConvSpec {
        stride: p.stride,
        pad: p.padding,
        dilation: p.dilation,
        groups: p.groups,
    };
    let bias = conv.bias.map(|b| param(store, b));
    conv2d(x, &param4(store, conv.weight), bias.as_deref(), &spec)
}

/// `x W^T + b` on a row vector.
pub fn linear_row(store: &ParamStore<f64>, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(lin.weight);
    let (fout, fin) = (w.shape()[0], w.shape()[1]);
    let b = param(store, lin.bias);
    (0..fout)
        .map(|o| b[o] + (0..fin).map(|i| w.data()[o * fin + i] * x[i]).sum::<f64>())
        .collect()
}

/// Row-wise softmax with max subtraction.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Indices of the `k` largest entries by repeated selection (ties → lower index).
pub fn topk_by_selection(row: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; row.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &v) in row.iter().enumerate() {
            if !taken[i] && best.map_or(true, |b| v > row[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k within row length");
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Attention weights for one query against a key set, per head.
fn attend(q: &[f64], keys: &[&[f64]], values: &[&[f64]], heads: usize) -> Vec<f64> {
    let c = q.len();
    let d = c / heads;
    let mut out = vec![0.0; c];
    for hd in 0..heads {
        let r = hd * d..(hd + 1) * d;
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let p = softmax(&scores);
        for (pj, v) in p.iter().zip(values) {
            for ch in r.clone() {
                out[ch] += pj * v[ch];
            }
        }
    }
    out
}

/// Everything the attention oracles need from a parameter set.
pub struct AttentionWeights<'a> {
    pub store: &'a ParamStore<f64>,
    pub q: &'a Linear,
    pub k: &'a Linear,
    pub v: &'a Linear,
    pub lce: &'a Conv,
    pub out: &'a Linear,
    pub heads: usize,
}

/// Token projections for one `[C,H,W]` image, returned as `[HW][C]` rows.
fn project(wts: &AttentionWeights<'_>, lin: &Linear, x: &Array4, n: usize) -> Vec<Vec<f64>> {
    let [_, c, h, w] = x.shape;
    (0..h * w)
        .map(|t| {
            let row: Vec<f64> = (0..c).map(|ch| x.get(n, ch, t / w, t % w)).collect();
            linear_row(wts.store, lin, &row)
        })
        .collect()
}

/// LCE on V plus output projection, shared by both oracles.
fn finish(wts: &AttentionWeights<'_>, attended: Vec<Vec<Vec<f64>>>, vs: &[Vec<Vec<f64>>], shape: [usize; 4]) -> Array4 {
    let [b, c, h, w] = shape;
    let mut vmap = Array4::zeros(shape);
    for (n, rows) in vs.iter().enumerate() {
        for (t, row) in rows.iter().enumerate() {
            for ch in 0..c {
                vmap.set(n, ch, t / w, t % w, row[ch]);
            }
        }
    }
    let lce = apply_conv(wts.store, wts.lce, &vmap);
    let mut y = Array4::zeros([b, c, h, w]);
    for (n, rows) in attended.iter().enumerate() {
        for (t, row) in rows.iter().enumerate() {
            let mixed: Vec<f64> = (0..c).map(|ch| row[ch] + lce.get(n, ch, t / w, t % w)).collect();
            for (ch, v) in linear_row(wts.store, wts.out, &mixed).into_iter().enumerate() {
                y.set(n, ch, t / w, t % w, v);
            }
        }
    }
    y
}

/// Full softmax attention of every token over every token, `[B,C,H,W]` in and out.
pub fn dense_attention(wts: &AttentionWeights<'_>, x: &Array4) -> Array4 {
    let b = x.shape[0];
    let mut attended = Vec::new();
    let mut vs = Vec::new();
    for n in 0..b {
        let q = project(wts, wts.q, x, n);
        let k = project(wts, wts.k, x, n);
        let v = project(wts, wts.v, x, n);
        let keys: Vec<&[f64]> = k.iter().map(Vec::as_slice).collect();
        let vals: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
        attended.push(q.iter().map(|qi| attend(qi, &keys, &vals, wts.heads)).collect());
        vs.push(v);
    }
    finish(wts, attended, &vs, x.shape)
}

/// Region id of pixel `(y, x)` on an `s×s` grid over an `h×w` map.
pub fn region_of(y: usize, x: usize, h: usize, w: usize, s: usize) -> usize {
    (y / (h / s)) * s + x / (w / s)
}

/// Region-to-region routing for one image: mean-pooled queries and keys,
/// affinity by dot product, top-k by sort.
pub fn route(q: &[Vec<f64>], k: &[Vec<f64>], h: usize, w: usize, s: usize, topk: usize) -> Vec<Vec<usize>> {
    let c = q[0].len();
    let r = s * s;
    let mut qm = vec![vec![0.0; c]; r];
    let mut km = vec![vec![0.0; c]; r];
    let per = (h * w / r) as f64;
    for t in 0..h * w {
        let reg = region_of(t / w, t % w, h, w, s);
        for ch in 0..c {
            qm[reg][ch] += q[t][ch] / per;
            km[reg][ch] += k[t][ch] / per;
        }
    }
    (0..r)
        .map(|i| {
            let aff: Vec<f64> = (0..r).map(|j| (0..c).map(|ch| qm[i][ch] * km[j][ch]).sum()).collect();
            topk_by_selection(&aff, topk)
        })
        .collect()
}

/// Routed attention: each token attends over the tokens of its region's
/// `topk` routed regions.
pub fn routed_attention(wts: &AttentionWeights<'_>, x: &Array4, s: usize, topk: usize) -> Array4 {
    let [b, _, h, w] = x.shape;
    let mut attended = Vec::new();
    let mut vs = Vec::new();
    for n in 0..b {
        let q = project(wts, wts.q, x, n);
        let k = project(wts, wts.k, x, n);
        let v = project(wts, wts.v, x, n);
        let routes = route(&q, &k, h, w, s, topk);
        let rows = (0..h * w)
            .map(|t| {
                let reg = region_of(t / w, t % w, h, w, s);
                let mut keys: Vec<&[f64]> = Vec::new();
                let mut vals: Vec<&[f64]> = Vec::new();
                for &target in &routes[reg] {
                    for u in 0..h * w {
                        if region_of(u / w, u % w, h, w, s) == target {
                            keys.push(&k[u]);
                            vals.push(&v[u]);
                        }
                    }
                }
                attend(&q[t], &keys, &vals, wts.heads)
            })
            .collect();
        attended.push(rows);
        vs.push(v);
    }
    finish(wts, attended, &vs, x.shape)
}

/// Channel attention `sigmoid(MLP(avg) + MLP(max))`, `[B][C]`.
pub fn channel_attention(store: &ParamStore<f64>, fc1: &Linear, fc2: &Linear, f: &Array4) -> Vec<Vec<f64>> {
    let [b, c, h, w] = f.shape;
    let mlp = |v: &[f64]| {
        let hid: Vec<f64> = linear_row(store, fc1, v).into_iter().map(|z| z.max(0.0)).collect();
        linear_row(store, fc2, &hid)
    };
    (0..b)
        .map(|n| {
            let mut avg = vec![0.0; c];
            let mut max = vec![f64::NEG_INFINITY; c];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        avg[ch] += f.get(n, ch, y, x) / (h * w) as f64;
                        max[ch] = max[ch].max(f.get(n, ch, y, x));
                    }
                }
            }
            let (a, m) = (mlp(&avg), mlp(&max));
            a.iter().zip(&m).map(|(p, q)| sigmoid(p + q)).collect()
        })
        .collect()
}

/// Spatial attention `sigmoid(conv([avg_c; max_c]))`, `[B,1,H,W]`.
pub fn spatial_attention(store: &ParamStore<f64>, conv: &Conv, f: &Array4) -> Array4 {
    let [b, c, h, w] = f.shape;
    let mut stack = Array4::zeros([b, 2, h, w]);
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let vals: Vec<f64> = (0..c).map(|ch| f.get(n, ch, y, x)).collect();
                stack.set(n, 0, y, x, vals.iter().sum::<f64>() / c as f64);
                stack.set(n, 1, y, x, vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    let mut z = apply_conv(store, conv, &stack);
    z.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    z
}

/// `SA(F') ⊙ F'` with `F' = CA(F) ⊙ F`.
pub fn cbam(store: &ParamStore<f64>, p: &hyatt_core::blocks::CbamParams, f: &Array4) -> Array4 {
    let [b, c, h, w] = f.shape;
    let ca = channel_attention(store, &p.fc1, &p.fc2, f);
    let mut fc = f.clone();
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let i = fc.idx(n, ch, y, x);
                    fc.data[i] *= ca[n][ch];
                }
            }
        }
    }
    let sa = spatial_attention(store, &p.spatial, &fc);
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let i = fc.idx(n, ch, y, x);
                    fc.data[i] *= sa.get(n, 0, y, x);
                }
            }
        }
    }
    fc
}

/// Batch normalisation with running statistics (inference form).
pub fn batch_norm_eval(store: &ParamStore<f64>, bn: &hyatt_core::nn::BatchNorm, x: &Array4) -> Array4 {
    let (g, be) = (param(store, bn.gamma), param(store, bn.beta));
    let (m, v) = (param(store, bn.running_mean), param(store, bn.running_var));
    let mut y = x.clone();
    let [b, c, h, w] = x.shape;
    for n in 0..b {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let i = y.idx(n, ch, yy, xx);
                    y.data[i] = g[ch] * (x.data[i] - m[ch]) / (v[ch] + NORM_EPS).sqrt() + be[ch];
                }
            }
        }
    }
    y
}

/// Batch normalisation with batch statistics (biased variance).
pub fn batch_norm_train(store: &ParamStore<f64>, bn: &hyatt_core::nn::BatchNorm, x: &Array4) -> Array4 {
    let (g, be) = (param(store, bn.gamma), param(store, bn.beta));
    let [b, c, h, w] = x.shape;
    let count = (b * h * w) as f64;
    let mut y = x.clone();
    for ch in 0..c {
        let mut vals = Vec::new();
        for n in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    vals.push(x.get(n, ch, yy, xx));
                }
            }
        }
        let mean = vals.iter().sum::<f64>() / count;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        for n in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    let i = y.idx(n, ch, yy, xx);
                    y.data[i] = g[ch] * (x.data[i] - mean) / (var + NORM_EPS).sqrt() + be[ch];
                }
            }
        }
    }
    y
}

pub fn relu(x: &Array4) -> Array4 {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub fn add(a: &Array4, b: &Array4) -> Array4 {
    assert_eq!(a.shape, b.shape);
    Array4 {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

/// Attention residual module, step by step.
pub fn arm(store: &ParamStore<f64>, p: &hyatt_core::blocks::ArmParams, f: &Array4, training: bool) -> Array4 {
    let bn = |bn, x: &Array4| {
        if training {
            batch_norm_train(store, bn, x)
        } else {
            batch_norm_eval(store, bn, x)
        }
    };
    let h = apply_conv(store, &p.conv1, f);
    let h = relu(&bn(&p.norm1, &h));
    let h = apply_conv(store, &p.conv2, &h);
    let h = bn(&p.norm2, &h);
    let h = cbam(store, &p.cbam, &h);
    relu(&add(&apply_conv(store, &p.residual, f), &h))
}

/// `A·exp(-((x-lx)² + (y-ly)²)/(2σ²))` evaluated pixel by pixel.
pub fn gaussian_map(lx: f64, ly: f64, h: usize, w: usize, sigma: f64, amplitude: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d2 = (x as f64 - lx) * (x as f64 - lx) + (y as f64 - ly) * (y as f64 - ly);
            out.push(amplitude * (-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    out
}

/// Radial errors by explicit loop.
pub fn radial_errors(pred: &[[f64; 2]], gt: &[[f64; 2]], spacing: Option<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..pred.len() {
        let dx = pred[i][0] - gt[i][0];
        let dy = pred[i][1] - gt[i][1];
        out.push((dx * dx + dy * dy).sqrt() * spacing.unwrap_or(1.0));
    }
    out
}

pub fn mean(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s / v.len() as f64
}

/// Percent of errors strictly below `z`.
pub fn detection_rate(errors: &[f64], z: f64) -> f64 {
    let mut hit = 0usize;
    for &r in errors {
        if r < z {
            hit += 1;
        }
    }
    hit as f64 / errors.len() as f64 * 100.0
}
