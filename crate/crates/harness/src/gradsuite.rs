//! Finite-difference checks over every differentiable tape operation, the
//! model building blocks, and the end-to-end network.

use hyatt_core::blocks::{ArmParams, CbamParams, Downsample, FfcmParams};
use hyatt_core::bra::{AttentionMode, BiFormerBlock, BraConfig, BraParams};
use hyatt_core::gradcheck::{
    check_params, compare, op_analytic, op_labels, op_numeric, param_analytic, param_labels, param_numeric,
    random_projection, sample_coords, FdSettings, GradCheckReport,
};
use hyatt_core::heatmap::{combined_loss, LandmarkSet};
use hyatt_core::kernels::Conv2dParams;
use hyatt_core::net::{HyattConfig, HyattNet};
use hyatt_core::nn::{Ctx, Init, ParamId, ParamStore};
use hyatt_core::tape::{NodeId, PoolKind, Tape};
use hyatt_core::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const END_TO_END_TOLERANCE: f64 = 1e-2;
pub const END_TO_END_SAMPLES: usize = 24;
/// Independent input/weight draws per unit check; reports are merged.
pub const SEEDS: u64 = 5;

/// Scalar type, finite-difference settings and tolerance of a unit-check run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// 32-bit, step 1e-3, tolerance 1e-2.
    Default,
    /// 64-bit, tolerance 1e-5.
    Extended,
}

impl Precision {
    pub fn fd(self) -> FdSettings {
        match self {
            Precision::Default => FdSettings::single(),
            Precision::Extended => FdSettings::extended(),
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Precision::Default => 1e-2,
            Precision::Extended => 1e-5,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Precision::Default => "f32",
            Precision::Extended => "f64",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel < self.tolerance
    }

    pub fn line(&self) -> String {
        let worst = match &self.report.worst {
            Some((at, a, n)) if !self.passed() => format!(" worst={at} analytic={a:.6e} numeric={n:.6e}"),
            _ => String::new(),
        };
        format!(
            "{} {:<28} checked={:<5} max_rel={:.3e} tol={:.0e}{worst}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.report.checked,
            self.report.max_rel,
            self.tolerance
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero, for inputs that feed a ReLU.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| rng.gen_range(0.1..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape, v).expect("shape")
}

/// Distinct values at least 0.05 apart, so maxima are stable under perturbation.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    Tensor::new(shape, ranks.into_iter().map(|r| r as f64 * 0.05 - 1.0).collect()).expect("shape")
}

type OpFn<T> = Box<dyn Fn(&mut Tape<T>, &[NodeId]) -> hyatt_core::Result<NodeId>>;

/// Which gradient a round produces.
#[derive(Clone, Copy, Debug)]
enum Route {
    Analytic,
    Numeric(FdSettings),
}

/// One named, flattened gradient.
struct Grads {
    name: String,
    labels: Vec<String>,
    values: Vec<f64>,
}

/// Inputs are drawn in 64-bit; in default precision they are rounded to
/// 32-bit so both gradient routes see the same representable point.
fn at_point(t: &Tensor<f64>, single: bool) -> Tensor<f64> {
    if single {
        t.cast::<f32>().cast()
    } else {
        t.clone()
    }
}

type Round<'a> = &'a dyn Fn(u64, Route, bool) -> Result<Vec<Grads>>;

/// Pair the analytic gradient at `precision` with central differences
/// evaluated in 64-bit, over `SEEDS` draws merged per check.
fn unit_checks(precision: Precision, fd: FdSettings, single: Round<'_>, double: Round<'_>) -> Result<Vec<Check>> {
    let is_single = precision == Precision::Default;
    let mut merged: Vec<Check> = Vec::new();
    for seed in 0..SEEDS {
        let analytic = if is_single {
            single(seed, Route::Analytic, true)?
        } else {
            double(seed, Route::Analytic, false)?
        };
        let numeric = double(seed, Route::Numeric(fd), is_single)?;
        for (i, (a, n)) in analytic.into_iter().zip(numeric).enumerate() {
            let report = compare(&a.labels, &a.values, &n.values, fd.floor);
            match merged.get_mut(i) {
                Some(m) => m.report.merge(report),
                None => merged.push(Check {
                    name: format!("{}/{}", precision.label(), a.name),
                    report,
                    tolerance: precision.tolerance(),
                }),
            }
        }
    }
    Ok(merged)
}

struct OpRound {
    seed: u64,
    route: Route,
    single: bool,
    out: Vec<Grads>,
}

impl OpRound {
    fn op<T: Scalar>(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: OpFn<T>) -> Result<()> {
        let proj = self.seed * 1000 + self.out.len() as u64;
        let inputs: Vec<Tensor<T>> = inputs.iter().map(|t| at_point(t, self.single).cast()).collect();
        let g = |t: &mut Tape<T>, ids: &[NodeId]| {
            let y = f(t, ids)?;
            random_projection(t, y, proj)
        };
        let values = match self.route {
            Route::Analytic => op_analytic(&inputs, g)?,
            Route::Numeric(fd) => op_numeric(&inputs, g, fd)?,
        };
        self.out.push(Grads {
            name: name.to_string(),
            labels: op_labels(&inputs),
            values,
        });
        Ok(())
    }
}

/// Every primitive tape operation.
pub fn primitive_checks(precision: Precision) -> Result<Vec<Check>> {
    unit_checks(
        precision,
        precision.fd(),
        &primitive_round::<f32>,
        &primitive_round::<f64>,
    )
}

fn primitive_round<T: Scalar>(seed: u64, route: Route, single: bool) -> Result<Vec<Grads>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024 + seed);
    let r = &mut rng;
    let mut round = OpRound {
        seed,
        route,
        single,
        out: Vec::new(),
    };
    let out = &mut round;
    out.op::<T>(
        "add_broadcast",
        vec![uniform(r, &[2, 3, 4]), uniform(r, &[3, 1])],
        Box::new(|t, x| t.add(x[0], x[1])),
    )?;
    out.op::<T>(
        "sub_broadcast",
        vec![uniform(r, &[2, 3]), uniform(r, &[1, 3])],
        Box::new(|t, x| t.sub(x[0], x[1])),
    )?;
    out.op::<T>(
        "mul_broadcast",
        vec![uniform(r, &[2, 3, 4]), uniform(r, &[2, 1, 4])],
        Box::new(|t, x| t.mul(x[0], x[1])),
    )?;
    out.op::<T>(
        "scale",
        vec![uniform(r, &[5])],
        Box::new(|t, x| Ok(t.scale(x[0], T::of(0.75)))),
    )?;
    out.op::<T>("relu", vec![off_zero(r, &[3, 5])], Box::new(|t, x| Ok(t.relu(x[0]))))?;
    out.op::<T>("gelu", vec![uniform(r, &[3, 5])], Box::new(|t, x| Ok(t.gelu(x[0]))))?;
    out.op::<T>(
        "sigmoid",
        vec![uniform(r, &[3, 5])],
        Box::new(|t, x| Ok(t.sigmoid(x[0]))),
    )?;
    out.op::<T>(
        "softmax",
        vec![uniform(r, &[2, 3, 6])],
        Box::new(|t, x| t.softmax(x[0])),
    )?;
    out.op::<T>("sum", vec![uniform(r, &[2, 4])], Box::new(|t, x| Ok(t.sum(x[0]))))?;
    out.op::<T>("mean", vec![uniform(r, &[2, 4])], Box::new(|t, x| Ok(t.mean(x[0]))))?;
    out.op::<T>(
        "reshape",
        vec![uniform(r, &[2, 6])],
        Box::new(|t, x| t.reshape(x[0], &[3, 4])),
    )?;
    out.op::<T>(
        "permute",
        vec![uniform(r, &[2, 3, 4])],
        Box::new(|t, x| t.permute(x[0], &[2, 0, 1])),
    )?;
    out.op::<T>(
        "expand",
        vec![uniform(r, &[2, 1, 3])],
        Box::new(|t, x| t.expand(x[0], &[2, 4, 3])),
    )?;
    out.op::<T>(
        "concat",
        vec![uniform(r, &[2, 1, 3]), uniform(r, &[2, 2, 3])],
        Box::new(|t, x| t.concat(&[x[0], x[1]], 1)),
    )?;
    out.op::<T>(
        "gather",
        vec![uniform(r, &[2, 3, 2, 2])],
        Box::new(|t, x| t.gather(x[0], &[2, 0, 1, 1, 0, 2, 1, 2, 0, 0, 2, 2], 2)),
    )?;
    out.op::<T>(
        "matmul_batched",
        vec![uniform(r, &[2, 3, 4]), uniform(r, &[2, 4, 5])],
        Box::new(|t, x| t.matmul(x[0], x[1], false)),
    )?;
    out.op::<T>(
        "matmul_trans_b",
        vec![uniform(r, &[2, 3, 4]), uniform(r, &[2, 5, 4])],
        Box::new(|t, x| t.matmul(x[0], x[1], true)),
    )?;
    out.op::<T>(
        "matmul_shared_b",
        vec![uniform(r, &[2, 3, 4]), uniform(r, &[4, 5])],
        Box::new(|t, x| t.matmul(x[0], x[1], false)),
    )?;
    out.op::<T>(
        "linear",
        vec![uniform(r, &[2, 3, 4]), uniform(r, &[5, 4]), uniform(r, &[5])],
        Box::new(|t, x| t.linear(x[0], x[1], Some(x[2]))),
    )?;
    let convs: [(&str, usize, usize, usize, usize, Conv2dParams); 6] = [
        ("conv_3x3_im2col", 2, 3, 5, 3, Conv2dParams::padded(1)),
        ("conv_3x3_shifted", 8, 3, 5, 3, Conv2dParams::padded(1)),
        ("conv_strided", 2, 3, 6, 3, Conv2dParams::strided(2, 1)),
        ("conv_dilated", 8, 2, 7, 3, Conv2dParams::same(2)),
        ("conv_depthwise", 3, 3, 6, 5, Conv2dParams::depthwise(3, 2)),
        ("conv_pointwise", 3, 4, 4, 1, Conv2dParams::default()),
    ];
    for (name, cin, cout, hw, k, p) in convs {
        let cin_g = cin / p.groups;
        out.op::<T>(
            name,
            vec![
                uniform(r, &[2, cin, hw, hw]),
                uniform(r, &[cout, cin_g, k, k]),
                uniform(r, &[cout]),
            ],
            Box::new(move |t, x| t.conv2d(x[0], x[1], Some(x[2]), p)),
        )?;
    }
    out.op::<T>(
        "conv_transpose",
        vec![uniform(r, &[2, 3, 3, 4]), uniform(r, &[3, 2, 2, 2]), uniform(r, &[2])],
        Box::new(|t, x| t.conv_transpose2d(x[0], x[1], Some(x[2]), 2, 0)),
    )?;
    out.op::<T>(
        "layer_norm",
        vec![uniform(r, &[2, 3, 6]), uniform(r, &[6]), uniform(r, &[6])],
        Box::new(|t, x| t.layer_norm(x[0], x[1], x[2])),
    )?;
    out.op::<T>(
        "batch_norm_train",
        vec![uniform(r, &[3, 2, 3, 3]), uniform(r, &[2]), uniform(r, &[2])],
        Box::new(|t, x| Ok(t.batch_norm(x[0], x[1], x[2], None)?.0)),
    )?;
    out.op::<T>(
        "batch_norm_eval",
        vec![uniform(r, &[2, 2, 3, 3]), uniform(r, &[2]), uniform(r, &[2])],
        Box::new(|t, x| {
            Ok(t.batch_norm(
                x[0],
                x[1],
                x[2],
                Some((&[T::of(0.125), T::of(-0.25)], &[T::of(0.75), T::of(1.5)])),
            )?
            .0)
        }),
    )?;
    for (name, kind) in [
        ("pool_global_avg", PoolKind::GlobalAvg),
        ("pool_global_max", PoolKind::GlobalMax),
        ("pool_channel_avg", PoolKind::ChannelAvg),
        ("pool_channel_max", PoolKind::ChannelMax),
    ] {
        out.op::<T>(
            name,
            vec![separated(r, &[2, 3, 3, 4])],
            Box::new(move |t, x| t.pool(x[0], kind)),
        )?;
    }
    out.op::<T>(
        "resize_up",
        vec![uniform(r, &[1, 2, 3, 4])],
        Box::new(|t, x| t.resize_bilinear(x[0], 7, 9)),
    )?;
    out.op::<T>(
        "resize_down",
        vec![uniform(r, &[1, 2, 8, 6])],
        Box::new(|t, x| t.resize_bilinear(x[0], 3, 4)),
    )?;
    out.op::<T>(
        "combined_loss",
        vec![
            uniform(r, &[1, 2, 3, 3]),
            uniform(r, &[1, 2, 4, 4]),
            uniform(r, &[1, 2, 5, 5]),
        ],
        Box::new(|t, x| {
            let targets = [[1, 2, 3, 3], [1, 2, 4, 4], [1, 2, 5, 5]].map(|s| {
                let n: usize = s.iter().product();
                t.constant(
                    Tensor::new(
                        &s,
                        (0..n).map(|i| T::of((i as f64 * 0.37).sin() as f32 as f64)).collect(),
                    )
                    .expect("shape"),
                )
            });
            Ok(combined_loss(t, [x[0], x[1], x[2]], targets, [1.0, 3.0, 3.0])?.0)
        }),
    )?;
    Ok(round.out)
}

/// A module whose parameters and inputs live in one store, differentiated
/// on every element.
#[allow(clippy::too_many_arguments)]
fn module_check<T: Scalar>(
    name: &str,
    build: impl FnOnce(&mut Init<'_, f64>) -> hyatt_core::Result<Fwd<T>>,
    inputs: Vec<Tensor<f64>>,
    training: bool,
    seed: u64,
    route: Route,
    single: bool,
) -> Result<Grads> {
    let mut store = ParamStore::<f64>::new();
    let fwd = {
        let mut init = Init::new(&mut store, seed);
        build(&mut init)?
    };
    perturb_constants(&mut store, seed);
    let input_ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("input{i}"), t.clone(), true))
        .collect();
    let store: ParamStore<T> = if single {
        store.cast::<f32>().cast()
    } else {
        store.cast()
    };
    let all = all_coords(&store);
    let loss = |ctx: &mut Ctx<'_, T>| {
        let xs: Vec<NodeId> = input_ids.iter().map(|&id| ctx.p(id)).collect();
        let y = fwd(ctx, &xs)?;
        random_projection(&mut ctx.tape, y, seed)
    };
    let values = match route {
        Route::Analytic => param_analytic(&store, training, loss, &all)?,
        Route::Numeric(fd) => param_numeric(&store, training, loss, &all, fd)?,
    };
    Ok(Grads {
        name: name.to_string(),
        labels: param_labels(&store, &all),
        values,
    })
}

/// Norm scales start at exactly 1 and shifts at 0; jitter them so the check
/// does not sit on a special point.
fn perturb_constants<T: Scalar>(store: &mut ParamStore<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.entry(id).trainable {
            continue;
        }
        let name = store.entry(id).name.clone();
        if name.ends_with("gamma") || name.ends_with("beta") {
            for v in store.get_mut(id).data_mut() {
                *v += T::of(rng.gen_range(-0.2..0.2));
            }
        }
    }
}

fn all_coords<T: Scalar>(store: &ParamStore<T>) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .filter(|&id| store.entry(id).trainable)
        .flat_map(|id| (0..store.get(id).len()).map(move |j| (id, j)))
        .collect()
}

type Fwd<T> = Box<dyn Fn(&mut Ctx<'_, T>, &[NodeId]) -> hyatt_core::Result<NodeId>>;

/// Attention, CBAM, ARM, downsampling and fusion blocks.
///
/// Blocks contain ReLUs and max pools whose switching points lie within a
/// 1e-3 step of the sampled point, so the 64-bit reference uses the extended
/// step in both precisions; the floor and tolerance follow `precision`.
pub fn module_checks(precision: Precision) -> Result<Vec<Check>> {
    let fd = FdSettings {
        step: FdSettings::extended().step,
        ..precision.fd()
    };
    unit_checks(precision, fd, &module_round::<f32>, &module_round::<f64>)
}

fn module_round<T: Scalar>(seed: u64, route: Route, single: bool) -> Result<Vec<Grads>> {
    let mut rng = ChaCha8Rng::seed_from_u64(77 + seed);
    let r = &mut rng;
    let mut out = Vec::new();
    for (name, s, k, mode) in [
        ("bra_routed", 2, 2, AttentionMode::Routed),
        ("bra_routed_all_regions", 2, 4, AttentionMode::Routed),
        ("bra_dense", 2, 2, AttentionMode::Dense),
    ] {
        let cfg = BraConfig::new(s, k, 2, 8)?;
        out.push(module_check(
            name,
            move |i| {
                let p = BraParams::new(i, "bra", cfg);
                Ok(Box::new(move |ctx: &mut Ctx<'_, T>, x: &[NodeId]| p.forward(ctx, x[0], mode)) as Fwd<T>)
            },
            vec![uniform(r, &[2, 8, 4, 4])],
            true,
            11 + 100 * seed,
            route,
            single,
        )?);
    }
    let cfg = BraConfig::new(2, 2, 2, 8)?;
    out.push(module_check(
        "biformer_block",
        move |i| {
            let p = BiFormerBlock::new(i, "block", cfg, 3);
            Ok(
                Box::new(move |ctx: &mut Ctx<'_, T>, x: &[NodeId]| p.forward(ctx, x[0], AttentionMode::Routed, "check"))
                    as Fwd<T>,
            )
        },
        vec![uniform(r, &[1, 8, 4, 4])],
        true,
        12 + 100 * seed,
        route,
        single,
    )?);
    out.push(module_check(
        "cbam",
        |i| {
            let p = CbamParams::new(i, "cbam", 8, 4)?;
            Ok(Box::new(move |ctx: &mut Ctx<'_, T>, x: &[NodeId]| p.forward(ctx, x[0])) as Fwd<T>)
        },
        vec![separated(r, &[2, 8, 4, 4])],
        true,
        13 + 100 * seed,
        route,
        single,
    )?);
    out.push(module_check(
        "arm_train",
        |i| {
            let p = ArmParams::new(i, "arm", 8, 8, 4)?;
            Ok(Box::new(move |ctx: &mut Ctx<'_, T>, x: &[NodeId]| p.forward(ctx, x[0])) as Fwd<T>)
        },
        vec![uniform(r, &[2, 8, 6, 6])],
        true,
        14 + 100 * seed,
        route,
        single,
    )?);
    out.push(module_check(
        "arm_eval",
        |i| {
            let p = ArmParams::new(i, "arm", 8, 8, 4)?;
            Ok(Box::new(move |ctx: &mut Ctx<'_, T>, x: &[NodeId]| p.forward(ctx, x[0])) as Fwd<T>)
        },
        vec![uniform(r, &[2, 8, 6, 6])],
        false,
        15 + 100 * seed,
        route,
        single,
    )?);
    out.push(module_check(
        "patch_embed",
        |i| {
            let p = Downsample::patch_embed(i, "embed", 1, 6);
            Ok(Box::new(move |ctx: &mut Ctx<'_, T>, x: &[NodeId]| p.forward(ctx, x[0])) as Fwd<T>)
        },
        vec![uniform(r, &[2, 1, 8, 8])],
        true,
        16 + 100 * seed,
        route,
        single,
    )?);
    out.push(module_check(
        "downsample_stride2",
        |i| {
            let p = Downsample::stride2(i, "down", 4, 6);
            Ok(Box::new(move |ctx: &mut Ctx<'_, T>, x: &[NodeId]| p.forward(ctx, x[0])) as Fwd<T>)
        },
        vec![uniform(r, &[2, 4, 6, 6])],
        true,
        17 + 100 * seed,
        route,
        single,
    )?);
    out.push(module_check(
        "ffcm",
        |i| {
            let p = FfcmParams::new(i, "ffcm", 1, 4, 2, 3, 4, 5);
            Ok(Box::new(move |ctx: &mut Ctx<'_, T>, x: &[NodeId]| p.forward(ctx, x[0], x[1], x[2])) as Fwd<T>)
        },
        vec![
            uniform(r, &[1, 4, 2, 2]),
            uniform(r, &[1, 2, 2, 2]),
            positive(r, &[1, 1, 8, 8]),
        ],
        true,
        18 + 100 * seed,
        route,
        single,
    )?);
    Ok(out)
}

/// Strictly positive values (an image feeding a ReLU stem).
fn positive(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(0.1..1.0)).collect()).expect("shape")
}

fn end_to_end_batch(cfg: &HyattConfig, seed: u64) -> Result<(Tensor<f64>, Vec<LandmarkSet>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w] = cfg.input_size;
    let img = Tensor::new(&[2, 1, h, w], (0..2 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let lms = (0..2)
        .map(|_| {
            let pts = (0..cfg.num_landmarks)
                .map(|_| [rng.gen_range(8..w - 8) as f64, rng.gen_range(8..h - 8) as f64])
                .collect();
            LandmarkSet::pixels(pts)
        })
        .collect::<hyatt_core::Result<Vec<_>>>()?;
    Ok((img, lms))
}

/// Toy network at 64×64: deep-supervision loss against sampled parameters.
pub fn end_to_end_config() -> HyattConfig {
    HyattConfig {
        input_size: [64, 64],
        ..HyattConfig::toy()
    }
}

pub fn end_to_end<T: Scalar>(fd: FdSettings, tolerance: f64, samples: usize) -> Result<Check> {
    let cfg = end_to_end_config();
    let (net, store64) = HyattNet::new::<f64>(&cfg)?;
    let mut store64 = store64;
    perturb_constants(&mut store64, 5);
    let store: ParamStore<T> = store64.cast();
    let (img, lms) = end_to_end_batch(&cfg, 9)?;
    let img: Tensor<T> = img.cast();
    let coords = sample_coords(&store, samples, 31);
    let report = check_params(&store, true, |ctx| net.loss(ctx, &img, &lms), &coords, fd)?;
    Ok(Check {
        name: format!("{}/network_64x64", std::any::type_name::<T>()),
        report,
        tolerance,
    })
}

/// Unit and block checks at the given precision, then the network in
/// 32-bit (and again in 64-bit when extended).
pub fn run_all(precision: Precision) -> Result<Vec<Check>> {
    let mut out = primitive_checks(precision)?;
    out.extend(module_checks(precision)?);
    out.push(end_to_end::<f32>(
        FdSettings::single(),
        END_TO_END_TOLERANCE,
        END_TO_END_SAMPLES,
    )?);
    if precision == Precision::Extended {
        out.push(end_to_end::<f64>(
            FdSettings::extended(),
            END_TO_END_TOLERANCE,
            END_TO_END_SAMPLES,
        )?);
    }
    Ok(out)
}
