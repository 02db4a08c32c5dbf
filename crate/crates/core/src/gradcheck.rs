//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel: f64,
    /// Description, analytic and numeric value of the worst coordinate.
    pub worst: Option<(String, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let e = rel_error(analytic, numeric, floor);
        self.checked += 1;
        if e > self.max_rel || self.worst.is_none() {
            self.max_rel = e.max(self.max_rel);
            self.worst = Some((what(), analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel >= self.max_rel && other.worst.is_some() {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FdSettings {
    pub step: f64,
    pub floor: f64,
}

impl FdSettings {
    /// Central difference of `f` around offset zero.
    pub fn derivative(&self, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        Ok((f(self.step)? - f(-self.step)?) / (2.0 * self.step))
    }

    pub fn extended() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
        }
    }

    pub fn single() -> Self {
        Self {
            step: 1e-3,
            floor: 1e-2,
        }
    }
}

/// `sum(y ⊙ w)` for a fixed pseudo-random `w`, so every output element
/// contributes to the checked gradient with O(1) weight. The weights are
/// exactly representable in 32-bit, so both precisions project identically.
pub fn random_projection<T: Scalar>(tape: &mut Tape<T>, y: NodeId, seed: u64) -> Result<NodeId> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<T> = (0..shape.iter().product::<usize>())
        .map(|_| T::of(rng.gen_range(-1.0f32..1.0) as f64))
        .collect();
    let w = tape.constant(Tensor::new(&shape, w)?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Reverse-mode gradient of the scalar `f(inputs)`, flattened over all inputs.
pub fn op_analytic<T: Scalar>(
    inputs: &[Tensor<T>],
    f: impl Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let mut out = Vec::new();
    for (x, &id) in inputs.iter().zip(&ids) {
        match tape.grad(id) {
            Some(g) => out.extend(g.data().iter().map(|v| v.f64())),
            None => out.extend(std::iter::repeat(0.0).take(x.len())),
        }
    }
    Ok(out)
}

/// Finite-difference gradient of the scalar `f(inputs)`, in the same layout as [`op_analytic`].
pub fn op_numeric<T: Scalar>(
    inputs: &[Tensor<T>],
    f: impl Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
    fd: FdSettings,
) -> Result<Vec<f64>> {
    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<_> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &ids)?;
        Ok(t.value(l).item().f64())
    };
    let mut xs = inputs.to_vec();
    let mut out = Vec::new();
    for k in 0..xs.len() {
        for j in 0..xs[k].len() {
            let orig = xs[k].data()[j];
            let numeric = fd.derivative(|d| {
                xs[k].data_mut()[j] = orig + T::of(d);
                eval(&xs)
            })?;
            xs[k].data_mut()[j] = orig;
            out.push(numeric);
        }
    }
    Ok(out)
}

/// `"input k[j]"` labels in the layout of [`op_analytic`].
pub fn op_labels<T: Scalar>(inputs: &[Tensor<T>]) -> Vec<String> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(k, x)| (0..x.len()).map(move |j| format!("input {k}[{j}]")))
        .collect()
}

/// Compare two gradient routes coordinate by coordinate.
pub fn compare(labels: &[String], analytic: &[f64], numeric: &[f64], floor: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient routes differ in length");
    let mut report = GradCheckReport::default();
    for ((l, &a), &n) in labels.iter().zip(analytic).zip(numeric) {
        report.record(|| l.clone(), a, n, floor);
    }
    report
}

/// Check the gradient of `f(inputs)` (a scalar) with respect to every input element.
pub fn check_op<T: Scalar>(
    inputs: &[Tensor<T>],
    f: impl Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
    fd: FdSettings,
) -> Result<GradCheckReport> {
    let analytic = op_analytic(inputs, &f)?;
    let numeric = op_numeric(inputs, &f, fd)?;
    Ok(compare(&op_labels(inputs), &analytic, &numeric, fd.floor))
}

/// Reverse-mode gradient of a model loss at `(param, element)` coordinates.
pub fn param_analytic<T: Scalar>(
    store: &ParamStore<T>,
    training: bool,
    loss_fn: impl Fn(&mut Ctx<'_, T>) -> Result<NodeId>,
    coords: &[(ParamId, usize)],
) -> Result<Vec<f64>> {
    let mut ctx = Ctx::build(store, training, true);
    let loss = loss_fn(&mut ctx)?;
    ctx.tape.backward(loss)?;
    let grads = ctx.param_grads();
    Ok(coords
        .iter()
        .map(|&(id, j)| grads[id.index()].as_ref().map_or(0.0, |g| g.data()[j].f64()))
        .collect())
}

/// Finite-difference gradient of a model loss at `(param, element)` coordinates.
pub fn param_numeric<T: Scalar>(
    store: &ParamStore<T>,
    training: bool,
    loss_fn: impl Fn(&mut Ctx<'_, T>) -> Result<NodeId>,
    coords: &[(ParamId, usize)],
    fd: FdSettings,
) -> Result<Vec<f64>> {
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut c = Ctx::build(s, training, false);
        let l = loss_fn(&mut c)?;
        Ok(c.tape.value(l).item().f64())
    };
    let mut work = store.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &(id, j) in coords {
        let orig = work.get(id).data()[j];
        let numeric = fd.derivative(|d| {
            work.get_mut(id).data_mut()[j] = orig + T::of(d);
            eval(&work)
        })?;
        work.get_mut(id).data_mut()[j] = orig;
        out.push(numeric);
    }
    Ok(out)
}

/// `"name[j]"` labels for parameter coordinates.
pub fn param_labels<T: Scalar>(store: &ParamStore<T>, coords: &[(ParamId, usize)]) -> Vec<String> {
    coords
        .iter()
        .map(|&(id, j)| format!("{}[{j}]", store.entry(id).name))
        .collect()
}

/// Check parameter gradients of a model loss at the given `(param, element)` coordinates.
pub fn check_params<T: Scalar>(
    store: &ParamStore<T>,
    training: bool,
    loss_fn: impl Fn(&mut Ctx<'_, T>) -> Result<NodeId>,
    coords: &[(ParamId, usize)],
    fd: FdSettings,
) -> Result<GradCheckReport> {
    let analytic = param_analytic(store, training, &loss_fn, coords)?;
    let numeric = param_numeric(store, training, &loss_fn, coords, fd)?;
    Ok(compare(&param_labels(store, coords), &analytic, &numeric, fd.floor))
}

/// `count` distinct trainable coordinates drawn uniformly by parameter tensor, then element.
pub fn sample_coords<T: Scalar>(store: &ParamStore<T>, count: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let trainable: Vec<ParamId> = store.ids().filter(|&id| store.entry(id).trainable).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let total: usize = trainable.iter().map(|&id| store.get(id).len()).sum();
    let limit = count.min(total);
    while out.len() < limit {
        let id = trainable[rng.gen_range(0..trainable.len())];
        let j = rng.gen_range(0..store.get(id).len());
        if !out.contains(&(id, j)) {
            out.push((id, j));
        }
    }
    out
}
