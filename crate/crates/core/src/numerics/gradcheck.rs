//! Central finite-difference checks of tape gradients.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Result, VsdError};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate (or direction) index that produced `max_rel_error`.
    pub worst_index: usize,
    pub checked: usize,
}

/// Denominator floor of [`relative_error`]. Gradients that are exactly zero
/// analytically come back from central differences as round-off of order
/// 1e-11, which would otherwise count as 100% error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a| + |n|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst_index: 0,
            checked: 0,
        }
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        if self.checked == 0 || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst_index = index;
        }
        self.checked += 1;
    }
}

fn eval_at<F>(f: &F, point: &Tensor, index: usize) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), false);
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if !v.is_scalar() {
        return Err(VsdError::Autodiff(format!(
            "finite_difference_check: function returned shape {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(VsdError::NonFinite {
            index,
            context: "function value at perturbed point".into(),
        });
    }
    Ok(v)
}

/// Compares the tape gradient of scalar `f` at `point` with central
/// differences of width `step` on every coordinate.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(VsdError::InvalidInput(format!("step must be positive, got {step}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.leaf(point.clone(), true);
        let y = f(&mut tape, x)?;
        if tape.requires_grad(y) {
            let grads = tape.backward(y)?;
            grads
                .wrt(x)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(point.shape()))
        } else {
            Tensor::zeros(point.shape())
        }
    };
    if let Some(i) = analytic.first_non_finite() {
        return Err(VsdError::NonFinite {
            index: i,
            context: "analytic gradient".into(),
        });
    }
    let mut report = GradCheckReport::empty();
    let mut p = point.clone();
    for i in 0..point.len() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + step;
        let up = eval_at(&f, &p, i)?;
        p.data_mut()[i] = orig - step;
        let down = eval_at(&f, &p, i)?;
        p.data_mut()[i] = orig;
        report.record(i, analytic.data()[i], (up - down) / (2.0 * step));
    }
    Ok(report)
}

fn eval_params<F>(store: &ParamStore, f: &F, index: usize) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::inference(store);
    let y = f(&mut tape)?;
    let v = tape.scalar(y);
    if !v.is_finite() {
        return Err(VsdError::NonFinite {
            index,
            context: "loss at perturbed parameters".into(),
        });
    }
    Ok(v)
}

fn analytic_param_grads<F>(store: &ParamStore, f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let y = f(&mut tape)?;
    let grads = tape.backward(y)?;
    let mut out: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
    for (id, g) in grads.params() {
        out[id.index()].copy_from_slice(g);
    }
    Ok(out)
}

/// Coordinate-wise check over every value of every parameter in `store`.
/// The report index is the flat position in store iteration order.
pub fn check_all_parameters<F>(store: &mut ParamStore, f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let coords = store.iter().map(|(_, p)| (0..p.value.len()).collect()).collect();
    check_coordinates(store, &f, step, coords)
}

/// Coordinate-wise check on `per_tensor` distinct random values of every
/// parameter tensor (all of them for smaller tensors).
pub fn check_sampled_coordinates<F, R>(
    store: &mut ParamStore,
    f: F,
    step: f64,
    per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let coords = store
        .iter()
        .map(|(_, p)| {
            let n = p.value.len();
            let mut picked = rand::seq::index::sample(rng, n, per_tensor.min(n)).into_vec();
            picked.sort_unstable();
            picked
        })
        .collect();
    check_coordinates(store, &f, step, coords)
}

fn check_coordinates<F>(store: &mut ParamStore, f: &F, step: f64, coords: Vec<Vec<usize>>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = analytic_param_grads(store, f)?;
    let ids: Vec<ParamId> = store.ids().collect();
    let mut report = GradCheckReport::empty();
    let mut offset = 0;
    for (id, picked) in ids.into_iter().zip(coords) {
        for i in picked {
            let flat = offset + i;
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + step;
            let up = eval_params(store, f, flat);
            store.get_mut(id).value.data_mut()[i] = orig - step;
            let down = eval_params(store, f, flat);
            store.get_mut(id).value.data_mut()[i] = orig;
            report.record(flat, analytic[id.index()][i], (up? - down?) / (2.0 * step));
        }
        offset += store.value(id).len();
    }
    Ok(report)
}

/// Directional-derivative check: for each parameter tensor a random unit
/// direction confined to that tensor, plus `global_directions` random
/// directions over all parameters jointly. Two loss evaluations per
/// direction, so it scales to models where coordinate checks are too slow.
/// Report indices below `store.len()` name the parameter tensor.
pub fn check_directional<F, R>(
    store: &mut ParamStore,
    f: F,
    step: f64,
    global_directions: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let analytic = analytic_param_grads(store, &f)?;
    let n_params = store.len();
    let mut report = GradCheckReport::empty();
    let shapes: Vec<usize> = store.iter().map(|(_, p)| p.value.len()).collect();

    let mut run = |store: &mut ParamStore, index: usize, dir: &[Vec<f64>]| -> Result<()> {
        let norm = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(());
        }
        let ad: f64 = dir
            .iter()
            .zip(&analytic)
            .map(|(d, g)| d.iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            / norm;
        let shift = |store: &mut ParamStore, s: f64| {
            for (k, d) in dir.iter().enumerate() {
                if d.is_empty() {
                    continue;
                }
                let v = store.get_mut(ParamId(k)).value.data_mut();
                for (x, dv) in v.iter_mut().zip(d) {
                    *x += s * dv / norm;
                }
            }
        };
        let saved: Vec<Tensor> = dir
            .iter()
            .enumerate()
            .filter(|(_, d)| !d.is_empty())
            .map(|(k, _)| store.value(ParamId(k)).clone())
            .collect();
        let restore = |store: &mut ParamStore| {
            let mut it = saved.iter();
            for (k, d) in dir.iter().enumerate() {
                if !d.is_empty() {
                    store.get_mut(ParamId(k)).value = it.next().expect("saved value").clone();
                }
            }
        };
        shift(store, step);
        let up = eval_params(store, &f, index);
        restore(store);
        shift(store, -step);
        let down = eval_params(store, &f, index);
        restore(store);
        report.record(index, ad, (up? - down?) / (2.0 * step));
        Ok(())
    };

    for k in 0..n_params {
        let dir: Vec<Vec<f64>> = (0..n_params)
            .map(|j| {
                if j == k {
                    (0..shapes[j]).map(|_| StandardNormal.sample(rng)).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        run(store, k, &dir)?;
    }
    for g in 0..global_directions {
        let dir: Vec<Vec<f64>> = shapes
            .iter()
            .map(|&n| (0..n).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        run(store, n_params + g, &dir)?;
    }
    Ok(report)
}
