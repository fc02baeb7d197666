use rand::seq::index::sample;

use super::{Graph, ParamStore, TensorError, Var};
use crate::rng::substream;

/// Below this magnitude on both sides a coordinate counts as exact.
const ZERO_FLOOR: f64 = 1e-12;
/// Multiple of `eps * |f| / h`, the rounding error of the difference
/// quotient, below which derivatives are compared in absolute terms.
const NOISE_FACTOR: f64 = 1e5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub per_param: Vec<(String, f64)>,
    pub coords_checked: usize,
    pub loss: f64,
    /// Derivatives smaller than this were compared against it instead of
    /// their own magnitude.
    pub noise_floor: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    pub tol: f64,
    /// Checks a seeded random subset of at most this many coordinates per
    /// parameter; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn exhaustive(h: f64, tol: f64) -> Self {
        GradCheckOptions {
            h,
            tol,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ZERO_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale.max(floor)
    }
}

fn eval<F, E>(store: &ParamStore, f: &F) -> Result<f64, E>
where
    F: Fn(&mut Graph) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::with_params(store);
    let loss = f(&mut g)?;
    Ok(g.value(loss).item())
}

/// Compares autodiff gradients of the scalar built by `f` against central
/// finite differences `(f(θ+h) - f(θ-h)) / 2h` for every coordinate of
/// every trainable parameter. Parameter values are restored afterwards.
pub fn grad_check<F, E>(
    store: &mut ParamStore,
    f: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph) -> Result<Var, E>,
    E: From<TensorError>,
{
    grad_check_with(store, f, &GradCheckOptions::exhaustive(h, tol))
}

pub fn grad_check_with<F, E>(
    store: &mut ParamStore,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph) -> Result<Var, E>,
    E: From<TensorError>,
{
    let h = opts.h;
    store.zero_grad();
    let (loss, grads) = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        (g.value(loss).item(), g.backward(loss)?)
    };
    grads.accumulate_into(store);

    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        per_param: Vec::new(),
        coords_checked: 0,
        loss,
        noise_floor: (NOISE_FACTOR * f64::EPSILON * loss.abs().max(1.0) / h).max(ZERO_FLOOR),
        tol: opts.tol,
    };
    let mut rng = substream(opts.seed, "grad-check-coords");
    for id in ids {
        let n = store.get(id).value.numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if cap < n => {
                let mut c = sample(&mut rng, n, cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut param_max = 0.0f64;
        for i in coords {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store, &f)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store, &f)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = store.get(id).grad.data()[i];
            let err = rel_error(analytic, numeric, report.noise_floor);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
                report.worst_values = Some((analytic, numeric));
            }
            param_max = param_max.max(err);
            report.coords_checked += 1;
        }
        report
            .per_param
            .push((store.get(id).name.clone(), param_max));
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn constant_function_reports_zero() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[3], 0.7)).unwrap();
        let report = grad_check::<_, TensorError>(
            &mut store,
            |g| {
                let w = g.param(id)?;
                let z = g.mul_scalar(w, 0.0);
                let s = g.sum(z, None)?;
                Ok(g.add_scalar(s, 4.0))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn quadratic_form() {
        // f(x) = x^T A x with a fixed non-symmetric A.
        let mut store = ParamStore::new();
        let x = store
            .add("x", Tensor::new(vec![1, 3], vec![0.3, -1.2, 0.8]).unwrap())
            .unwrap();
        let a = Tensor::new(
            vec![3, 3],
            vec![2.0, 0.5, -1.0, 0.1, 3.0, 0.2, -0.4, 0.7, 1.5],
        )
        .unwrap();
        let report = grad_check::<_, TensorError>(
            &mut store,
            |g| {
                let xv = g.param(x)?;
                let av = g.constant(a.clone());
                let ax = g.matmul(xv, av)?;
                let p = g.mul(ax, xv)?;
                g.sum(p, None)
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.coords_checked, 3);
    }
}
