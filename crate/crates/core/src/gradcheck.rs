//! Central finite-difference gradient oracle.
//!
//! Nothing here touches a tape: the oracle only evaluates the function it is
//! given, so it stays independent of the backward rules it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{GradMap, ParamId, ParamStore};
use crate::tensor::{DType, Scalar, Tensor};

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every coordinate `i`.
pub fn finite_diff_grad<S: Scalar>(
    mut f: impl FnMut(&Tensor<S>) -> S,
    x: &Tensor<S>,
    eps: f64,
) -> Tensor<S> {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + S::of(eps);
        let hi = f(&probe).f64();
        probe.data_mut()[i] = orig - S::of(eps);
        let lo = f(&probe).f64();
        probe.data_mut()[i] = orig;
        out.push(S::of((hi - lo) / (2.0 * eps)));
    }
    Tensor::new(x.shape(), out).expect("same shape as input")
}

/// `|a - b| / max(|a|, |b|, floor)`. The floor keeps gradients that are zero
/// up to rounding from reporting huge relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl CheckResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares an analytic gradient against a numeric one elementwise.
pub fn compare(name: &str, analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> CheckResult {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes for {name}");
    let mut res = CheckResult {
        name: name.to_string(),
        checked: analytic.numel(),
        max_rel_err: 0.0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let e = relative_error(a, n, floor);
        if e > res.max_rel_err || e.is_nan() {
            res.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
            res.worst_analytic = a;
            res.worst_numeric = n;
        }
    }
    res
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Precision of the analytic (backward) path. The numeric side always
    /// runs at f64.
    pub dtype: DType,
    pub eps: f64,
    pub floor: f64,
    /// Upper bound on the number of scalar coordinates probed. Every
    /// parameter gets at least one.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            dtype: DType::F64,
            eps: 1e-5,
            floor: 1e-6,
            max_coords: 128,
            seed: 0,
        }
    }
}

/// A scalar objective over a parameter store, evaluable at either precision.
pub trait Objective {
    fn loss<S: Scalar>(&self, store: &ParamStore<S>) -> Result<S>;
    fn loss_and_grads<S: Scalar>(&self, store: &ParamStore<S>) -> Result<(S, GradMap<S>)>;
}

/// Checks the analytic parameter gradients of `obj` against central
/// differences on a sampled subset of coordinates. Returns one result per
/// parameter tensor.
pub fn check_objective<O: Objective>(
    obj: &O,
    store: &ParamStore<f64>,
    opts: CheckOptions,
) -> Result<Vec<CheckResult>> {
    let analytic: GradMap<f64> = match opts.dtype {
        DType::F64 => obj.loss_and_grads(store)?.1,
        DType::F32 => {
            let (_, g) = obj.loss_and_grads(&store.cast::<f32>())?;
            let mut out = GradMap::new();
            for (id, t) in g.iter() {
                out.insert(id, t.cast());
            }
            out
        }
    };

    let coords = sample_coords(store, opts.max_coords, opts.seed);
    let mut probe = store.clone();
    let mut results = Vec::new();
    for (id, idxs) in coords {
        let zero = Tensor::zeros(store.get(id).shape());
        let grad = analytic.get(id).unwrap_or(&zero);
        let mut a = Vec::with_capacity(idxs.len());
        let mut n = Vec::with_capacity(idxs.len());
        for i in idxs {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + opts.eps;
            let hi = obj.loss(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - opts.eps;
            let lo = obj.loss(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            a.push(grad.data()[i]);
            n.push((hi - lo) / (2.0 * opts.eps));
        }
        let len = a.len();
        let at = Tensor::new(&[len], a)?;
        let nt = Tensor::new(&[len], n)?;
        results.push(compare(store.name(id), &at, &nt, opts.floor));
    }
    Ok(results)
}

fn sample_coords(store: &ParamStore<f64>, max_coords: usize, seed: u64) -> Vec<(ParamId, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_param: Vec<(ParamId, Vec<usize>)> = Vec::new();
    let mut flat: Vec<(usize, usize)> = Vec::new();
    for (slot, (id, p)) in store.iter().enumerate() {
        let n = p.value.numel();
        let first = sample(&mut rng, n, 1).index(0);
        per_param.push((id, vec![first]));
        flat.extend((0..n).filter(|&i| i != first).map(|i| (slot, i)));
    }
    let extra = max_coords.saturating_sub(per_param.len()).min(flat.len());
    if extra > 0 {
        for k in sample(&mut rng, flat.len(), extra).iter() {
            let (slot, i) = flat[k];
            per_param[slot].1.push(i);
        }
    }
    for (_, v) in &mut per_param {
        v.sort_unstable();
    }
    per_param
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[0.3, -1.0, 2.0, 4.0, 5.5, -0.1]).unwrap();
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-4);
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_diff_grad(|t| t.item() * t.item(), &x, 1e-4);
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-12);
    }
}
