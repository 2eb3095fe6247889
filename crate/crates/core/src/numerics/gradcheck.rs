use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::ParamStore;

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Absolute floor in the relative-error denominator.
    pub floor: f64,
    /// Coordinates sampled per parameter; `None` checks all of them.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-6,
            tol: 1e-4,
            floor: 1e-3,
            max_per_param: None,
            seed: 0,
        }
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval<F>(store: &ParamStore<f64>, f: &F, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store, true, seed);
    let out = f(&mut g)?;
    let v = g.value(out).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares analytic parameter gradients of the scalar built by `f` against
/// central differences `(f(θ+h) − f(θ−h)) / 2h`. The graph RNG is reseeded for
/// every evaluation so stochastic layers see identical masks.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    if opts.h <= 0.0 {
        return Err(Error::Config("grad_check step must be positive".into()));
    }
    let analytic: Vec<(crate::numerics::params::ParamId, Vec<f64>)> = {
        let mut g = Graph::new(store, true, opts.seed);
        let out = f(&mut g)?;
        if !g.value(out).item().is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        let grads = g.backward(out)?;
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let gv = grads.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; p.value.numel()]);
                (id, gv)
            })
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        tol: opts.tol,
        passed: true,
    };
    for (id, ga) in analytic {
        let n = ga.len();
        let coords: Vec<usize> = match opts.max_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.h;
            let fp = eval(store, &f, opts.seed);
            store.get_mut(id).value.data_mut()[i] = orig - opts.h;
            let fm = eval(store, &f, opts.seed);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp? - fm?) / (2.0 * opts.h);
            let e = rel_err(ga[i], numeric, opts.floor);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{}[{i}]: analytic {:.6e} numeric {:.6e}", store.get(id).name, ga[i], numeric);
            }
        }
    }
    report.passed = report.max_rel_err <= opts.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64(&[1], &[3.0]).unwrap()).unwrap();
        let r = grad_check(
            &mut store,
            |g| {
                let v = g.param(w);
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            GradCheckOptions {
                h: 1e-4,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.passed);
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64(&[1], &[0.0]).unwrap()).unwrap();
        let r = grad_check(
            &mut store,
            |g| {
                let v = g.param(w);
                let m = g.mask_fill(v, vec![false])?;
                Ok(g.sum(m))
            },
            GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
