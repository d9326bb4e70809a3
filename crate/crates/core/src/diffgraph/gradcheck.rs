//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::ParameterStore;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Number of parameter coordinates to probe (capped at the total count).
    pub coords: usize,
    /// Finite-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged by absolute error instead.
    pub floor: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            coords: 100,
            step: 1e-5,
            floor: 1e-8,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checked.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compares analytic parameter gradients of the scalar produced by `loss`
/// against central differences on a random subset of coordinates.
///
/// Failures are reported, never raised; only errors from `loss` itself
/// propagate.
pub fn grad_check<F>(store: &ParameterStore, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    g.backward(l)?;
    let grads = g.param_grads(store)?;

    let flat: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picks = index::sample(&mut rng, flat.len(), opts.coords.min(flat.len()));

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut work = store.clone();
    let mut checked = Vec::with_capacity(picks.len());
    for k in picks.into_iter() {
        let (name, i) = &flat[k];
        let orig = work.get(name)?.data()[*i];
        work.get_mut(name)?.data_mut()[*i] = orig + opts.step;
        let up = eval(&work)?;
        work.get_mut(name)?.data_mut()[*i] = orig - opts.step;
        let down = eval(&work)?;
        work.get_mut(name)?.data_mut()[*i] = orig;

        let numeric = (up - down) / (2.0 * opts.step);
        let analytic = grads[name][*i];
        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        checked.push(CoordCheck {
            param: name.clone(),
            index: *i,
            analytic,
            numeric,
            rel_err: (analytic - numeric).abs() / denom,
        });
    }
    let max_rel_err = checked.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        checked,
        max_rel_err,
        tolerance: opts.tolerance,
    })
}
