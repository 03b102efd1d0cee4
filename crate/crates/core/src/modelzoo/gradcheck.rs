//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use viewlab_autodiff::{Tape, Tensor, Var};

use super::network::DifferentiableMap;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check a random subset of this many coordinates instead of all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Also check parameter gradients when checking a map.
    pub include_params: bool,
    /// Additive floor in the relative-error denominator.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            include_params: true,
            denom_floor: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coordinate {
    /// Flat index into leaf `leaf`; leaf 0 is the map input, the rest are parameter blocks.
    Leaf { leaf: usize, index: usize },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Checks `objective` with respect to every leaf tensor.
///
/// The error at each coordinate is `|analytic - numeric| / (|numeric| + floor)`
/// with `numeric` from a central difference.
pub fn grad_check_leaves(
    leaves: &[Tensor],
    objective: impl for<'t> Fn(&[Var<'t>]) -> Var<'t>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = leaves.iter().map(|t| tape.var(t.clone())).collect();
    let out = objective(&vars);
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let mut flat = 0;
    for a in &analytic {
        if let Some(i) = a.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "analytic gradient".into(),
                index: flat + i,
            });
        }
        flat += a.numel();
    }

    let mut coords: Vec<(usize, usize)> = leaves
        .iter()
        .enumerate()
        .flat_map(|(l, t)| (0..t.numel()).map(move |i| (l, i)))
        .collect();
    if let Some(max) = opts.max_coords {
        if max < coords.len() {
            let mut r = rng::stream(&[opts.seed, 0x6772_6164]);
            let picked = sample(&mut r, coords.len(), max).into_vec();
            coords = picked.into_iter().map(|k| coords[k]).collect();
            coords.sort_unstable();
        }
    }

    let eval = |perturbed: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        objective(&vars).item()
    };

    let mut work = leaves.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: coords.len(),
    };
    for (leaf, index) in coords {
        let orig = work[leaf].data()[index];
        work[leaf].data_mut()[index] = orig + opts.step;
        let up = eval(&work);
        work[leaf].data_mut()[index] = orig - opts.step;
        let down = eval(&work);
        work[leaf].data_mut()[index] = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        if !numeric.is_finite() {
            return Err(Error::NonFinite {
                what: format!("numeric gradient of leaf {leaf}"),
                index,
            });
        }
        let a = analytic[leaf].data()[index];
        let err = (a - numeric).abs() / (numeric.abs() + opts.denom_floor);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(Coordinate::Leaf { leaf, index });
        }
    }
    Ok(report)
}

/// Checks a scalar objective of a single tensor.
pub fn grad_check_fn(
    x: &Tensor,
    objective: impl for<'t> Fn(Var<'t>) -> Var<'t>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    grad_check_leaves(std::slice::from_ref(x), |v| objective(v[0]), opts)
}

/// Checks `probe(map(x))` with respect to the input batch and (optionally) every parameter block.
pub fn grad_check<M: DifferentiableMap + ?Sized>(
    map: &M,
    x: &Tensor,
    probe: impl for<'t> Fn(Var<'t>) -> Var<'t>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    map.check_batch(x)?;
    let mut leaves = vec![x.clone()];
    if opts.include_params {
        leaves.extend(map.params().iter().map(|p| p.tensor.clone()));
        grad_check_leaves(&leaves, |v| probe(map.forward(v[0], &v[1..])), opts)
    } else {
        grad_check_leaves(&leaves, |v| probe(map.apply(v[0])), opts)
    }
}
