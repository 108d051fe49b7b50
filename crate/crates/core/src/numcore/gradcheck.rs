use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Upper bound on coordinates checked per input; `None` checks all of them.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the largest discrepancy.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a scalar from the graph handles of `inputs` (in order) and must be
/// deterministic. Returns the largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync,
{
    let opts = GradCheckOptions {
        step,
        ..GradCheckOptions::default()
    };
    Ok(check_gradients(f, inputs, &opts)?.max_rel_error)
}

pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync,
{
    if opts.step.is_nan() || opts.step <= 0.0 {
        return Err(Error::Usage(format!("finite-difference step {} must be > 0", opts.step)));
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            graph
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let n = t.numel();
            let picked: Vec<usize> = match opts.max_coords_per_input {
                Some(cap) if cap < n => {
                    let mut v = rand::seq::index::sample(&mut rng, n, cap).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..n).collect(),
            };
            picked.into_iter().map(move |c| (i, c))
        })
        .collect();

    let eval = |input: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut perturbed = inputs.to_vec();
        let slot = &mut perturbed[input].data_mut()[coord];
        *slot += delta;
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.into_iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let errors: Vec<((usize, usize), f64)> = coords
        .par_iter()
        .map(|&(i, c)| {
            let plus = eval(i, c, opts.step)?;
            let minus = eval(i, c, -opts.step)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i][c];
            let denom = 1f64.max(a.abs()).max(numeric.abs());
            Ok(((i, c), (a - numeric).abs() / denom))
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: errors.len(),
    };
    for (at, err) in errors {
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = Some(at);
        }
    }
    Ok(report)
}
