//! Derivative-free simplex minimisation.
//!
//! Nelder–Mead with dimension-adaptive coefficients, parameter bounds applied
//! by clamping each trial vertex, and one restart from the best vertex.

use super::{Evaluator, FitProblem, FitResult, MusrError, Objective, ParameterSet};
use crate::backend::Backend;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizerConfig {
    /// Stop when `f_max - f_min <= tol_f * |f_min|` over the simplex.
    pub tol_f: f64,
    /// Absolute floor for the spread test, for objectives whose minimum is 0.
    pub tol_abs: f64,
    pub max_evaluations: usize,
    /// Run a second descent from the best vertex with a fresh simplex.
    pub restart: bool,
}

impl Default for MinimizerConfig {
    fn default() -> Self {
        Self { tol_f: 1e-9, tol_abs: 1e-12, max_evaluations: 20_000, restart: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexOutcome {
    /// Full parameter vector (fixed entries untouched).
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimises `f` over the free entries of `params`.
///
/// `f` receives the full parameter vector. Non-finite values returned by `f`
/// during the search are treated as `+inf`; at the starting point they are an
/// error.
pub fn minimize_fn<F>(mut f: F, params: &ParameterSet, config: &MinimizerConfig) -> Result<SimplexOutcome, MusrError>
where
    F: FnMut(&[f64]) -> Result<f64, MusrError>,
{
    let x0 = params.values();
    let fx0 = f(&x0)?;
    if !fx0.is_finite() {
        return Err(MusrError::NonFiniteInitial { value: fx0 });
    }
    let free = params.free_indices();
    if free.is_empty() {
        return Ok(SimplexOutcome { x: x0, fx: fx0, iterations: 0, evaluations: 1, converged: true });
    }
    let bounds: Vec<(f64, f64)> = free
        .iter()
        .map(|&i| params.get(i).and_then(|p| p.bounds).unwrap_or((f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    let steps: Vec<f64> = free.iter().map(|&i| params.get(i).map_or(1.0, |p| p.step)).collect();

    let mut search = Search {
        full: x0.clone(),
        free: &free,
        bounds: &bounds,
        f: &mut f,
        evaluations: 1,
        max_evaluations: config.max_evaluations,
    };
    let start: Vec<f64> = free.iter().map(|&i| x0[i]).collect();
    let start = search.clamp(start);
    let mut run = search.descend(start, fx0, &steps, config);
    let mut iterations = run.iterations;
    if config.restart && search.evaluations < search.max_evaluations {
        let again = search.descend(run.x.clone(), run.fx, &steps, config);
        iterations += again.iterations;
        if again.fx <= run.fx {
            run = again;
        } else {
            run.converged = again.converged;
        }
    }
    let mut x = x0;
    for (k, &i) in free.iter().enumerate() {
        x[i] = run.x[k];
    }
    Ok(SimplexOutcome { x, fx: run.fx, iterations, evaluations: search.evaluations, converged: run.converged })
}

/// Fits `problem` by minimising the chosen objective from its current
/// parameter values.
pub fn minimize(
    objective: Objective,
    problem: &FitProblem,
    config: &MinimizerConfig,
    backend: &Backend,
) -> Result<FitResult, MusrError> {
    let eval = Evaluator::new(problem, backend)?;
    let out = minimize_fn(|p| eval.evaluate(objective, p), &problem.parameters, config)?;
    Ok(FitResult {
        best_parameters: problem.parameters.with_values(&out.x),
        objective_value: out.fx,
        iterations: out.iterations,
        objective_evaluations: out.evaluations,
        converged: out.converged,
    })
}

struct Run {
    x: Vec<f64>,
    fx: f64,
    iterations: usize,
    converged: bool,
}

struct Search<'a, F> {
    full: Vec<f64>,
    free: &'a [usize],
    bounds: &'a [(f64, f64)],
    f: &'a mut F,
    evaluations: usize,
    max_evaluations: usize,
}

impl<F> Search<'_, F>
where
    F: FnMut(&[f64]) -> Result<f64, MusrError>,
{
    fn clamp(&self, mut x: Vec<f64>) -> Vec<f64> {
        for (v, &(lo, hi)) in x.iter_mut().zip(self.bounds) {
            *v = v.clamp(lo, hi);
        }
        x
    }

    fn eval(&mut self, x: &[f64]) -> f64 {
        for (k, &i) in self.free.iter().enumerate() {
            self.full[i] = x[k];
        }
        self.evaluations += 1;
        match (self.f)(&self.full) {
            Ok(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    }

    fn descend(&mut self, start: Vec<f64>, f_start: f64, steps: &[f64], cfg: &MinimizerConfig) -> Run {
        let n = start.len();
        let nf = n as f64;
        let alpha = 1.0;
        // adaptive coefficients degenerate in one dimension (delta = 0)
        let (beta, gamma, delta) =
            if n >= 2 { (1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf) } else { (2.0, 0.5, 0.5) };

        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        simplex.push((start.clone(), f_start));
        for k in 0..n {
            let mut v = start.clone();
            let (lo, hi) = self.bounds[k];
            // step away from a bound rather than collapsing onto it
            v[k] = if start[k] + steps[k] <= hi { start[k] + steps[k] } else { start[k] - steps[k] };
            v[k] = v[k].clamp(lo, hi);
            let fv = self.eval(&v);
            simplex.push((v, fv));
        }

        let mut iterations = 0;
        let converged = loop {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let best = simplex[0].1;
            let worst = simplex[n].1;
            if worst - best <= (cfg.tol_f * best.abs()).max(cfg.tol_abs) {
                break true;
            }
            if self.evaluations >= self.max_evaluations {
                break false;
            }
            iterations += 1;

            let mut centroid = vec![0.0; n];
            for (v, _) in &simplex[..n] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x;
                }
            }
            for c in &mut centroid {
                *c /= nf;
            }
            let toward = |coef: f64, target: &[f64]| -> Vec<f64> {
                centroid.iter().zip(target).map(|(c, x)| c + coef * (x - c)).collect()
            };

            let xr = self.clamp(toward(-alpha, &simplex[n].0));
            let fr = self.eval(&xr);
            let second_worst = simplex[n - 1].1;
            if fr < best {
                let xe = self.clamp(toward(-alpha * beta, &simplex[n].0));
                let fe = self.eval(&xe);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < second_worst {
                simplex[n] = (xr, fr);
                continue;
            }
            let (xc, fc) = if fr < worst {
                let xc = self.clamp(toward(gamma, &xr));
                let fc = self.eval(&xc);
                (xc, fc)
            } else {
                let xc = self.clamp(toward(gamma, &simplex[n].0));
                let fc = self.eval(&xc);
                (xc, fc)
            };
            if fc < fr.min(worst) {
                simplex[n] = (xc, fc);
                continue;
            }
            // shrink toward the best vertex
            let x0 = simplex[0].0.clone();
            for vertex in simplex.iter_mut().skip(1) {
                let v: Vec<f64> = x0.iter().zip(&vertex.0).map(|(b, x)| b + delta * (x - b)).collect();
                let v = self.clamp(v);
                let fv = self.eval(&v);
                *vertex = (v, fv);
            }
        };
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, fx) = simplex.swap_remove(0);
        Run { x, fx, iterations, converged }
    }
}
