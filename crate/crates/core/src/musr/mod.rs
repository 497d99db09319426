//! μSR positron-histogram fitting.
//!
//! Each detector histogram is modelled as
//! `N(t) = N0 · exp(-t/τμ) · (1 + A(t)) + Nbkg`, where the asymmetry `A` is
//! a user [`TheoryExpr`]. [`Evaluator`] prepares the datasets once and then
//! evaluates χ² or the Poisson log-likelihood ratio for any parameter vector,
//! dispatching one term per histogram bin through a [`Backend`].
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod minimize;
mod synthetic;

pub use minimize::{minimize, minimize_fn, MinimizerConfig, SimplexOutcome};
pub use synthetic::{
    generate_synthetic, precession_problem, precession_theory, HistogramGeometry, PrecessionTruth, PRECESSION_SLOTS,
};

use thiserror::Error;

use crate::backend::{Backend, BackendError, DeviceBuffer};
use crate::theory::{BoundTheory, EvalError, TheoryBinding, TheoryExpr};

/// Muon lifetime in μs.
pub const MUON_LIFETIME_US: f64 = 2.197019;
/// γμ / 2π in MHz per tesla.
pub const MUON_GYROMAGNETIC_MHZ_PER_T: f64 = 135.538809;

#[derive(Debug, Error)]
pub enum MusrError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("dataset {dataset}: fit range contains no bins")]
    EmptyFitRange { dataset: usize },
    #[error("dataset {dataset}: {msg}")]
    InvalidDataset { dataset: usize, msg: String },
    #[error("dataset {dataset}, bin {bin}: expected count {expected} is not positive")]
    Domain { dataset: usize, bin: usize, expected: f64 },
    #[error("dataset {dataset}, bin {bin}: expected count {expected} is negative")]
    NegativeExpected { dataset: usize, bin: usize, expected: f64 },
    #[error("objective is not finite at the initial parameters ({value})")]
    NonFiniteInitial { value: f64 },
    #[error("parameter set: {0}")]
    Parameters(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsConstants {
    /// Muon lifetime τμ in μs.
    pub tau_mu: f64,
    /// γμ / 2π in MHz/T.
    pub gamma_mu_mhz_per_t: f64,
}

impl Default for PhysicsConstants {
    fn default() -> Self {
        Self { tau_mu: MUON_LIFETIME_US, gamma_mu_mhz_per_t: MUON_GYROMAGNETIC_MHZ_PER_T }
    }
}

impl PhysicsConstants {
    /// γμ in rad·μs⁻¹·T⁻¹.
    pub fn gamma_mu(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.gamma_mu_mhz_per_t
    }
}

/// Inclusive time window in μs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitRange {
    pub start: f64,
    pub end: f64,
}

/// One positron histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct MusrDataset {
    pub detector: usize,
    pub counts: Vec<u64>,
    /// Bin width Δt in μs.
    pub dt: f64,
    /// Bin index of t = 0.
    pub t0_bin: i64,
    pub binding: TheoryBinding,
    pub n0_slot: usize,
    pub nbkg_slot: usize,
    /// `None` means `[0, last bin]`.
    pub range: Option<FitRange>,
}

impl MusrDataset {
    pub fn time(&self, bin: usize) -> f64 {
        (bin as i64 - self.t0_bin) as f64 * self.dt
    }

    /// Squared bin error, `max(1, √d)²`.
    pub fn variance(&self, bin: usize) -> f64 {
        (self.counts[bin] as f64).max(1.0)
    }

    /// Bins whose time lies in the fit window and is not negative.
    pub fn fit_bins(&self) -> std::ops::Range<usize> {
        let n = self.counts.len();
        let (start, end) = match self.range {
            Some(r) => (r.start.max(0.0), r.end),
            None => (0.0, f64::INFINITY),
        };
        let lo = (0..n).find(|&b| self.time(b) >= start).unwrap_or(n);
        let hi = (lo..n).take_while(|&b| self.time(b) <= end).last().map_or(lo, |b| b + 1);
        lo..hi
    }

    fn validate(&self, index: usize) -> Result<(), MusrError> {
        let bad = |msg: &str| MusrError::InvalidDataset { dataset: index, msg: msg.to_owned() };
        if self.counts.is_empty() {
            return Err(bad("histogram has no bins"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(bad("bin width must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: f64,
    pub step: f64,
    pub bounds: Option<(f64, f64)>,
    pub fixed: bool,
}

impl Parameter {
    pub fn free(name: impl Into<String>, value: f64, step: f64) -> Self {
        Self { name: name.into(), value, step, bounds: None, fixed: false }
    }

    pub fn fixed(name: impl Into<String>, value: f64) -> Self {
        Self { name: name.into(), value, step: 0.0, bounds: None, fixed: true }
    }

    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.bounds = Some((lo, hi));
        self
    }
}

/// The global parameter vector P with per-slot metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Parameter>,
}

impl ParameterSet {
    pub fn new(params: Vec<Parameter>) -> Result<Self, MusrError> {
        for p in &params {
            if let Some((lo, hi)) = p.bounds {
                if !(lo <= hi) {
                    return Err(MusrError::Parameters(format!("{}: bounds [{lo}, {hi}] are empty", p.name)));
                }
            }
            if !p.fixed && !(p.step > 0.0) {
                return Err(MusrError::Parameters(format!("{}: free parameter needs a positive step", p.name)));
            }
        }
        Ok(Self { params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Parameter> {
        self.params.get(i)
    }

    pub fn get_mut(&mut self, i: usize) -> Option<&mut Parameter> {
        self.params.get_mut(i)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.value).collect()
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| !self.params[i].fixed).collect()
    }

    /// Copy of `self` with the values replaced.
    pub fn with_values(&self, values: &[f64]) -> Self {
        let mut out = self.clone();
        for (p, &v) in out.params.iter_mut().zip(values) {
            p.value = v;
        }
        out
    }
}

/// Everything needed to evaluate an objective: theory, data and parameters.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub theory: TheoryExpr,
    pub datasets: Vec<MusrDataset>,
    pub parameters: ParameterSet,
    pub constants: PhysicsConstants,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Chi2,
    Mlh,
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chi2" => Ok(Objective::Chi2),
            "mlh" => Ok(Objective::Mlh),
            other => Err(format!("unknown objective `{other}` (expected chi2 or mlh)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub best_parameters: ParameterSet,
    pub objective_value: f64,
    pub iterations: usize,
    pub objective_evaluations: usize,
    pub converged: bool,
}

/// Expected counts of one bin for the parameter vector `p`.
pub fn model_bin(
    dataset: &MusrDataset,
    theory: &TheoryExpr,
    p: &[f64],
    bin: usize,
    constants: &PhysicsConstants,
) -> Result<f64, MusrError> {
    let bound = theory.bind(&dataset.binding, p.len())?;
    check_slot(dataset, p.len())?;
    Ok(expected_counts(&bound, dataset.time(bin), p, dataset.n0_slot, dataset.nbkg_slot, constants.tau_mu))
}

#[inline]
fn expected_counts(theory: &BoundTheory, t: f64, p: &[f64], n0: usize, nbkg: usize, tau: f64) -> f64 {
    let a = theory.eval(t, p);
    p[n0] * (-t / tau).exp() * (1.0 + a) + p[nbkg]
}

fn check_slot(dataset: &MusrDataset, n_params: usize) -> Result<(), MusrError> {
    for (slot, name) in [(dataset.n0_slot, "N0"), (dataset.nbkg_slot, "Nbkg")] {
        if slot >= n_params {
            return Err(MusrError::Parameters(format!(
                "detector {}: {name} slot {slot} outside parameter vector of length {n_params}",
                dataset.detector
            )));
        }
    }
    Ok(())
}

/// Device-side copy of one dataset restricted to its fit window.
struct PreparedDataset {
    theory: BoundTheory,
    first_bin: usize,
    t0_bin: i64,
    dt: f64,
    n0_slot: usize,
    nbkg_slot: usize,
    counts: DeviceBuffer<f64>,
    variance: DeviceBuffer<f64>,
}

impl PreparedDataset {
    #[inline]
    fn time(&self, k: usize) -> f64 {
        ((self.first_bin + k) as i64 - self.t0_bin) as f64 * self.dt
    }
}

/// Objective evaluator with datasets uploaded once.
pub struct Evaluator<'a> {
    backend: &'a Backend,
    datasets: Vec<PreparedDataset>,
    n_params: usize,
    tau: f64,
}

impl<'a> Evaluator<'a> {
    pub fn new(problem: &FitProblem, backend: &'a Backend) -> Result<Self, MusrError> {
        let n_params = problem.parameters.len();
        let mut datasets = Vec::with_capacity(problem.datasets.len());
        for (i, ds) in problem.datasets.iter().enumerate() {
            ds.validate(i)?;
            check_slot(ds, n_params)?;
            let bins = ds.fit_bins();
            if bins.is_empty() {
                return Err(MusrError::EmptyFitRange { dataset: i });
            }
            let counts: Vec<f64> = bins.clone().map(|b| ds.counts[b] as f64).collect();
            let variance: Vec<f64> = bins.clone().map(|b| ds.variance(b)).collect();
            datasets.push(PreparedDataset {
                theory: problem.theory.bind(&ds.binding, n_params)?,
                first_bin: bins.start,
                t0_bin: ds.t0_bin,
                dt: ds.dt,
                n0_slot: ds.n0_slot,
                nbkg_slot: ds.nbkg_slot,
                counts: backend.upload(&counts)?,
                variance: backend.upload(&variance)?,
            });
        }
        Ok(Self { backend, datasets, n_params, tau: problem.constants.tau_mu })
    }

    /// Number of bins entering the objective.
    pub fn bins(&self) -> usize {
        self.datasets.iter().map(|d| d.counts.len()).sum()
    }

    fn check_len(&self, p: &[f64]) -> Result<(), MusrError> {
        if p.len() != self.n_params {
            return Err(MusrError::Parameters(format!("expected {} parameter values, got {}", self.n_params, p.len())));
        }
        Ok(())
    }

    pub fn chi2(&self, p: &[f64]) -> Result<f64, MusrError> {
        self.check_len(p)?;
        let tau = self.tau;
        let mut total = 0.0;
        for ds in &self.datasets {
            let d = ds.counts.as_slice();
            let var = ds.variance.as_slice();
            total += self.backend.map_reduce(d.len(), |k| {
                let n = expected_counts(&ds.theory, ds.time(k), p, ds.n0_slot, ds.nbkg_slot, tau);
                let r = d[k] - n;
                r * r / var[k]
            });
        }
        Ok(total)
    }

    pub fn mlh(&self, p: &[f64]) -> Result<f64, MusrError> {
        self.check_len(p)?;
        let tau = self.tau;
        let mut total = 0.0;
        for (j, ds) in self.datasets.iter().enumerate() {
            let d = ds.counts.as_slice();
            let sum = self.backend.map_reduce(d.len(), |k| {
                let n = expected_counts(&ds.theory, ds.time(k), p, ds.n0_slot, ds.nbkg_slot, tau);
                if !(n > 0.0) {
                    return f64::NAN;
                }
                let dk = d[k];
                let log_term = if dk == 0.0 { 0.0 } else { dk * (dk / n).ln() };
                (n - dk) + log_term
            });
            if sum.is_nan() {
                // locate the offending bin serially for the diagnostic
                for k in 0..d.len() {
                    let n = expected_counts(&ds.theory, ds.time(k), p, ds.n0_slot, ds.nbkg_slot, tau);
                    if !(n > 0.0) {
                        return Err(MusrError::Domain { dataset: j, bin: ds.first_bin + k, expected: n });
                    }
                }
            }
            total += sum;
        }
        Ok(2.0 * total)
    }

    pub fn evaluate(&self, objective: Objective, p: &[f64]) -> Result<f64, MusrError> {
        match objective {
            Objective::Chi2 => self.chi2(p),
            Objective::Mlh => self.mlh(p),
        }
    }
}

pub fn chi2(problem: &FitProblem, p: &[f64], backend: &Backend) -> Result<f64, MusrError> {
    Evaluator::new(problem, backend)?.chi2(p)
}

pub fn mlh(problem: &FitProblem, p: &[f64], backend: &Backend) -> Result<f64, MusrError> {
    Evaluator::new(problem, backend)?.mlh(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_dataset(counts: Vec<u64>) -> MusrDataset {
        MusrDataset {
            detector: 0,
            counts,
            dt: 0.01,
            t0_bin: 0,
            binding: TheoryBinding::default(),
            n0_slot: 0,
            nbkg_slot: 1,
            range: None,
        }
    }

    fn problem(theory: &str, ds: Vec<MusrDataset>, values: &[f64]) -> FitProblem {
        let params = values.iter().enumerate().map(|(i, &v)| Parameter::free(format!("p{i}"), v, 0.1)).collect();
        FitProblem {
            theory: TheoryExpr::parse(theory).unwrap(),
            datasets: ds,
            parameters: ParameterSet::new(params).unwrap(),
            constants: PhysicsConstants::default(),
        }
    }

    #[test]
    fn model_bin_examples() {
        let c = PhysicsConstants::default();
        let zero = TheoryExpr::parse("0").unwrap();
        let mut ds = flat_dataset(vec![0; 10]);
        assert_eq!(model_bin(&ds, &zero, &[100.0, 5.0], 0, &c).unwrap(), 105.0);

        ds.dt = c.tau_mu;
        let v = model_bin(&ds, &zero, &[100.0, 0.0], 1, &c).unwrap();
        assert!((v - 36.787_944_117_144_23).abs() < 1e-12, "{v}");

        let theory = TheoryExpr::parse(&precession_theory(&c)).unwrap();
        let mut ds = flat_dataset(vec![0; 10]);
        ds.binding = TheoryBinding::new(vec![0, 1, 2, 3, 0], vec![0.0]);
        ds.n0_slot = 4;
        ds.nbkg_slot = 5;
        let p = [0.25, 0.0, 0.0, 0.0, 1000.0, 7.0];
        for bin in [0, 3, 9] {
            let t = ds.time(bin);
            let want = 1000.0 * (-t / c.tau_mu).exp() * 1.25 + 7.0;
            assert_eq!(model_bin(&ds, &theory, &p, bin, &c).unwrap(), want);
        }
    }

    #[test]
    fn chi2_examples() {
        let b = Backend::serial();
        // constant model N = Nbkg with N0 = 0
        let prob = problem("0", vec![flat_dataset(vec![4])], &[0.0, 2.0]);
        assert_eq!(chi2(&prob, &[0.0, 2.0], &b).unwrap(), 1.0);
        let prob = problem("0", vec![flat_dataset(vec![3, 3, 3])], &[0.0, 3.0]);
        assert_eq!(chi2(&prob, &[0.0, 3.0], &b).unwrap(), 0.0);
    }

    #[test]
    fn zero_count_bins_use_unit_error() {
        let b = Backend::serial();
        let prob = problem("0", vec![flat_dataset(vec![0])], &[0.0, 2.0]);
        assert_eq!(chi2(&prob, &[0.0, 2.0], &b).unwrap(), 4.0);
    }

    #[test]
    fn mlh_examples() {
        let b = Backend::serial();
        let prob = problem("0", vec![flat_dataset(vec![0])], &[0.0, 3.0]);
        assert_eq!(mlh(&prob, &[0.0, 3.0], &b).unwrap(), 6.0);
        let prob = problem("0", vec![flat_dataset(vec![5, 5])], &[0.0, 5.0]);
        assert_eq!(mlh(&prob, &[0.0, 5.0], &b).unwrap(), 0.0);
    }

    #[test]
    fn mlh_domain_error_names_bin() {
        let b = Backend::threaded(2).unwrap();
        let ds = flat_dataset(vec![1; 100]);
        let prob = problem("0", vec![ds.clone(), ds], &[0.0, 0.0]);
        let err = mlh(&prob, &[0.0, 0.0], &b).unwrap_err();
        assert!(matches!(err, MusrError::Domain { dataset: 0, bin: 0, .. }), "{err}");
        // A(t) = -t gives N = exp(-t/τ)(1 - t), which reaches 0 at t = 1 (bin 100)
        let prob = problem("0 - t", vec![flat_dataset(vec![1; 150])], &[1.0, 0.0]);
        let err = mlh(&prob, &[1.0, 0.0], &b).unwrap_err();
        match err {
            MusrError::Domain { bin, .. } => assert!((99..=101).contains(&bin), "bin {bin}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn empty_fit_range_is_an_error() {
        let mut ds = flat_dataset(vec![1; 10]);
        ds.range = Some(FitRange { start: 5.0, end: 6.0 });
        let prob = problem("0", vec![ds], &[0.0, 1.0]);
        let err = chi2(&prob, &[0.0, 1.0], &Backend::serial()).unwrap_err();
        assert!(matches!(err, MusrError::EmptyFitRange { dataset: 0 }));
    }

    #[test]
    fn fit_range_selection() {
        let mut ds = flat_dataset(vec![1; 10]);
        ds.t0_bin = 2;
        assert_eq!(ds.fit_bins(), 2..10);
        ds.range = Some(FitRange { start: 0.015, end: 0.05 });
        assert_eq!(ds.fit_bins(), 4..8);
    }

    #[test]
    fn parameter_set_validation() {
        assert!(ParameterSet::new(vec![Parameter::free("a", 1.0, 0.0)]).is_err());
        assert!(ParameterSet::new(vec![Parameter::free("a", 1.0, 1.0).with_bounds(2.0, 1.0)]).is_err());
        assert!(ParameterSet::new(vec![Parameter::fixed("a", 1.0)]).is_ok());
    }
}
