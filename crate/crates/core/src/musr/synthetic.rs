//! Seeded synthetic histograms and the transverse-field precession setup.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::{expected_counts, FitProblem, MusrDataset, MusrError, Parameter, ParameterSet, PhysicsConstants};
use crate::theory::{TheoryBinding, TheoryExpr};

/// Global parameter slots of the precession problem. Per-detector `N0` and
/// `Nbkg` follow as `N0_j = 4 + j`, `Nbkg_j = 4 + detectors + j`.
pub const PRECESSION_SLOTS: [&str; 4] = ["A0", "sigma", "phase", "field"];

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramGeometry {
    pub detectors: usize,
    pub bins: usize,
    /// μs
    pub dt: f64,
    pub t0_bin: i64,
    /// Detector phase offsets in degrees, one per detector.
    pub phases_deg: Vec<f64>,
}

impl HistogramGeometry {
    /// Detectors evenly spaced in phase, `φ_j = j · 360° / detectors`.
    pub fn evenly_spaced(detectors: usize, bins: usize, dt: f64) -> Self {
        let step = 360.0 / detectors as f64;
        Self { detectors, bins, dt, t0_bin: 0, phases_deg: (0..detectors).map(|j| j as f64 * step).collect() }
    }
}

impl Default for HistogramGeometry {
    fn default() -> Self {
        Self::evenly_spaced(16, 50_000, 0.000_195_312_5)
    }
}

/// Truth values for the precession problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecessionTruth {
    pub a0: f64,
    /// μs⁻¹
    pub sigma: f64,
    /// Common phase offset in degrees, added to each detector phase.
    pub phase_deg: f64,
    /// Tesla
    pub field: f64,
    pub n0: f64,
    pub nbkg: f64,
}

impl Default for PrecessionTruth {
    fn default() -> Self {
        Self { a0: 0.25, sigma: 0.2, phase_deg: 0.0, field: 0.05, n0: 1000.0, nbkg: 10.0 }
    }
}

/// `A(t) = A0 · exp(-(σt)²/2) · cos(γμ B t + φ)`, with the detector phase
/// supplied through `f[m[4]]`.
pub fn precession_theory(constants: &PhysicsConstants) -> String {
    format!("p[m[0]] * sg(t, p[m[1]]) * tf(t, p[m[2]] + f[m[4]], {:?} * p[m[3]])", constants.gamma_mu_mhz_per_t)
}

/// Builds the precession fit problem with empty histograms. `A0`, `sigma`,
/// `phase` and `field` are free; `N0_j` and `Nbkg_j` are fixed at truth.
pub fn precession_problem(
    geometry: &HistogramGeometry,
    truth: &PrecessionTruth,
    constants: &PhysicsConstants,
) -> Result<FitProblem, MusrError> {
    if geometry.phases_deg.len() != geometry.detectors {
        return Err(MusrError::Parameters(format!(
            "{} phases for {} detectors",
            geometry.phases_deg.len(),
            geometry.detectors
        )));
    }
    let theory = TheoryExpr::parse(&precession_theory(constants)).expect("built-in theory parses");
    let d = geometry.detectors;
    let mut params = vec![
        Parameter::free("A0", truth.a0, 0.01).with_bounds(0.0, 1.0),
        Parameter::free("sigma", truth.sigma, 0.01).with_bounds(0.0, 100.0),
        Parameter::free("phase", truth.phase_deg, 1.0),
        Parameter::free("field", truth.field, 1e-4),
    ];
    params.extend((0..d).map(|j| Parameter::fixed(format!("N0_{j}"), truth.n0)));
    params.extend((0..d).map(|j| Parameter::fixed(format!("Nbkg_{j}"), truth.nbkg)));
    let datasets = (0..d)
        .map(|j| MusrDataset {
            detector: j,
            counts: vec![0; geometry.bins],
            dt: geometry.dt,
            t0_bin: geometry.t0_bin,
            binding: TheoryBinding::new(vec![0, 1, 2, 3, 0], vec![geometry.phases_deg[j]]),
            n0_slot: 4 + j,
            nbkg_slot: 4 + d + j,
            range: None,
        })
        .collect();
    Ok(FitProblem { theory, datasets, parameters: ParameterSet::new(params)?, constants: *constants })
}

/// Replaces the counts of every template dataset with Poisson draws around
/// the model at `truth`. Bins before `t0` draw from the background alone.
pub fn generate_synthetic(
    templates: &[MusrDataset],
    theory: &TheoryExpr,
    truth: &[f64],
    constants: &PhysicsConstants,
    seed: u64,
) -> Result<Vec<MusrDataset>, MusrError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(templates.len());
    for (j, template) in templates.iter().enumerate() {
        template.validate(j)?;
        super::check_slot(template, truth.len())?;
        let bound = theory.bind(&template.binding, truth.len())?;
        let mut ds = template.clone();
        for (bin, count) in ds.counts.iter_mut().enumerate() {
            let t = template.time(bin);
            let expected = if t < 0.0 {
                truth[template.nbkg_slot]
            } else {
                expected_counts(&bound, t, truth, template.n0_slot, template.nbkg_slot, constants.tau_mu)
            };
            if expected < 0.0 || !expected.is_finite() {
                return Err(MusrError::NegativeExpected { dataset: j, bin, expected });
            }
            *count = if expected == 0.0 {
                0
            } else {
                let dist = Poisson::new(expected)
                    .map_err(|e| MusrError::InvalidDataset { dataset: j, msg: format!("bin {bin}: {e}") })?;
                dist.sample(&mut rng) as u64
            };
        }
        out.push(ds);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::musr::model_bin;

    fn small(bins: usize) -> (FitProblem, Vec<f64>) {
        let c = PhysicsConstants::default();
        let g = HistogramGeometry::evenly_spaced(4, bins, 0.01);
        let p = precession_problem(&g, &PrecessionTruth::default(), &c).unwrap();
        let truth = p.parameters.values();
        (p, truth)
    }

    #[test]
    fn default_geometry_phases() {
        let g = HistogramGeometry::default();
        assert_eq!(g.detectors, 16);
        assert_eq!(g.phases_deg[1], 22.5);
        assert_eq!(g.phases_deg[15], 337.5);
    }

    #[test]
    fn zero_rate_gives_zero_counts() {
        let (p, mut truth) = small(200);
        for v in truth.iter_mut().skip(4) {
            *v = 0.0;
        }
        let ds = generate_synthetic(&p.datasets, &p.theory, &truth, &p.constants, 1).unwrap();
        assert!(ds.iter().all(|d| d.counts.iter().all(|&c| c == 0)));
    }

    #[test]
    fn same_seed_same_data() {
        let (p, truth) = small(500);
        let a = generate_synthetic(&p.datasets, &p.theory, &truth, &p.constants, 42).unwrap();
        let b = generate_synthetic(&p.datasets, &p.theory, &truth, &p.constants, 42).unwrap();
        let c = generate_synthetic(&p.datasets, &p.theory, &truth, &p.constants, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn negative_expectation_is_rejected() {
        let (p, mut truth) = small(10);
        truth[4] = -100.0;
        let err = generate_synthetic(&p.datasets, &p.theory, &truth, &p.constants, 1).unwrap_err();
        assert!(matches!(err, MusrError::NegativeExpected { dataset: 0, bin: 0, .. }));
    }

    #[test]
    fn sample_mean_matches_model() {
        // 10^5 draws of one bin, via 10^5 single-bin datasets
        let (p, truth) = small(1);
        let template = MusrDataset { counts: vec![0; 1], ..p.datasets[1].clone() };
        let templates = vec![template; 100_000];
        let ds = generate_synthetic(&templates, &p.theory, &truth, &p.constants, 7).unwrap();
        let mean = ds.iter().map(|d| d.counts[0] as f64).sum::<f64>() / ds.len() as f64;
        let expect = model_bin(&p.datasets[1], &p.theory, &truth, 0, &p.constants).unwrap();
        assert!((mean / expect - 1.0).abs() < 0.01, "{mean} vs {expect}");
    }
}
