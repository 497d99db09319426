use super::geometry::{ListModeEvent, ScannerGeometry};
use super::projector::ProjectionPlan;
use super::PetError;
use crate::backend::Backend;
use crate::image::Image3D;

/// How the MLEM denominator `s_j = Σ_i a_ij` is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivityMode {
    /// `s ≡ 1`.
    Uniform,
    /// Back projection of unit weights over the distinct event LORs.
    FromEventLors,
    /// Sum over every detector pair of the scanner. Small scanners only.
    FullEnumeration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    /// `m_d`, mm.
    pub matrix_distance: f64,
    pub iterations: usize,
    pub event_halving: bool,
    /// `n_i`, the same for every LOR.
    pub noise: f64,
    pub sensitivity: SensitivityMode,
}

impl ReconConfig {
    /// 15 iterations, no halving, uniform sensitivity, `m_d` = voxel size along x.
    pub fn for_grid(grid: &Image3D) -> Self {
        Self {
            matrix_distance: grid.voxel_size[0],
            iterations: 15,
            event_halving: false,
            noise: 0.0,
            sensitivity: SensitivityMode::Uniform,
        }
    }

    pub fn validate(&self) -> Result<(), PetError> {
        if !(self.matrix_distance > 0.0 && self.matrix_distance.is_finite()) {
            return Err(PetError::Config(format!("matrix distance {} must be positive", self.matrix_distance)));
        }
        if self.iterations == 0 {
            return Err(PetError::Config("at least one iteration is required".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(PetError::Config(format!("noise term {} must be non-negative", self.noise)));
        }
        Ok(())
    }
}

pub fn compute_sensitivity(
    events: &[ListModeEvent],
    geometry: &ScannerGeometry,
    grid: &Image3D,
    config: &ReconConfig,
    backend: &Backend,
) -> Result<Image3D, PetError> {
    let data = match config.sensitivity {
        SensitivityMode::Uniform => vec![1.0; grid.len()],
        SensitivityMode::FromEventLors => {
            let plan = ProjectionPlan::from_events(events, geometry, grid, config.matrix_distance, backend)?;
            plan.backward_weighted(|_| Some(1.0), backend)?
        }
        SensitivityMode::FullEnumeration => {
            let plan = ProjectionPlan::all_pairs(geometry, grid, config.matrix_distance)?;
            plan.backward_weighted(|_| Some(1.0), backend)?
        }
    };
    Ok(grid.with_data(data)?)
}

/// `f_j ← (f_j / s_j) · c_j`; voxels with `s_j == 0` become 0.
pub fn apply_update(image: &Image3D, correction: &[f64], sensitivity: &Image3D) -> Result<Image3D, PetError> {
    if !image.same_grid(sensitivity) || correction.len() != image.len() {
        return Err(PetError::Image(crate::image::ImageError::GridMismatch));
    }
    let data = image
        .data
        .iter()
        .zip(correction)
        .zip(&sensitivity.data)
        .map(|((&f, &c), &s)| if s == 0.0 { 0.0 } else { f / s * c })
        .collect();
    Ok(image.with_data(data)?)
}

/// One MLEM step over the events of `plan`.
pub fn mlem_iterate(
    image: &Image3D,
    plan: &ProjectionPlan,
    sensitivity: &Image3D,
    config: &ReconConfig,
    backend: &Backend,
) -> Result<Image3D, PetError> {
    let ybar = plan.forward(image, config.noise, backend)?;
    let correction = plan.backward(&ybar, backend)?;
    apply_update(image, &correction, sensitivity)
}

/// `Σ_l ln ȳ_{c(l)} - Σ_j s_j f_j`, over events with `ȳ > 0`.
pub fn log_likelihood(
    image: &Image3D,
    plan: &ProjectionPlan,
    sensitivity: &Image3D,
    config: &ReconConfig,
    backend: &Backend,
) -> Result<f64, PetError> {
    let ybar = plan.forward(image, config.noise, backend)?;
    let m = plan.multiplicities();
    let data_term = backend.map_reduce(ybar.len(), |i| if ybar[i] > 0.0 { m[i] * ybar[i].ln() } else { 0.0 });
    let penalty = backend.map_reduce_zip(&sensitivity.data, &image.data, |s, f| s * f)?;
    Ok(data_term - penalty)
}

/// Initial estimate: 1 in voxels whose centre lies inside the detector
/// cylinder, 0 elsewhere.
pub fn default_initial_image(geometry: &ScannerGeometry, grid: &Image3D) -> Image3D {
    let r2 = geometry.ring_radius * geometry.ring_radius;
    let half = geometry.axial_half_length();
    let data = (0..grid.len())
        .map(|i| {
            let c = grid.voxel_center(grid.coords(i));
            if c[0] * c[0] + c[1] * c[1] < r2 && c[2].abs() <= half {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    grid.with_data(data).expect("same grid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub image: Image3D,
    pub sensitivity: Image3D,
    pub iterations_done: usize,
    /// Events in the list at each iteration that ran.
    pub events_per_iteration: Vec<usize>,
}

/// Runs `config.iterations` MLEM steps from `initial`.
///
/// The sensitivity image is computed once from the full event list. With
/// event halving the list is cut to its first half after every iteration;
/// the run stops early once it is empty.
pub fn reconstruct(
    events: &[ListModeEvent],
    geometry: &ScannerGeometry,
    initial: &Image3D,
    config: &ReconConfig,
    backend: &Backend,
) -> Result<Reconstruction, PetError> {
    config.validate()?;
    geometry.validate()?;
    let sensitivity = compute_sensitivity(events, geometry, initial, config, backend)?;
    let mut image = initial.clone();
    let mut current = events.len();
    let mut plan = ProjectionPlan::from_events(events, geometry, initial, config.matrix_distance, backend)?;
    let mut seen = Vec::new();
    for _ in 0..config.iterations {
        if current == 0 {
            break;
        }
        seen.push(current);
        image = mlem_iterate(&image, &plan, &sensitivity, config, backend)?;
        if config.event_halving {
            current /= 2;
            plan = ProjectionPlan::from_events(&events[..current], geometry, initial, config.matrix_distance, backend)?;
        }
    }
    Ok(Reconstruction { image, sensitivity, iterations_done: seen.len(), events_per_iteration: seen })
}
