//! Toy list-mode simulator: isotropic back-to-back photon pairs from
//! uniform-activity sources, detected by the nearest crystal.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::geometry::{ListModeEvent, ScannerGeometry};
use super::PetError;

/// Sphere diameters of the six hot-rod groups, mm.
pub const DERENZO_DIAMETERS: [f64; 6] = [1.0, 1.2, 1.6, 2.4, 3.2, 4.0];

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Point([f64; 3]),
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis along z.
    Cylinder {
        center: [f64; 3],
        radius: f64,
        half_length: f64,
    },
}

impl Shape {
    pub fn volume(&self) -> f64 {
        match *self {
            Shape::Point(_) => 0.0,
            Shape::Sphere { radius, .. } => 4.0 / 3.0 * PI * radius.powi(3),
            Shape::Cylinder { radius, half_length, .. } => PI * radius * radius * 2.0 * half_length,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match *self {
            Shape::Point(p) => p,
            Shape::Sphere { center, radius } => loop {
                let d: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= 1.0 {
                    break std::array::from_fn(|k| center[k] + radius * d[k]);
                }
            },
            Shape::Cylinder { center, radius, half_length } => loop {
                let x: f64 = rng.random_range(-1.0..1.0);
                let y: f64 = rng.random_range(-1.0..1.0);
                if x * x + y * y <= 1.0 {
                    let z: f64 = rng.random_range(-1.0..1.0);
                    break [center[0] + radius * x, center[1] + radius * y, center[2] + half_length * z];
                }
            },
        }
    }
}

/// A shape with total activity (decays per second).
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub shape: Shape,
    pub activity: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Phantom {
    pub sources: Vec<Source>,
}

impl Phantom {
    pub fn point(position: [f64; 3], activity: f64) -> Self {
        Self { sources: vec![Source { shape: Shape::Point(position), activity }] }
    }

    pub fn sphere(center: [f64; 3], diameter: f64, activity: f64) -> Self {
        Self { sources: vec![Source { shape: Shape::Sphere { center, radius: diameter / 2.0 }, activity }] }
    }

    /// Six triangular groups of six spheres in the z = 0 plane, one group
    /// per diameter in [`DERENZO_DIAMETERS`], spheres spaced two diameters
    /// apart, inside a 150 mm long, 50 mm wide cylinder of zero activity.
    /// Every sphere has activity `concentration · volume`.
    pub fn derenzo(concentration: f64) -> Self {
        let mut sources = Vec::new();
        for (g, &d) in DERENZO_DIAMETERS.iter().enumerate() {
            let angle = g as f64 * PI / 3.0;
            let (radial, lateral) = ([angle.cos(), angle.sin()], [-angle.sin(), angle.cos()]);
            let spacing = 2.0 * d;
            for row in 0..3 {
                let r = 4.0 + row as f64 * spacing * 3f64.sqrt() / 2.0;
                for i in 0..=row {
                    let l = (i as f64 - row as f64 / 2.0) * spacing;
                    let center = [r * radial[0] + l * lateral[0], r * radial[1] + l * lateral[1], 0.0];
                    let shape = Shape::Sphere { center, radius: d / 2.0 };
                    let activity = concentration * shape.volume();
                    sources.push(Source { shape, activity });
                }
            }
        }
        sources.push(Source {
            shape: Shape::Cylinder { center: [0.0; 3], radius: 25.0, half_length: 75.0 },
            activity: 0.0,
        });
        Self { sources }
    }

    pub fn total_activity(&self) -> f64 {
        self.sources.iter().map(|s| s.activity).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    /// Simulate exactly this many decays.
    Decays(u64),
    /// Simulate until this many coincidences are detected.
    Detected(u64),
    /// `round(seconds · total activity)` decays.
    Duration(f64),
}

/// Seeded list-mode simulation. Events are in detection order; `det_a` is
/// the crystal hit along the sampled direction, `det_b` the opposite one.
pub fn simulate_listmode(
    phantom: &Phantom,
    geometry: &ScannerGeometry,
    budget: Budget,
    seed: u64,
) -> Result<Vec<ListModeEvent>, PetError> {
    geometry.validate()?;
    if let Some(s) = phantom.sources.iter().find(|s| !(s.activity >= 0.0 && s.activity.is_finite())) {
        return Err(PetError::Simulation(format!("source activity {} must be non-negative", s.activity)));
    }
    let total = phantom.total_activity();
    if total == 0.0 {
        return Ok(Vec::new());
    }
    let mut cumulative = Vec::with_capacity(phantom.sources.len());
    let mut acc = 0.0;
    for s in &phantom.sources {
        acc += s.activity;
        cumulative.push(acc);
    }
    let (decays, wanted) = match budget {
        Budget::Decays(n) => (n, u64::MAX),
        Budget::Detected(n) => (n.saturating_mul(1000).saturating_add(1_000_000), n),
        Budget::Duration(seconds) => {
            if !(seconds >= 0.0 && seconds.is_finite()) {
                return Err(PetError::Simulation(format!("duration {seconds} must be non-negative")));
            }
            ((seconds * total).round() as u64, u64::MAX)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    for _ in 0..decays {
        if events.len() as u64 >= wanted {
            break;
        }
        let r = rng.random::<f64>() * total;
        let k = cumulative.partition_point(|&c| c <= r).min(phantom.sources.len() - 1);
        let p = phantom.sources[k].shape.sample(&mut rng);
        let cos_t: f64 = rng.random_range(-1.0..1.0);
        let phi: f64 = rng.random_range(0.0..2.0 * PI);
        let sin_t = (1.0 - cos_t * cos_t).sqrt();
        let u = [sin_t * phi.cos(), sin_t * phi.sin(), cos_t];
        if let Some(e) = detect(p, u, geometry) {
            events.push(e);
        }
    }
    if let Budget::Detected(n) = budget {
        if (events.len() as u64) < n {
            return Err(PetError::Simulation(format!(
                "only {} of {n} coincidences detected within {decays} decays",
                events.len()
            )));
        }
    }
    Ok(events)
}

fn detect(p: [f64; 3], u: [f64; 3], g: &ScannerGeometry) -> Option<ListModeEvent> {
    let r = g.ring_radius;
    let a = u[0] * u[0] + u[1] * u[1];
    let b = p[0] * u[0] + p[1] * u[1];
    let c = p[0] * p[0] + p[1] * p[1] - r * r;
    if a == 0.0 || c >= 0.0 {
        return None;
    }
    let root = (b * b - a * c).sqrt();
    let t_fwd = (-b + root) / a;
    let t_back = (-b - root) / a;
    let crystal = |t: f64| -> Option<u32> {
        let h: [f64; 3] = std::array::from_fn(|k| p[k] + t * u[k]);
        let ring = (h[2] / g.pitch + (g.rings as f64 - 1.0) / 2.0).round();
        if ring < 0.0 || ring >= g.rings as f64 {
            return None;
        }
        let d = g.detectors_per_ring as f64;
        let k = (h[1].atan2(h[0]) / (2.0 * PI / d)).round().rem_euclid(d);
        Some(g.detector_id(ring as u32, k as u32 % g.detectors_per_ring))
    };
    let da = crystal(t_fwd)?;
    let db = crystal(t_back)?;
    (da != db).then_some(ListModeEvent::new(da, db))
}
