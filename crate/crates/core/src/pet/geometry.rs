use std::f64::consts::PI;

use super::PetError;

/// Cylindrical scanner of identical detector rings.
#[derive(Debug, Clone, PartialEq)]
pub struct ScannerGeometry {
    pub rings: u32,
    pub detectors_per_ring: u32,
    /// Transaxial and axial pitch, mm.
    pub pitch: f64,
    /// Crystal face (2) and radial length, mm. Metadata only.
    pub crystal_size: [f64; 3],
    pub ring_radius: f64,
}

impl ScannerGeometry {
    /// Scanner whose ring radius makes the transaxial pitch consistent:
    /// `R = detectors_per_ring · pitch / 2π`.
    pub fn new(rings: u32, detectors_per_ring: u32, pitch: f64) -> Self {
        Self {
            rings,
            detectors_per_ring,
            pitch,
            crystal_size: [2.0, 2.0, 12.0],
            ring_radius: detectors_per_ring as f64 * pitch / (2.0 * PI),
        }
    }

    /// 91 rings of 180 detectors at 2.2 mm pitch.
    pub fn paper_scanner() -> Self {
        Self::new(91, 180, 2.2)
    }

    pub fn with_radius(mut self, ring_radius: f64) -> Self {
        self.ring_radius = ring_radius;
        self
    }

    pub fn validate(&self) -> Result<(), PetError> {
        if self.rings == 0 || self.detectors_per_ring == 0 {
            return Err(PetError::Geometry("scanner needs at least one ring and one detector".into()));
        }
        if !(self.ring_radius > 0.0 && self.ring_radius.is_finite()) {
            return Err(PetError::Geometry(format!("ring radius {} must be positive", self.ring_radius)));
        }
        if !(self.pitch > 0.0 && self.pitch.is_finite()) {
            return Err(PetError::Geometry(format!("pitch {} must be positive", self.pitch)));
        }
        Ok(())
    }

    pub fn detector_count(&self) -> u32 {
        self.rings * self.detectors_per_ring
    }

    pub fn detector_id(&self, ring: u32, index_in_ring: u32) -> u32 {
        ring * self.detectors_per_ring + index_in_ring
    }

    /// Half of the axial extent covered by the rings.
    pub fn axial_half_length(&self) -> f64 {
        self.rings as f64 * self.pitch / 2.0
    }

    /// Centre of the detector face.
    pub fn position(&self, id: u32) -> [f64; 3] {
        let ring = id / self.detectors_per_ring;
        let k = id % self.detectors_per_ring;
        let phi = 2.0 * PI * k as f64 / self.detectors_per_ring as f64;
        [
            self.ring_radius * phi.cos(),
            self.ring_radius * phi.sin(),
            (ring as f64 - (self.rings as f64 - 1.0) / 2.0) * self.pitch,
        ]
    }
}

/// A detected coincidence: the detector pair `c(l)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ListModeEvent {
    pub det_a: u32,
    pub det_b: u32,
}

impl ListModeEvent {
    pub fn new(det_a: u32, det_b: u32) -> Self {
        Self { det_a, det_b }
    }

    /// Same pair with the lower detector id first.
    pub fn canonical(self) -> Self {
        if self.det_a <= self.det_b {
            self
        } else {
            Self { det_a: self.det_b, det_b: self.det_a }
        }
    }

    pub fn key(self) -> u64 {
        let c = self.canonical();
        (c.det_a as u64) << 32 | c.det_b as u64
    }

    pub fn validate(&self, geometry: &ScannerGeometry) -> Result<(), String> {
        let n = geometry.detector_count();
        if self.det_a >= n || self.det_b >= n {
            return Err(format!("detector pair ({}, {}) outside 0..{n}", self.det_a, self.det_b));
        }
        if self.det_a == self.det_b {
            return Err(format!("detector pair ({0}, {0}) uses one detector twice", self.det_a));
        }
        Ok(())
    }
}
