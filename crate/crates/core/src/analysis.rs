//! Excess and significance of an inner sphere over its surrounding shell.
//!
//! A voxel belongs to a sphere centred on voxel `c` when
//! `Σ_a ((i_a - c_a) · voxel_size_a)² ≤ r²`. Sums always run in z, y, x
//! order so every path through this module adds the same values in the same
//! sequence.

use thiserror::Error;

use crate::backend::Backend;
use crate::image::Image3D;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("sphere diameters must satisfy 0 < inner < outer, got {inner} and {outer}")]
    Spec { inner: f64, outer: f64 },
}

/// Inner and outer sphere diameters, mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereSpec {
    pub inner_diameter: f64,
    pub outer_diameter: f64,
}

impl SphereSpec {
    pub fn new(inner_diameter: f64, outer_diameter: f64) -> Result<Self, AnalysisError> {
        if !(inner_diameter > 0.0 && inner_diameter < outer_diameter && outer_diameter.is_finite()) {
            return Err(AnalysisError::Spec { inner: inner_diameter, outer: outer_diameter });
        }
        Ok(Self { inner_diameter, outer_diameter })
    }

    fn radii_sq(&self) -> (f64, f64) {
        let ri = self.inner_diameter / 2.0;
        let ro = self.outer_diameter / 2.0;
        (ri * ri, ro * ro)
    }
}

impl Default for SphereSpec {
    fn default() -> Self {
        Self { inner_diameter: 2.0, outer_diameter: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereSums {
    /// Inner-sphere sum.
    pub s: f64,
    /// Shell sum, unscaled.
    pub b_raw: f64,
    pub n_in: usize,
    pub n_shell: usize,
    /// False when a member voxel of either sphere falls outside the image.
    pub contained: bool,
}

#[inline]
fn dist_sq(d: [i64; 3], vs: [f64; 3]) -> f64 {
    let x = d[0] as f64 * vs[0];
    let y = d[1] as f64 * vs[1];
    let z = d[2] as f64 * vs[2];
    x * x + y * y + z * z
}

/// Largest voxel offset along each axis that can still be inside radius².
fn half_extent(r2: f64, vs: [f64; 3]) -> [i64; 3] {
    std::array::from_fn(|a| {
        let mut k = (r2.sqrt() / vs[a]).floor() as i64 + 1;
        let mut d = [0; 3];
        loop {
            d[a] = k;
            if dist_sq(d, vs) <= r2 || k == 0 {
                break k;
            }
            k -= 1;
        }
    })
}

/// Sums over the inner sphere and the shell around voxel `center`, visiting
/// only the bounding box of the outer sphere.
pub fn sphere_sums(image: &Image3D, center: [usize; 3], spec: &SphereSpec) -> SphereSums {
    let (ri2, ro2) = spec.radii_sq();
    let vs = image.voxel_size;
    let ext = half_extent(ro2, vs);
    let c = center.map(|v| v as i64);
    let n = image.dims.map(|v| v as i64);
    let contained = (0..3).all(|a| c[a] - ext[a] >= 0 && c[a] + ext[a] < n[a]);
    let lo: [i64; 3] = std::array::from_fn(|a| (c[a] - ext[a]).max(0));
    let hi: [i64; 3] = std::array::from_fn(|a| (c[a] + ext[a]).min(n[a] - 1));
    let mut out = SphereSums { s: 0.0, b_raw: 0.0, n_in: 0, n_shell: 0, contained };
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let d2 = dist_sq([x - c[0], y - c[1], z - c[2]], vs);
                if d2 > ro2 {
                    continue;
                }
                let v = image.data[image.index(x as usize, y as usize, z as usize)];
                if d2 <= ri2 {
                    out.s += v;
                    out.n_in += 1;
                } else {
                    out.b_raw += v;
                    out.n_shell += 1;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Excess {
    pub e: f64,
    pub de: f64,
    pub valid: bool,
}

impl Excess {
    const INVALID: Excess = Excess { e: 0.0, de: 0.0, valid: false };

    pub fn significance(&self) -> f64 {
        if self.valid && self.de > 0.0 {
            self.e / self.de
        } else {
            0.0
        }
    }
}

fn excess_from(sums: &SphereSums) -> Excess {
    if !sums.contained || sums.n_shell == 0 {
        return Excess::INVALID;
    }
    let s = sums.s;
    let b = sums.b_raw * (sums.n_in as f64 / sums.n_shell as f64);
    if b <= 0.0 || s <= 0.0 {
        return Excess::INVALID;
    }
    Excess { e: (s - b) / b, de: (s / b) * (1.0 / s + 1.0 / b).sqrt(), valid: true }
}

/// `E = (S - B)/B`, `ΔE = (S/B)·√(1/S + 1/B)` with the shell sum scaled to
/// the inner voxel count. Invalid (and zero) when a sphere leaves the image
/// or `S` or `B` is not positive.
pub fn excess_at(image: &Image3D, center: [usize; 3], spec: &SphereSpec) -> Excess {
    excess_from(&sphere_sums(image, center, spec))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcessMap {
    pub e: Image3D,
    pub de: Image3D,
    pub valid: Vec<bool>,
}

impl ExcessMap {
    pub fn at(&self, index: usize) -> Excess {
        Excess { e: self.e.data[index], de: self.de.data[index], valid: self.valid[index] }
    }

    /// Validity as a 0/1 image.
    pub fn mask(&self) -> Image3D {
        self.e.with_data(self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()).expect("same grid")
    }
}

/// Offsets of the outer sphere in z, y, x order, tagged inner or shell.
fn stencil(spec: &SphereSpec, vs: [f64; 3]) -> (Vec<([i64; 3], bool)>, [i64; 3]) {
    let (ri2, ro2) = spec.radii_sq();
    let ext = half_extent(ro2, vs);
    let mut out = Vec::new();
    for z in -ext[2]..=ext[2] {
        for y in -ext[1]..=ext[1] {
            for x in -ext[0]..=ext[0] {
                let d2 = dist_sq([x, y, z], vs);
                if d2 <= ro2 {
                    out.push(([x, y, z], d2 <= ri2));
                }
            }
        }
    }
    (out, ext)
}

/// [`excess_at`] at every voxel centre.
pub fn excess_map(image: &Image3D, spec: &SphereSpec, backend: &Backend) -> ExcessMap {
    let (offsets, ext) = stencil(spec, image.voxel_size);
    let n = image.dims.map(|v| v as i64);
    let (nx, nxy) = (n[0], n[0] * n[1]);
    // flat index offsets; only used for fully contained spheres
    let flat: Vec<(i64, bool)> = offsets.iter().map(|&(d, inner)| (d[0] + nx * d[1] + nxy * d[2], inner)).collect();
    let data = &image.data;
    let cells = backend.map(image.len(), |i| {
        let c = image.coords(i).map(|v| v as i64);
        if !(0..3).all(|a| c[a] - ext[a] >= 0 && c[a] + ext[a] < n[a]) {
            return Excess::INVALID;
        }
        let mut sums = SphereSums { s: 0.0, b_raw: 0.0, n_in: 0, n_shell: 0, contained: true };
        for &(off, inner) in &flat {
            let v = data[(i as i64 + off) as usize];
            if inner {
                sums.s += v;
                sums.n_in += 1;
            } else {
                sums.b_raw += v;
                sums.n_shell += 1;
            }
        }
        excess_from(&sums)
    });
    let e = cells.iter().map(|x| x.e).collect();
    let de = cells.iter().map(|x| x.de).collect();
    ExcessMap {
        e: image.with_data(e).expect("same grid"),
        de: image.with_data(de).expect("same grid"),
        valid: cells.iter().map(|x| x.valid).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub voxel: [usize; 3],
    pub e: f64,
    /// `E / ΔE`.
    pub significance: f64,
}

/// Valid voxels with `E/ΔE ≥ threshold` that beat every valid voxel of
/// their 26-neighbourhood, most significant first.
pub fn find_features(map: &ExcessMap, threshold: f64) -> Vec<Feature> {
    let img = &map.e;
    let sig: Vec<f64> = (0..img.len()).map(|i| map.at(i).significance()).collect();
    let n = img.dims.map(|v| v as i64);
    let mut out = Vec::new();
    for i in 0..img.len() {
        if !map.valid[i] || sig[i] < threshold {
            continue;
        }
        let c = img.coords(i).map(|v| v as i64);
        let mut is_max = true;
        'scan: for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let p = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if (0..3).any(|a| p[a] < 0 || p[a] >= n[a]) {
                        continue;
                    }
                    let j = img.index(p[0] as usize, p[1] as usize, p[2] as usize);
                    if map.valid[j] && sig[j] >= sig[i] {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
        }
        if is_max {
            out.push(Feature { voxel: img.coords(i), e: map.e.data[i], significance: sig[i] });
        }
    }
    out.sort_by(|a, b| b.significance.total_cmp(&a.significance));
    out
}
