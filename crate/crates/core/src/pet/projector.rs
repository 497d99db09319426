//! Slice-walking projector.
//!
//! A LOR is walked plane by plane along its predominant transverse axis. In
//! every plane the intersection point picks the voxel that contains it plus
//! the three neighbours one step up along the two in-plane axes, and each
//! gets `a = max(0, m_d - distance)`.

use std::ops::Range;

use smallvec::SmallVec;

use super::geometry::{ListModeEvent, ScannerGeometry};
use super::PetError;
use crate::backend::Backend;
use crate::image::Image3D;

/// LORs per scatter batch in back projection.
const BACKPROJECT_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u32)]
pub enum LorLabel {
    Skip = 0,
    XDominant = 1,
    YDominant = 2,
}

/// Labels a LOR by its predominant transverse direction. Ties go to x.
pub fn classify_lor(event: ListModeEvent, geometry: &ScannerGeometry, image: &Image3D) -> LorLabel {
    classify_points(geometry.position(event.det_a), geometry.position(event.det_b), image)
}

fn classify_points(pa: [f64; 3], pb: [f64; 3], image: &Image3D) -> LorLabel {
    for axis in 0..3 {
        let (lo, hi) = image.extent(axis);
        if pa[axis].max(pb[axis]) < lo || pa[axis].min(pb[axis]) > hi {
            return LorLabel::Skip;
        }
    }
    let dx = (pb[0] - pa[0]).abs();
    let dy = (pb[1] - pa[1]).abs();
    if dx.max(dy) == 0.0 {
        LorLabel::Skip
    } else if dx >= dy {
        LorLabel::XDominant
    } else {
        LorLabel::YDominant
    }
}

/// Start and end of each label group in a sorted list.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroupOffsets {
    pub skip: Range<usize>,
    pub x_dominant: Range<usize>,
    pub y_dominant: Range<usize>,
}

impl GroupOffsets {
    fn from_sorted(labels: &[u32]) -> Self {
        let x = labels.partition_point(|&l| l < LorLabel::XDominant as u32);
        let y = labels.partition_point(|&l| l < LorLabel::YDominant as u32);
        Self { skip: 0..x, x_dominant: x..y, y_dominant: y..labels.len() }
    }

    /// Events that take part in projection.
    pub fn projected(&self) -> Range<usize> {
        self.x_dominant.start..self.y_dominant.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SortedEvents {
    pub events: Vec<ListModeEvent>,
    pub offsets: GroupOffsets,
}

/// Stable grouping of `events` into Skip | XDominant | YDominant.
pub fn sort_events(events: &[ListModeEvent], labels: &[LorLabel], backend: &Backend) -> Result<SortedEvents, PetError> {
    let (events, offsets) = sort_grouped(events.to_vec(), labels, backend)?;
    Ok(SortedEvents { events, offsets })
}

fn sort_grouped<V: Send>(
    mut values: Vec<V>,
    labels: &[LorLabel],
    backend: &Backend,
) -> Result<(Vec<V>, GroupOffsets), PetError> {
    let mut keys: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    backend.sort_by_key(&mut keys, &mut values)?;
    Ok((values, GroupOffsets::from_sorted(&keys)))
}

/// A LOR as a segment from `a` to `a + d`, walked along `axis`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LorLine {
    a: [f64; 3],
    d: [f64; 3],
    axis: usize,
}

impl LorLine {
    fn new(pa: [f64; 3], pb: [f64; 3], label: LorLabel) -> Option<Self> {
        let axis = match label {
            LorLabel::Skip => return None,
            LorLabel::XDominant => 0,
            LorLabel::YDominant => 1,
        };
        Some(Self { a: pa, d: std::array::from_fn(|k| pb[k] - pa[k]), axis })
    }

    /// Calls `emit(voxel, a)` for the positive elements of one plane.
    #[inline]
    fn plane_elements<F: FnMut(usize, f64)>(&self, plane: usize, grid: &Image3D, m_d: f64, mut emit: F) {
        let u = self.axis;
        let (v, w) = if u == 0 { (1, 2) } else { (0, 2) };
        let xu = grid.origin[u] + plane as f64 * grid.voxel_size[u];
        let s = (xu - self.a[u]) / self.d[u];
        if !(0.0..=1.0).contains(&s) {
            return;
        }
        let pv = self.a[v] + s * self.d[v];
        let pw = self.a[w] + s * self.d[w];
        let jv = ((pv - grid.extent(v).0) / grid.voxel_size[v]).floor();
        let jw = ((pw - grid.extent(w).0) / grid.voxel_size[w]).floor();
        let (nv, nw) = (grid.dims[v] as f64, grid.dims[w] as f64);
        for (dv, dw) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
            let iv = jv + dv;
            let iw = jw + dw;
            if iv < 0.0 || iw < 0.0 || iv >= nv || iw >= nw {
                continue;
            }
            let cv = grid.origin[v] + iv * grid.voxel_size[v];
            let cw = grid.origin[w] + iw * grid.voxel_size[w];
            let a = m_d - ((pv - cv) * (pv - cv) + (pw - cw) * (pw - cw)).sqrt();
            if a > 0.0 {
                let mut idx = [0usize; 3];
                idx[u] = plane;
                idx[v] = iv as usize;
                idx[w] = iw as usize;
                emit(grid.index(idx[0], idx[1], idx[2]), a);
            }
        }
    }

    #[inline]
    fn for_each_element<F: FnMut(usize, f64)>(&self, grid: &Image3D, m_d: f64, mut emit: F) {
        for plane in 0..grid.dims[self.axis] {
            self.plane_elements(plane, grid, m_d, &mut emit);
        }
    }
}

/// System-matrix elements `(voxel, a_ij)` of one LOR in one plane
/// perpendicular to its predominant axis. Empty for Skip LORs and planes the
/// segment does not reach.
pub fn matrix_elements_at_plane(
    event: ListModeEvent,
    plane: usize,
    geometry: &ScannerGeometry,
    image: &Image3D,
    m_d: f64,
) -> SmallVec<[(u32, f64); 4]> {
    let mut out = SmallVec::new();
    let pa = geometry.position(event.det_a);
    let pb = geometry.position(event.det_b);
    if let Some(line) = LorLine::new(pa, pb, classify_points(pa, pb, image)) {
        if plane < image.dims[line.axis] {
            line.plane_elements(plane, image, m_d, |j, a| out.push((j as u32, a)));
        }
    }
    out
}

/// Distinct, classified and grouped LORs ready for projection. Skip LORs
/// are dropped; the events they carried are counted in `skipped_events`.
#[derive(Debug, Clone)]
pub struct ProjectionPlan {
    lors: Vec<ListModeEvent>,
    lines: Vec<LorLine>,
    multiplicity: Vec<f64>,
    groups: GroupOffsets,
    skipped_events: usize,
    grid: Image3D,
    m_d: f64,
}

impl ProjectionPlan {
    /// Deduplicates `events` by detector pair (ordered by pair), classifies
    /// and groups them.
    pub fn from_events(
        events: &[ListModeEvent],
        geometry: &ScannerGeometry,
        grid: &Image3D,
        m_d: f64,
        backend: &Backend,
    ) -> Result<Self, PetError> {
        geometry.validate()?;
        for (index, e) in events.iter().enumerate() {
            e.validate(geometry).map_err(|msg| PetError::InvalidEvent { index, msg })?;
        }
        let mut keys: Vec<u64> = events.iter().map(|e| e.key()).collect();
        keys.sort_unstable();
        let mut distinct: Vec<(ListModeEvent, f64)> = Vec::new();
        for k in keys {
            let e = ListModeEvent::new((k >> 32) as u32, k as u32);
            match distinct.last_mut() {
                Some((last, m)) if *last == e => *m += 1.0,
                _ => distinct.push((e, 1.0)),
            }
        }
        let labels = backend.map(distinct.len(), |i| classify_lor(distinct[i].0, geometry, grid));
        let tagged: Vec<(ListModeEvent, f64, LorLabel)> =
            distinct.into_iter().zip(&labels).map(|((e, m), &l)| (e, m, l)).collect();
        let (sorted, groups) = sort_grouped(tagged, &labels, backend)?;
        let skipped_events = sorted[groups.skip.clone()].iter().map(|&(_, m, _)| m as usize).sum();
        let kept = &sorted[groups.projected()];
        let lines = kept
            .iter()
            .map(|&(e, _, label)| {
                LorLine::new(geometry.position(e.det_a), geometry.position(e.det_b), label)
                    .expect("skip group excluded")
            })
            .collect();
        Ok(Self {
            lors: kept.iter().map(|&(e, _, _)| e).collect(),
            lines,
            multiplicity: kept.iter().map(|&(_, m, _)| m).collect(),
            groups,
            skipped_events,
            grid: grid.clone(),
            m_d,
        })
    }

    /// Every detector pair `a < b` in lexicographic order, unit weight, not
    /// regrouped.
    pub fn all_pairs(geometry: &ScannerGeometry, grid: &Image3D, m_d: f64) -> Result<Self, PetError> {
        geometry.validate()?;
        let n = geometry.detector_count();
        let positions: Vec<[f64; 3]> = (0..n).map(|id| geometry.position(id)).collect();
        let mut lors = Vec::new();
        let mut lines = Vec::new();
        let mut skipped = 0;
        for a in 0..n {
            for b in a + 1..n {
                let (pa, pb) = (positions[a as usize], positions[b as usize]);
                match LorLine::new(pa, pb, classify_points(pa, pb, grid)) {
                    Some(line) => {
                        lors.push(ListModeEvent::new(a, b));
                        lines.push(line);
                    }
                    None => skipped += 1,
                }
            }
        }
        let len = lors.len();
        Ok(Self {
            lors,
            lines,
            multiplicity: vec![1.0; len],
            groups: GroupOffsets { skip: 0..0, x_dominant: 0..len, y_dominant: len..len },
            skipped_events: skipped,
            grid: grid.clone(),
            m_d,
        })
    }

    /// Number of distinct projected LORs.
    pub fn len(&self) -> usize {
        self.lors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lors.is_empty()
    }

    pub fn lors(&self) -> &[ListModeEvent] {
        &self.lors
    }

    /// Events per projected LOR.
    pub fn multiplicities(&self) -> &[f64] {
        &self.multiplicity
    }

    /// Group offsets before the Skip group was dropped.
    pub fn groups(&self) -> &GroupOffsets {
        &self.groups
    }

    pub fn skipped_events(&self) -> usize {
        self.skipped_events
    }

    pub fn grid(&self) -> &Image3D {
        &self.grid
    }

    pub fn matrix_distance(&self) -> f64 {
        self.m_d
    }

    /// All elements `(voxel, a)` of projected LOR `i`, plane by plane.
    pub fn elements(&self, i: usize) -> Vec<(u32, f64)> {
        let mut out = Vec::new();
        self.lines[i].for_each_element(&self.grid, self.m_d, |j, a| out.push((j as u32, a)));
        out
    }

    fn check_grid(&self, image: &Image3D) -> Result<(), PetError> {
        if self.grid.same_grid(image) {
            Ok(())
        } else {
            Err(PetError::Image(crate::image::ImageError::GridMismatch))
        }
    }

    /// `ȳ_i = Σ_j a_ij f_j + noise` for every projected LOR.
    pub fn forward(&self, image: &Image3D, noise: f64, backend: &Backend) -> Result<Vec<f64>, PetError> {
        self.check_grid(image)?;
        let f = &image.data;
        Ok(backend.map(self.len(), |i| {
            let mut acc = 0.0;
            self.lines[i].for_each_element(&self.grid, self.m_d, |j, a| acc += a * f[j]);
            acc + noise
        }))
    }

    /// `Σ_i w_i a_ij` over projected LORs, skipping LORs whose weight is
    /// `None`. Contributions are applied in LOR order, plane order.
    pub fn backward_weighted<W>(&self, weight: W, backend: &Backend) -> Result<Vec<f64>, PetError>
    where
        W: Fn(usize) -> Option<f64> + Sync + Send,
    {
        let mut target = vec![0.0; self.grid.len()];
        let mut indices = Vec::new();
        let mut deltas = Vec::new();
        for start in (0..self.len()).step_by(BACKPROJECT_CHUNK) {
            let end = (start + BACKPROJECT_CHUNK).min(self.len());
            let parts = backend.map(end - start, |k| {
                let i = start + k;
                let mut out: Vec<(u32, f64)> = Vec::new();
                if let Some(w) = weight(i) {
                    self.lines[i].for_each_element(&self.grid, self.m_d, |j, a| out.push((j as u32, a * w)));
                }
                out
            });
            indices.clear();
            deltas.clear();
            for part in parts {
                for (j, d) in part {
                    indices.push(j);
                    deltas.push(d);
                }
            }
            backend.scatter_add(&mut target, &indices, &deltas)?;
        }
        Ok(target)
    }

    /// Correction image `Σ_l a_{c(l),j} / ȳ_{c(l)}`. LORs with `ȳ == 0`
    /// contribute nothing.
    pub fn backward(&self, ybar: &[f64], backend: &Backend) -> Result<Vec<f64>, PetError> {
        if ybar.len() != self.len() {
            return Err(PetError::Config(format!("{} projections for {} LORs", ybar.len(), self.len())));
        }
        let m = &self.multiplicity;
        self.backward_weighted(|i| (ybar[i] != 0.0).then(|| m[i] / ybar[i]), backend)
    }
}

/// Forward projection of `events` through `image`, one value per distinct
/// projected LOR of the resulting plan.
pub fn forward_project(
    plan: &ProjectionPlan,
    image: &Image3D,
    noise: f64,
    backend: &Backend,
) -> Result<Vec<f64>, PetError> {
    plan.forward(image, noise, backend)
}

/// Back projection of `1/ȳ` along every event; returns the correction image.
pub fn backward_project(plan: &ProjectionPlan, ybar: &[f64], backend: &Backend) -> Result<Image3D, PetError> {
    let data = plan.backward(ybar, backend)?;
    Ok(plan.grid.with_data(data)?)
}
