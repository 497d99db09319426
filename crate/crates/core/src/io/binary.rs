//! Little-endian LMPT list-mode and IMG3 image files.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::IoError;
use crate::image::Image3D;
use crate::pet::{ListModeEvent, ScannerGeometry};

const LMPT_MAGIC: &[u8; 4] = b"LMPT";
const IMG3_MAGIC: &[u8; 4] = b"IMG3";
const VERSION: u32 = 1;

/// Contents of an LMPT file. Geometry floats are kept at file precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ListModeFile {
    pub rings: u32,
    pub detectors_per_ring: u32,
    pub pitch_mm: f32,
    pub ring_radius_mm: f32,
    pub events: Vec<ListModeEvent>,
}

impl ListModeFile {
    pub fn new(geometry: &ScannerGeometry, events: Vec<ListModeEvent>) -> Self {
        Self {
            rings: geometry.rings,
            detectors_per_ring: geometry.detectors_per_ring,
            pitch_mm: geometry.pitch as f32,
            ring_radius_mm: geometry.ring_radius as f32,
            events,
        }
    }

    pub fn geometry(&self) -> ScannerGeometry {
        ScannerGeometry::new(self.rings, self.detectors_per_ring, self.pitch_mm as f64)
            .with_radius(self.ring_radius_mm as f64)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let available = self.bytes.len() - self.offset;
        if n > available {
            return Err(IoError::Truncated { format: self.format, offset: self.offset, needed: n, available });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], IoError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, IoError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<(), IoError> {
        let found = self.array::<4>()?;
        if &found != magic {
            return Err(IoError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&found).into_owned(),
            });
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(IoError::Version { format: self.format, found: version });
        }
        Ok(())
    }

    /// Checks that `count` records of `size` bytes follow.
    fn expect_records(&self, count: u64, size: usize) -> Result<usize, IoError> {
        let available = self.bytes.len() - self.offset;
        let needed = usize::try_from(count).ok().and_then(|c| c.checked_mul(size));
        match needed {
            Some(n) if n <= available => Ok(count as usize),
            _ => Err(IoError::Truncated {
                format: self.format,
                offset: self.offset,
                needed: needed.unwrap_or(usize::MAX),
                available,
            }),
        }
    }
}

pub fn write_lmpt<W: Write>(mut w: W, file: &ListModeFile) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(32 + 8 * file.events.len());
    buf.extend_from_slice(LMPT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&file.rings.to_le_bytes());
    buf.extend_from_slice(&file.detectors_per_ring.to_le_bytes());
    buf.extend_from_slice(&file.pitch_mm.to_le_bytes());
    buf.extend_from_slice(&file.ring_radius_mm.to_le_bytes());
    buf.extend_from_slice(&(file.events.len() as u64).to_le_bytes());
    for e in &file.events {
        buf.extend_from_slice(&e.det_a.to_le_bytes());
        buf.extend_from_slice(&e.det_b.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Parses an LMPT file and checks every event against its geometry.
pub fn read_lmpt(bytes: &[u8]) -> Result<ListModeFile, IoError> {
    let mut r = Reader { bytes, offset: 0, format: "LMPT" };
    r.header(LMPT_MAGIC)?;
    let rings = r.u32()?;
    let detectors_per_ring = r.u32()?;
    let pitch_mm = r.f32()?;
    let ring_radius_mm = r.f32()?;
    let count = r.u64()?;
    let count = r.expect_records(count, 8)?;
    let mut events = Vec::with_capacity(count);
    for _ in 0..count {
        events.push(ListModeEvent::new(r.u32()?, r.u32()?));
    }
    let file = ListModeFile { rings, detectors_per_ring, pitch_mm, ring_radius_mm, events };
    let geometry = file.geometry();
    geometry.validate().map_err(|e| IoError::Invalid(e.to_string()))?;
    for (i, e) in file.events.iter().enumerate() {
        e.validate(&geometry).map_err(|msg| IoError::Invalid(format!("event {i}: {msg}")))?;
    }
    Ok(file)
}

pub fn store_lmpt(path: &Path, file: &ListModeFile) -> Result<(), IoError> {
    let mut buf = Vec::new();
    write_lmpt(&mut buf, file).map_err(|e| IoError::io(path, e))?;
    fs::write(path, buf).map_err(|e| IoError::io(path, e))
}

pub fn load_lmpt(path: &Path) -> Result<ListModeFile, IoError> {
    read_lmpt(&read_all(path)?)
}

/// Writes `image` with voxel values, sizes and origin rounded to f32.
pub fn write_img3<W: Write>(mut w: W, image: &Image3D) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(44 + 4 * image.len());
    buf.extend_from_slice(IMG3_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for &n in &image.dims {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for &v in image.voxel_size.iter().chain(&image.origin) {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &v in &image.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_img3(bytes: &[u8]) -> Result<Image3D, IoError> {
    let mut r = Reader { bytes, offset: 0, format: "IMG3" };
    r.header(IMG3_MAGIC)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let voxel_size = [r.f32()? as f64, r.f32()? as f64, r.f32()? as f64];
    let origin = [r.f32()? as f64, r.f32()? as f64, r.f32()? as f64];
    let count = dims.iter().try_fold(1u64, |acc, &n| acc.checked_mul(n as u64)).unwrap_or(u64::MAX);
    let count = r.expect_records(count, 4)?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(r.f32()? as f64);
    }
    Image3D::new(dims, voxel_size, origin, data).map_err(|e| IoError::Invalid(e.to_string()))
}

pub fn store_img3(path: &Path, image: &Image3D) -> Result<(), IoError> {
    let mut buf = Vec::new();
    write_img3(&mut buf, image).map_err(|e| IoError::io(path, e))?;
    fs::write(path, buf).map_err(|e| IoError::io(path, e))
}

pub fn load_img3(path: &Path) -> Result<Image3D, IoError> {
    read_img3(&read_all(path)?)
}

fn read_all(path: &Path) -> Result<Vec<u8>, IoError> {
    let mut buf = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| IoError::io(path, e))?;
    Ok(buf)
}
