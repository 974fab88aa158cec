//! Typed 3D volumes, the `.qvol` on-disk format, and slice-image export.
//!
//! A volume on disk is a pair of files sharing a stem: `<stem>.qvol.json`
//! (UTF-8 header) and `<stem>.qvol.raw` (little-endian payload). Data is
//! stored x-fastest: index `i + nx*(j + ny*k)`. In memory all samples are
//! f64; the header `dtype` controls only the disk encoding.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{QsmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    Real32,
    Complex64,
}

impl Dtype {
    pub fn bytes_per_sample(self) -> usize {
        match self {
            Dtype::Real32 => 4,
            Dtype::Complex64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    SusceptibilityPpm,
    FieldPpm,
    PhaseRad,
    Magnitude,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub b0_dir: [f64; 3],
    pub dtype: Dtype,
    pub field_kind: FieldKind,
}

impl VolumeHeader {
    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(QsmError::invalid(format!(
                "volume dims must all be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.voxel_size_mm.iter().any(|&v| !(v > 0.0)) {
            return Err(QsmError::invalid(format!(
                "voxel sizes must be > 0, got {:?}",
                self.voxel_size_mm
            )));
        }
        let norm = self.b0_dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(QsmError::invalid(format!(
                "b0_dir must be a unit vector, got {:?} (norm {norm})",
                self.b0_dir
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::Real(v) => v.len(),
            VolumeData::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Immutable 3D scalar field with geometry metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    header: VolumeHeader,
    data: VolumeData,
}

impl Volume {
    pub fn new(header: VolumeHeader, data: VolumeData) -> Result<Self> {
        header.validate()?;
        if data.len() != header.voxel_count() {
            return Err(QsmError::invalid(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                header.dims,
                header.voxel_count()
            )));
        }
        match (&header.dtype, &data) {
            (Dtype::Real32, VolumeData::Real(_)) => {}
            (Dtype::Complex64, VolumeData::Complex(_)) => {}
            _ => {
                return Err(QsmError::invalid(
                    "header dtype does not match the data variant",
                ))
            }
        }
        if header.field_kind == FieldKind::Mask {
            if let VolumeData::Real(v) = &data {
                if v.iter().any(|&x| x != 0.0 && x != 1.0) {
                    return Err(QsmError::invalid(
                        "mask volumes may only contain values 0 and 1",
                    ));
                }
            } else {
                return Err(QsmError::invalid("mask volumes must be real-valued"));
            }
        }
        Ok(Volume { header, data })
    }

    /// Real-valued volume with a z-aligned default B0.
    pub fn real(
        field_kind: FieldKind,
        dims: [usize; 3],
        voxel_size_mm: [f64; 3],
        data: Vec<f64>,
    ) -> Result<Self> {
        Volume::new(
            VolumeHeader {
                dims,
                voxel_size_mm,
                b0_dir: [0.0, 0.0, 1.0],
                dtype: Dtype::Real32,
                field_kind,
            },
            VolumeData::Real(data),
        )
    }

    /// Same geometry as `other`, new kind and data.
    pub fn like(other: &Volume, field_kind: FieldKind, data: Vec<f64>) -> Result<Self> {
        let mut header = other.header.clone();
        header.field_kind = field_kind;
        header.dtype = Dtype::Real32;
        Volume::new(header, VolumeData::Real(data))
    }

    pub fn header(&self) -> &VolumeHeader {
        &self.header
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn as_real(&self) -> Result<&[f64]> {
        match &self.data {
            VolumeData::Real(v) => Ok(v),
            VolumeData::Complex(_) => Err(QsmError::invalid(
                "expected a real-valued volume, found complex64",
            )),
        }
    }

    pub fn as_complex(&self) -> Result<&[Complex64]> {
        match &self.data {
            VolumeData::Complex(v) => Ok(v),
            VolumeData::Real(_) => Err(QsmError::invalid(
                "expected a complex-valued volume, found real32",
            )),
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.header.voxel_count()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let [nx, ny, _] = self.header.dims;
        i + nx * (j + ny * k)
    }
}

/// Resolves `foo`, `foo.qvol`, `foo.qvol.json`, or `foo.qvol.raw` to the
/// header/payload path pair.
pub fn qvol_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".qvol.json")
        .or_else(|| s.strip_suffix(".qvol.raw"))
        .or_else(|| s.strip_suffix(".qvol"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}.qvol.json")),
        PathBuf::from(format!("{stem}.qvol.raw")),
    )
}

pub fn read_qvol(path: impl AsRef<Path>) -> Result<Volume> {
    let (json_path, raw_path) = qvol_paths(path.as_ref());
    let header_text =
        fs::read_to_string(&json_path).map_err(|e| QsmError::io(&json_path, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&header_text).map_err(|e| QsmError::json(&json_path, e))?;
    header.validate()?;

    let raw = fs::read(&raw_path).map_err(|e| QsmError::io(&raw_path, e))?;
    let expected = header.voxel_count() * header.dtype.bytes_per_sample();
    if raw.len() != expected {
        return Err(QsmError::invalid(format!(
            "payload {} is {} bytes, expected {} for dims {:?} dtype {:?}",
            raw_path.display(),
            raw.len(),
            expected,
            header.dims,
            header.dtype
        )));
    }

    let data = match header.dtype {
        Dtype::Real32 => VolumeData::Real(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
        ),
        Dtype::Complex64 => VolumeData::Complex(
            raw.chunks_exact(8)
                .map(|c| {
                    Complex64::new(
                        f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64,
                        f32::from_le_bytes([c[4], c[5], c[6], c[7]]) as f64,
                    )
                })
                .collect(),
        ),
    };
    Volume::new(header, data)
}

pub fn write_qvol(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (json_path, raw_path) = qvol_paths(path.as_ref());
    if let Some(parent) = json_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| QsmError::io(parent, e))?;
        }
    }
    let header_text = serde_json::to_string_pretty(&v.header)
        .map_err(|e| QsmError::json(&json_path, e))?;
    fs::write(&json_path, header_text).map_err(|e| QsmError::io(&json_path, e))?;

    let mut raw = Vec::with_capacity(v.voxel_count() * v.header.dtype.bytes_per_sample());
    match &v.data {
        VolumeData::Real(vals) => {
            for &x in vals {
                raw.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        VolumeData::Complex(vals) => {
            for z in vals {
                raw.extend_from_slice(&(z.re as f32).to_le_bytes());
                raw.extend_from_slice(&(z.im as f32).to_le_bytes());
            }
        }
    }
    fs::write(&raw_path, raw).map_err(|e| QsmError::io(&raw_path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl FromStr for Axis {
    type Err = QsmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(QsmError::invalid(format!("unknown axis '{other}'"))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::X => write!(f, "x"),
            Axis::Y => write!(f, "y"),
            Axis::Z => write!(f, "z"),
        }
    }
}

/// Maps one slice to an 8-bit grayscale PNG; values in `[lo, hi]` map
/// linearly to `[0, 255]` (round half up), everything else clamps.
pub fn export_slice(
    v: &Volume,
    axis: Axis,
    index: usize,
    window: (f64, f64),
    out: impl AsRef<Path>,
) -> Result<()> {
    let pixels = slice_to_gray(v, axis, index, window)?;
    let (w, h) = slice_shape(v.dims(), axis);
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("pixel buffer matches slice shape");
    img.save(out.as_ref())
        .map_err(|e| QsmError::invalid(format!("png write failed: {e}")))?;
    Ok(())
}

pub fn slice_shape(dims: [usize; 3], axis: Axis) -> (usize, usize) {
    let [nx, ny, nz] = dims;
    match axis {
        Axis::X => (ny, nz),
        Axis::Y => (nx, nz),
        Axis::Z => (nx, ny),
    }
}

/// Windowed 8-bit slice extraction; separated from PNG encoding so tests
/// can assert on exact pixel values.
pub fn slice_to_gray(
    v: &Volume,
    axis: Axis,
    index: usize,
    window: (f64, f64),
) -> Result<Vec<u8>> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(QsmError::invalid(format!(
            "display window must have lo < hi, got ({lo}, {hi})"
        )));
    }
    let [nx, ny, nz] = v.dims();
    let limit = match axis {
        Axis::X => nx,
        Axis::Y => ny,
        Axis::Z => nz,
    };
    if index >= limit {
        return Err(QsmError::invalid(format!(
            "slice index {index} out of range for axis {axis} with extent {limit}"
        )));
    }
    let data = v.as_real()?;
    let (w, h) = slice_shape(v.dims(), axis);
    let mut pixels = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let idx = match axis {
                Axis::X => v.index(index, col, row),
                Axis::Y => v.index(col, index, row),
                Axis::Z => v.index(col, row, index),
            };
            let t = (data[idx] - lo) / (hi - lo) * 255.0;
            // round half up, then clamp
            let p = (t + 0.5).floor().clamp(0.0, 255.0);
            pixels.push(p as u8);
        }
    }
    Ok(pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_header(dtype: Dtype, kind: FieldKind) -> VolumeHeader {
        VolumeHeader {
            dims: [2, 2, 2],
            voxel_size_mm: [1.0, 1.0, 1.0],
            b0_dir: [0.0, 0.0, 1.0],
            dtype,
            field_kind: kind,
        }
    }

    #[test]
    fn roundtrip_real32_is_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vol.qvol");
        let data: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let v = Volume::new(
            small_header(Dtype::Real32, FieldKind::SusceptibilityPpm),
            VolumeData::Real(data),
        )
        .unwrap();
        write_qvol(&v, &path).unwrap();
        let back = read_qvol(&path).unwrap();
        assert_eq!(back, v);

        // writing the read-back volume reproduces the payload byte for byte
        let raw1 = fs::read(dir.path().join("vol.qvol.raw")).unwrap();
        let path2 = dir.path().join("vol2.qvol");
        write_qvol(&back, &path2).unwrap();
        let raw2 = fs::read(dir.path().join("vol2.qvol.raw")).unwrap();
        assert_eq!(raw1, raw2);
    }

    #[test]
    fn roundtrip_complex64() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.qvol.json");
        let data: Vec<Complex64> = (0..8)
            .map(|i| Complex64::new(i as f64, -(i as f64) * 0.5))
            .collect();
        let v = Volume::new(
            small_header(Dtype::Complex64, FieldKind::Magnitude),
            VolumeData::Complex(data),
        )
        .unwrap();
        write_qvol(&v, &path).unwrap();
        assert_eq!(read_qvol(&path).unwrap(), v);
    }

    #[test]
    fn payload_size_mismatch_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.qvol");
        let v = Volume::new(
            small_header(Dtype::Real32, FieldKind::FieldPpm),
            VolumeData::Real(vec![0.0; 8]),
        )
        .unwrap();
        write_qvol(&v, &path).unwrap();
        // truncate to 7 floats
        let raw_path = dir.path().join("bad.qvol.raw");
        let mut raw = fs::read(&raw_path).unwrap();
        raw.truncate(28);
        fs::write(&raw_path, raw).unwrap();
        let err = read_qvol(&path).unwrap_err();
        assert!(err.to_string().contains("28 bytes"), "{err}");
    }

    #[test]
    fn non_unit_b0_is_rejected() {
        let mut h = small_header(Dtype::Real32, FieldKind::FieldPpm);
        h.b0_dir = [0.0, 0.0, 2.0];
        let err = Volume::new(h, VolumeData::Real(vec![0.0; 8])).unwrap_err();
        assert!(err.to_string().contains("unit vector"), "{err}");
    }

    #[test]
    fn non_unit_b0_in_header_file_is_rejected_on_read() {
        let dir = tempdir().unwrap();
        let json = dir.path().join("v.qvol.json");
        fs::write(
            &json,
            r#"{"dims":[2,2,2],"voxel_size_mm":[1.0,1.0,1.0],"b0_dir":[0.0,0.0,2.0],"dtype":"real32","field_kind":"field_ppm"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("v.qvol.raw"), vec![0u8; 32]).unwrap();
        assert!(read_qvol(dir.path().join("v.qvol")).is_err());
    }

    #[test]
    fn mask_values_are_restricted_to_zero_one() {
        let err = Volume::new(
            small_header(Dtype::Real32, FieldKind::Mask),
            VolumeData::Real(vec![0.0, 1.0, 0.5, 0.0, 1.0, 1.0, 0.0, 0.0]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("mask"), "{err}");
    }

    #[test]
    fn real32_payload_is_exactly_four_bytes_per_voxel() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("big.qvol");
        let n = 32usize.pow(3);
        let v = Volume::real(
            FieldKind::SusceptibilityPpm,
            [32, 32, 32],
            [1.0, 1.0, 1.0],
            vec![0.25; n],
        )
        .unwrap();
        write_qvol(&v, &path).unwrap();
        let raw = fs::read(dir.path().join("big.qvol.raw")).unwrap();
        assert_eq!(raw.len(), 131072);
    }

    #[test]
    fn payload_bytes_are_little_endian_golden() {
        // f32 little-endian encodings of 0.0..=7.0, written out by hand.
        const GOLDEN: [u8; 32] = [
            0x00, 0x00, 0x00, 0x00, // 0.0
            0x00, 0x00, 0x80, 0x3F, // 1.0
            0x00, 0x00, 0x00, 0x40, // 2.0
            0x00, 0x00, 0x40, 0x40, // 3.0
            0x00, 0x00, 0x80, 0x40, // 4.0
            0x00, 0x00, 0xA0, 0x40, // 5.0
            0x00, 0x00, 0xC0, 0x40, // 6.0
            0x00, 0x00, 0xE0, 0x40, // 7.0
        ];
        let dir = tempdir().unwrap();
        let path = dir.path().join("golden.qvol");
        let v = Volume::real(
            FieldKind::FieldPpm,
            [2, 2, 2],
            [1.0, 1.0, 1.0],
            (0..8).map(|i| i as f64).collect(),
        )
        .unwrap();
        write_qvol(&v, &path).unwrap();
        let raw = fs::read(dir.path().join("golden.qvol.raw")).unwrap();
        assert_eq!(raw, GOLDEN);
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let dir = tempdir().unwrap();
        fs::write(
            dir.path().join("v.qvol.json"),
            r#"{"dims":[1,1,1],"voxel_size_mm":[1.0,1.0,1.0],"b0_dir":[0.0,0.0,1.0],"dtype":"real64","field_kind":"mask"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("v.qvol.raw"), vec![0u8; 8]).unwrap();
        assert!(read_qvol(dir.path().join("v.qvol")).is_err());
    }

    #[test]
    fn slice_window_endpoints_and_midpoint() {
        let mk = |val: f64| {
            Volume::real(FieldKind::FieldPpm, [3, 3, 3], [1.0; 3], vec![val; 27]).unwrap()
        };
        let lo = -0.1;
        let hi = 0.2;
        let at = |v: &Volume| slice_to_gray(v, Axis::Z, 1, (lo, hi)).unwrap();
        assert!(at(&mk(lo)).iter().all(|&p| p == 0));
        assert!(at(&mk(hi)).iter().all(|&p| p == 255));
        // the midpoint lands on x.5 and rounds up
        assert!(at(&mk((lo + hi) / 2.0)).iter().all(|&p| p == 128));
        // clamping outside the window
        assert!(at(&mk(hi + 1.0)).iter().all(|&p| p == 255));
        assert!(at(&mk(lo - 1.0)).iter().all(|&p| p == 0));
    }

    #[test]
    fn slice_index_out_of_range() {
        let v = Volume::real(FieldKind::FieldPpm, [3, 3, 3], [1.0; 3], vec![0.0; 27]).unwrap();
        assert!(slice_to_gray(&v, Axis::Y, 3, (0.0, 1.0)).is_err());
        assert!(slice_to_gray(&v, Axis::Y, 2, (0.0, 1.0)).is_ok());
    }

    #[test]
    fn slice_axis_orientation() {
        // distinct value at (i,j,k) = (1,2,0)
        let mut data = vec![0.0; 27];
        data[1 + 3 * (2 + 3 * 0)] = 1.0;
        let v = Volume::real(FieldKind::FieldPpm, [3, 3, 3], [1.0; 3], data).unwrap();
        let px = slice_to_gray(&v, Axis::Z, 0, (0.0, 1.0)).unwrap();
        // z-slice is nx wide, ny tall; pixel (col=1, row=2)
        assert_eq!(px[1 + 3 * 2], 255);
        assert_eq!(px.iter().filter(|&&p| p == 255).count(), 1);
    }
}
