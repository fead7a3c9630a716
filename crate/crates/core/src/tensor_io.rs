//! Flat little-endian tensor files with a JSON sidecar.
//!
//! A tensor named `foo.ten` is stored as a raw row-major payload in `foo.ten`
//! and its metadata in `foo.ten.json`:
//!
//! ```json
//! {"shape":[2,2],"dtype":"real64","order":"row-major","byte_order":"little-endian","name":"","units":""}
//! ```
//!
//! Complex values are interleaved `(re, im)` pairs of little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAYLOAD_EXT: &str = "ten";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Real32,
    Real64,
    Complex64,
    Int32,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::Real32 | Dtype::Int32 => 4,
            Dtype::Real64 | Dtype::Complex64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real32(Vec<f32>),
    Real64(Vec<f64>),
    Complex64(Vec<Complex32>),
    Int32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::Real32(_) => Dtype::Real32,
            TensorData::Real64(_) => Dtype::Real64,
            TensorData::Complex64(_) => Dtype::Complex64,
            TensorData::Int32(_) => Dtype::Int32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::Real32(v) => v.len(),
            TensorData::Real64(v) => v.len(),
            TensorData::Complex64(v) => v.len(),
            TensorData::Int32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_finite(&self) -> bool {
        match self {
            TensorData::Real32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::Real64(v) => v.iter().all(|x| x.is_finite()),
            TensorData::Complex64(v) => v.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
            TensorData::Int32(_) => true,
        }
    }
}

/// An n-dimensional row-major array with a semantic name and units.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
    pub name: String,
    pub units: String,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            name: String::new(),
            units: String::new(),
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_units(mut self, units: impl Into<String>) -> Self {
        self.units = units.into();
        self
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn into_f64(self) -> Result<(Vec<usize>, Vec<f64>)> {
        match self.data {
            TensorData::Real64(v) => Ok((self.shape, v)),
            TensorData::Real32(v) => Ok((self.shape, v.into_iter().map(f64::from).collect())),
            other => Err(Error::UnsupportedDtype(format!(
                "{:?} where a real tensor was expected",
                other.dtype()
            ))),
        }
    }

    pub fn into_f32(self) -> Result<(Vec<usize>, Vec<f32>)> {
        match self.data {
            TensorData::Real32(v) => Ok((self.shape, v)),
            other => Err(Error::UnsupportedDtype(format!(
                "{:?} where real32 was expected",
                other.dtype()
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    shape: Vec<usize>,
    dtype: Dtype,
    order: String,
    byte_order: String,
    #[serde(default)]
    name: String,
    #[serde(default)]
    units: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let expected: usize = t.shape.iter().product();
    if expected != t.data.len() {
        return Err(Error::Shape(format!(
            "shape {:?} does not match {} elements",
            t.shape,
            t.data.len()
        )));
    }
    if !t.data.is_finite() {
        return Err(Error::NonFinite);
    }
    let mut payload = Vec::with_capacity(expected * t.dtype().width());
    match &t.data {
        TensorData::Real32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
        TensorData::Real64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
        TensorData::Complex64(v) => v.iter().for_each(|z| {
            payload.extend_from_slice(&z.re.to_le_bytes());
            payload.extend_from_slice(&z.im.to_le_bytes());
        }),
        TensorData::Int32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
    }
    let sidecar = Sidecar {
        shape: t.shape.clone(),
        dtype: t.dtype(),
        order: "row-major".into(),
        byte_order: "little-endian".into(),
        name: t.name.clone(),
        units: t.units.clone(),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, &payload).map_err(|e| Error::io(path, e))?;
    let meta = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    let meta_path = sidecar_path(path);
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let meta_path = sidecar_path(path);
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&meta).map_err(|e| Error::Metadata {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    if sidecar.order != "row-major" || sidecar.byte_order != "little-endian" {
        return Err(Error::Metadata {
            path: meta_path,
            reason: format!(
                "unsupported layout {}/{}",
                sidecar.order, sidecar.byte_order
            ),
        });
    }
    let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
    let count: usize = sidecar.shape.iter().product();
    let expected = count * sidecar.dtype.width();
    if payload.len() != expected {
        return Err(Error::ShapeMismatch {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let data = match sidecar.dtype {
        Dtype::Real32 => TensorData::Real32(
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        Dtype::Real64 => TensorData::Real64(
            payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        Dtype::Complex64 => TensorData::Complex64(
            payload
                .chunks_exact(8)
                .map(|b| {
                    Complex32::new(
                        f32::from_le_bytes(b[..4].try_into().unwrap()),
                        f32::from_le_bytes(b[4..].try_into().unwrap()),
                    )
                })
                .collect(),
        ),
        Dtype::Int32 => TensorData::Int32(
            payload
                .chunks_exact(4)
                .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(Tensor {
        shape: sidecar.shape,
        data,
        name: sidecar.name,
        units: sidecar.units,
    })
}


/// Writes a height map in meters. Non-finite pixels (no estimate) are
/// stored as 0 and flagged in a companion `<stem>_valid.ten` int32 mask,
/// written only when such pixels exist.
pub fn write_height_map(map: &crate::raster::Grid<f64>, name: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let valid: Vec<i32> = map.data.iter().map(|v| v.is_finite() as i32).collect();
    let data = map.data.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
    write_tensor(&Tensor::new(vec![map.rows, map.cols], TensorData::Real64(data))?.with_name(name).with_units("m"), path)?;
    if valid.contains(&0) {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("map");
        let mask = Tensor::new(vec![map.rows, map.cols], TensorData::Int32(valid))?.with_name(format!("{name}_valid"));
        write_tensor(&mask, path.with_file_name(format!("{stem}_valid.ten")))?;
    }
    Ok(())
}

/// Reads a map written by [`write_height_map`], restoring NaN where the
/// companion mask marks pixels invalid.
pub fn read_height_map(path: impl AsRef<Path>) -> Result<crate::raster::Grid<f64>> {
    let path = path.as_ref();
    let (shape, mut data) = read_tensor(path)?.into_f64()?;
    if shape.len() != 2 {
        return Err(Error::Shape(format!("height map must be 2-D, got {shape:?}")));
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("map");
    let mask_path = path.with_file_name(format!("{stem}_valid.ten"));
    if mask_path.exists() {
        let t = read_tensor(&mask_path)?;
        let TensorData::Int32(mask) = t.data else {
            return Err(Error::UnsupportedDtype(format!("{:?} validity mask", t.data.dtype())));
        };
        if t.shape != shape {
            return Err(Error::Shape(format!("mask {:?} does not match map {shape:?}", t.shape)));
        }
        data.iter_mut().zip(mask).filter(|(_, m)| *m == 0).for_each(|(v, _)| *v = f64::NAN);
    }
    crate::raster::Grid::from_vec(shape[0], shape[1], data)
}
