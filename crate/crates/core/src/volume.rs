//! 3-D angiograms and their on-disk form.
//!
//! A volume file is a raw little-endian `f32` payload in `D → H → W` order,
//! paired with a JSON sidecar at the same path plus `.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[D, H, W]` volume; `D` runs anterior to posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxel_size_mm: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxel_size_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("volume dims must be positive, got {dims:?}")));
        }
        if voxel_size_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("voxel sizes must be positive, got {voxel_size_mm:?}")));
        }
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "volume {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Volume { dims, voxel_size_mm, data })
    }

    pub fn zeros(dims: [usize; 3], voxel_size_mm: [f64; 3]) -> Result<Self> {
        Self::new(dims, voxel_size_mm, vec![0.0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size_mm(&self) -> [f64; 3] {
        self.voxel_size_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(d, h, w)]
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.voxel_size_mm.iter().product()
    }

    /// Physical extent of the whole grid in mm³.
    pub fn extent_mm3(&self) -> f64 {
        self.voxel_volume_mm3() * self.len() as f64
    }

    pub fn plane(&self, d: usize) -> &[f32] {
        let n = self.dims[1] * self.dims[2];
        &self.data[d * n..(d + 1) * n]
    }

    pub fn plane_mut(&mut self, d: usize) -> &mut [f32] {
        let n = self.dims[1] * self.dims[2];
        &mut self.data[d * n..(d + 1) * n]
    }

    /// En-face plane `d` as an `[H, W, 1]` tensor.
    pub fn plane_tensor(&self, d: usize) -> Tensor {
        Tensor::from_vec(&[self.dims[1], self.dims[2], 1], self.plane(d).to_vec())
            .expect("plane length matches dims")
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            dims: self.dims,
            voxel_size_mm: self.voxel_size_mm,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_dims(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Dimension(format!(
                "volume dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            dims: self.dims,
            voxel_size_mm: self.voxel_size_mm,
            dtype: "f32le".into(),
            axis_order: "DHW".into(),
            value_range: [0.0, 255.0],
        }
    }

    /// Little-endian payload bytes.
    pub fn payload_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Writes the payload to `path` and the header to [`sidecar_path`]`(path)`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.payload_bytes())?;
        let mut json = serde_json::to_string_pretty(&self.header())?;
        json.push('\n');
        fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header: VolumeHeader = serde_json::from_slice(&fs::read(sidecar_path(path))?)
            .map_err(|e| Error::Format(format!("volume header {}: {e}", sidecar_path(path).display())))?;
        header.validate()?;
        let bytes = fs::read(path)?;
        let n: usize = header.dims.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::Format(format!(
                "payload {} has {} bytes, header {:?} requires {}",
                path.display(),
                bytes.len(),
                header.dims,
                4 * n
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Volume::new(header.dims, header.voxel_size_mm, data)
    }
}

/// JSON sidecar describing a volume payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub dtype: String,
    pub axis_order: String,
    pub value_range: [f64; 2],
}

impl VolumeHeader {
    pub fn validate(&self) -> Result<()> {
        if self.dtype != "f32le" {
            return Err(Error::Format(format!("unsupported dtype `{}`", self.dtype)));
        }
        if self.axis_order != "DHW" {
            return Err(Error::Format(format!("unsupported axis order `{}`", self.axis_order)));
        }
        Ok(())
    }
}

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Binary mask with the same geometry as a volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Dimension(format!("mask {dims:?} has {} values", data.len())));
        }
        Ok(Mask { dims, data })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Mask {
            dims,
            data: vec![false; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> bool {
        self.data[self.index(d, h, w)]
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, v: bool) {
        let i = self.index(d, h, w);
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// 0/255 volume for writing masks in the shared file format.
    pub fn to_volume(&self, voxel_size_mm: [f64; 3]) -> Result<Volume> {
        Volume::new(
            self.dims,
            voxel_size_mm,
            self.data.iter().map(|&b| if b { 255.0 } else { 0.0 }).collect(),
        )
    }

    /// Non-zero voxels of `vol`.
    pub fn from_volume(vol: &Volume) -> Mask {
        Mask {
            dims: vol.dims(),
            data: vol.data().iter().map(|&v| v != 0.0).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.f32");
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| (i as f32).sqrt() * 1.3e-3 - 7.0).collect();
        let v = Volume::new([2, 3, 4], [0.01, 0.0117, 0.0117], data).unwrap();
        v.save(&path).unwrap();
        let w = Volume::load(&path).unwrap();
        assert_eq!(
            v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            w.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(v, w);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 4 * 24);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.f32");
        Volume::zeros([2, 2, 2], [1.0; 3]).unwrap().save(&path).unwrap();
        std::fs::write(&path, [0u8; 28]).unwrap();
        assert!(matches!(Volume::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io() {
        let err = Volume::load(Path::new("/nonexistent/v.f32")).unwrap_err();
        assert!(err.is_io());
    }

    #[test]
    fn header_layout() {
        let v = Volume::zeros([1, 2, 3], [1.0, 2.0, 3.0]).unwrap();
        let json: serde_json::Value = serde_json::to_value(v.header()).unwrap();
        assert_eq!(json["dims"], serde_json::json!([1, 2, 3]));
        assert_eq!(json["dtype"], "f32le");
        assert_eq!(json["axis_order"], "DHW");
        assert_eq!(json["value_range"], serde_json::json!([0.0, 255.0]));
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Volume::new([0, 1, 1], [1.0; 3], vec![]).is_err());
        assert!(Volume::new([1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]).is_err());
        assert!(Volume::new([1, 1, 2], [1.0; 3], vec![0.0]).is_err());
    }
}
