//! Flat binary volume and multispectral image files.
//!
//! A `.vol` file is little-endian f32 data with a JSON sidecar
//! (`<name>.json`) describing shape and provenance. Multispectral 2D
//! stacks use the same container with extension `.vol16` and a channel
//! wavelength list in the header.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::pipeline::MultispectralImage;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolHeader {
    /// [X, Y, Z] voxel counts.
    pub shape: [usize; 3],
    pub spacing_mm: f64,
    pub wavelength_nm: f64,
    /// "optical_mua" | "fluence" | "p0" ...
    pub kind: String,
    pub seed: u64,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn write_f32_le(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

fn read_f32_le(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(CoreError::Format {
            what: format!("volume file {}", path.display()),
            detail: format!("expected {} bytes, found {}", expected_len * 4, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write `<path>` (raw f32) and `<path>.json` (header).
pub fn save_vol(path: &Path, header: &VolHeader, data: &[f32]) -> Result<()> {
    let n = header.shape[0] * header.shape[1] * header.shape[2];
    if data.len() != n {
        return Err(CoreError::ShapeMismatch(format!(
            "header says {n} voxels, data has {}",
            data.len()
        )));
    }
    write_f32_le(path, data)?;
    let json = serde_json::to_string_pretty(header)?;
    std::fs::write(sidecar(path), json).map_err(|e| CoreError::io(sidecar(path), e))
}

pub fn load_vol(path: &Path) -> Result<(VolHeader, Vec<f32>)> {
    let header: VolHeader = serde_json::from_str(
        &std::fs::read_to_string(sidecar(path)).map_err(|e| CoreError::io(sidecar(path), e))?,
    )?;
    let n = header.shape[0] * header.shape[1] * header.shape[2];
    let data = read_f32_le(path, n)?;
    Ok((header, data))
}

/// Header of a multispectral 2D stack (X, Z, channels).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vol16Header {
    /// [X, Z, channels].
    pub shape: [usize; 3],
    pub spacing_mm: f64,
    pub wavelengths_nm: Vec<f64>,
    /// "p0" | "p0_log_noisy" | "mua" | "mua_log" | "pred_mua_log"
    pub kind: String,
    pub mask_id: u64,
    pub instance_seed: u64,
    pub sim_seed: u64,
}

pub fn save_vol16(path: &Path, image: &MultispectralImage, kind: &str) -> Result<()> {
    let header = Vol16Header {
        shape: [image.nx, image.nz, image.wavelengths_nm.len()],
        spacing_mm: image.spacing_mm,
        wavelengths_nm: image.wavelengths_nm.clone(),
        kind: kind.to_string(),
        mask_id: image.mask_id,
        instance_seed: image.instance_seed,
        sim_seed: image.sim_seed,
    };
    write_f32_le(path, &image.data)?;
    let json = serde_json::to_string_pretty(&header)?;
    std::fs::write(sidecar(path), json).map_err(|e| CoreError::io(sidecar(path), e))
}

pub fn load_vol16(path: &Path) -> Result<(Vol16Header, MultispectralImage)> {
    let header: Vol16Header = serde_json::from_str(
        &std::fs::read_to_string(sidecar(path)).map_err(|e| CoreError::io(sidecar(path), e))?,
    )?;
    let [nx, nz, channels] = header.shape;
    if header.wavelengths_nm.len() != channels {
        return Err(CoreError::Format {
            what: format!("vol16 header {}", sidecar(path).display()),
            detail: "wavelength list length != channel count".into(),
        });
    }
    let data = read_f32_le(path, nx * nz * channels)?;
    let image = MultispectralImage {
        nx,
        nz,
        spacing_mm: header.spacing_mm,
        wavelengths_nm: header.wavelengths_nm.clone(),
        data,
        mask_id: header.mask_id,
        instance_seed: header.instance_seed,
        sim_seed: header.sim_seed,
    };
    Ok((header, image))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vol_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.vol");
        let header = VolHeader {
            shape: [3, 2, 4],
            spacing_mm: 0.32,
            wavelength_nm: 800.0,
            kind: "fluence".into(),
            seed: 5,
        };
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
        save_vol(&path, &header, &data).unwrap();
        let (h2, d2) = load_vol(&path).unwrap();
        assert_eq!(h2.shape, header.shape);
        assert_eq!(d2, data);
    }

    #[test]
    fn vol_length_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vol");
        let header = VolHeader {
            shape: [2, 2, 2],
            spacing_mm: 0.16,
            wavelength_nm: 700.0,
            kind: "p0".into(),
            seed: 0,
        };
        assert!(save_vol(&path, &header, &[0.0; 7]).is_err());
    }

    #[test]
    fn vol16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.vol16");
        let image = MultispectralImage {
            nx: 4,
            nz: 3,
            spacing_mm: 0.32,
            wavelengths_nm: vec![700.0, 750.0],
            data: (0..24).map(|i| (i as f32).sin()).collect(),
            mask_id: 9,
            instance_seed: 1,
            sim_seed: 2,
        };
        save_vol16(&path, &image, "p0").unwrap();
        let (header, loaded) = load_vol16(&path).unwrap();
        assert_eq!(header.kind, "p0");
        assert_eq!(loaded, image);
    }
}
