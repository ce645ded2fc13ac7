//! Label maps: 2D anatomical parameter images and their 3D extrusions.
//!
//! A 2D map is an (x, z) grid, x across the probe face and z pointing into
//! the tissue (z = 0 is the top row, inside the probe's heavy-water bath).
//! Maps persist as 8-bit single-channel PNG (pixel value = class id) with a
//! JSON sidecar for spacing and provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tissue::TissueClass;

/// Default isotropic voxel pitch in mm.
pub const DEFAULT_SPACING_MM: f64 = 0.16;

/// 2D tissue-class image, row-major with index `z * nx + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub nx: usize,
    pub nz: usize,
    pub spacing_mm: f64,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(nx: usize, nz: usize, spacing_mm: f64, class: TissueClass) -> Self {
        LabelMap {
            nx,
            nz,
            spacing_mm,
            data: vec![class.id(); nx * nz],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, z: usize) -> usize {
        debug_assert!(x < self.nx && z < self.nz);
        z * self.nx + x
    }

    #[inline]
    pub fn get(&self, x: usize, z: usize) -> u8 {
        self.data[self.idx(x, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, z: usize, class: TissueClass) {
        let i = self.idx(x, z);
        self.data[i] = class.id();
    }

    /// Horizontally mirrored copy (x axis flipped).
    pub fn hflip(&self) -> LabelMap {
        let mut out = self.clone();
        for z in 0..self.nz {
            for x in 0..self.nx {
                out.data[z * self.nx + x] = self.data[z * self.nx + (self.nx - 1 - x)];
            }
        }
        out
    }

    /// Per-class voxel counts, indexed by class id (index 0 unused).
    pub fn class_histogram(&self) -> [usize; 8] {
        let mut hist = [0usize; 8];
        for &v in &self.data {
            if (v as usize) < 8 {
                hist[v as usize] += 1;
            }
        }
        hist
    }

    /// Classes present in the map, ascending by id. Unknown ids are skipped.
    pub fn classes_present(&self) -> Vec<TissueClass> {
        let hist = self.class_histogram();
        (1..8)
            .filter(|&id| hist[id] > 0)
            .filter_map(|id| TissueClass::from_id(id as u8).ok())
            .collect()
    }
}

/// 3D tissue-class volume, index `(z * ny + y) * nx + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing_mm: f64,
    pub data: Vec<u8>,
}

impl LabelVolume {
    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.nx && y < self.ny && z < self.nz);
        (z * self.ny + y) * self.nx + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.idx(x, y, z)]
    }

    pub fn voxel_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Extract the x-z slice at a given y.
    pub fn slice_y(&self, y: usize) -> LabelMap {
        let mut data = Vec::with_capacity(self.nx * self.nz);
        for z in 0..self.nz {
            let row = (z * self.ny + y) * self.nx;
            data.extend_from_slice(&self.data[row..row + self.nx]);
        }
        LabelMap {
            nx: self.nx,
            nz: self.nz,
            spacing_mm: self.spacing_mm,
            data,
        }
    }

    pub fn class_histogram(&self) -> [usize; 8] {
        let mut hist = [0usize; 8];
        for &v in &self.data {
            if (v as usize) < 8 {
                hist[v as usize] += 1;
            }
        }
        hist
    }
}

/// One finding of [`validate_labelmap`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelMapViolation {
    /// Voxels carry an id outside 1..=7.
    UnknownId { id: u8, count: usize },
    /// No voxel of any tissue class (artery, skin, muscle, vein).
    EmptyTissueRegion,
}

/// Validation report; an empty violation list means the map is valid.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LabelMapReport {
    pub violations: Vec<LabelMapViolation>,
}

impl LabelMapReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check a map for unknown class ids and for the absence of tissue.
pub fn validate_labelmap(map: &LabelMap) -> LabelMapReport {
    let mut report = LabelMapReport::default();
    let mut unknown = std::collections::BTreeMap::new();
    let mut tissue_voxels = 0usize;
    for &v in &map.data {
        match TissueClass::from_id(v) {
            Ok(class) if class.is_tissue() => tissue_voxels += 1,
            Ok(_) => {}
            Err(_) => *unknown.entry(v).or_insert(0usize) += 1,
        }
    }
    for (id, count) in unknown {
        report.violations.push(LabelMapViolation::UnknownId { id, count });
    }
    if tissue_voxels == 0 {
        report.violations.push(LabelMapViolation::EmptyTissueRegion);
    }
    report
}

/// How a mask came to be; stored in the sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskGenerator {
    Literature,
    Gan,
    Annotation,
}

/// JSON sidecar of a persisted mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskMeta {
    pub spacing_mm: f64,
    pub body_site: String,
    pub seed: u64,
    pub generator: MaskGenerator,
}

/// Write `mask_%05d.png` + `mask_%05d.json` into `dir`.
pub fn save_mask(dir: &Path, index: usize, map: &LabelMap, meta: &MaskMeta) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let png_path = dir.join(format!("mask_{index:05}.png"));
    let img = image::GrayImage::from_fn(map.nx as u32, map.nz as u32, |x, z| {
        image::Luma([map.get(x as usize, z as usize)])
    });
    img.save(&png_path)
        .map_err(|e| CoreError::Image { path: png_path.clone(), source: e })?;
    let json_path = dir.join(format!("mask_{index:05}.json"));
    let body = serde_json::to_string_pretty(meta)?;
    std::fs::write(&json_path, body).map_err(|e| CoreError::io(&json_path, e))?;
    Ok(png_path)
}

/// Read one `mask_%05d.png` + sidecar pair.
pub fn load_mask(dir: &Path, index: usize) -> Result<(LabelMap, MaskMeta)> {
    let png_path = dir.join(format!("mask_{index:05}.png"));
    let json_path = dir.join(format!("mask_{index:05}.json"));
    load_mask_files(&png_path, &json_path)
}

pub fn load_mask_files(png_path: &Path, json_path: &Path) -> Result<(LabelMap, MaskMeta)> {
    let img = image::open(png_path)
        .map_err(|e| CoreError::Image { path: png_path.to_path_buf(), source: e })?
        .into_luma8();
    let meta: MaskMeta = serde_json::from_str(
        &std::fs::read_to_string(json_path).map_err(|e| CoreError::io(json_path, e))?,
    )?;
    let (nx, nz) = (img.width() as usize, img.height() as usize);
    let map = LabelMap {
        nx,
        nz,
        spacing_mm: meta.spacing_mm,
        data: img.into_raw(),
    };
    Ok((map, meta))
}

/// Load every `mask_%05d.png` pair in a directory, in index order.
pub fn load_mask_dataset(dir: &Path) -> Result<Vec<(LabelMap, MaskMeta)>> {
    let mut indices = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))? {
        let entry = entry.map_err(|e| CoreError::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_prefix("mask_").and_then(|s| s.strip_suffix(".png")) {
            if let Ok(idx) = stem.parse::<usize>() {
                indices.push(idx);
            }
        }
    }
    indices.sort_unstable();
    indices.iter().map(|&i| load_mask(dir, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tissue::TissueClass::*;

    #[test]
    fn validate_flags_unknown_id() {
        let mut map = LabelMap::filled(4, 4, 0.16, MuscleBackground);
        map.data[5] = 9;
        let report = validate_labelmap(&map);
        assert_eq!(
            report.violations,
            vec![LabelMapViolation::UnknownId { id: 9, count: 1 }]
        );
    }

    #[test]
    fn validate_flags_empty_tissue() {
        let map = LabelMap::filled(4, 4, 0.16, HeavyWater);
        let report = validate_labelmap(&map);
        assert_eq!(report.violations, vec![LabelMapViolation::EmptyTissueRegion]);
    }

    #[test]
    fn validate_accepts_tissue_map() {
        let map = LabelMap::filled(4, 4, 0.16, MuscleBackground);
        assert!(validate_labelmap(&map).is_valid());
    }

    #[test]
    fn hflip_is_involution() {
        let mut map = LabelMap::filled(5, 3, 0.16, MuscleBackground);
        map.set(1, 2, Artery);
        map.set(0, 0, Skin);
        assert_eq!(map.hflip().hflip(), map);
    }

    #[test]
    fn hflip_mirrors_column() {
        let mut map = LabelMap::filled(7, 2, 0.16, MuscleBackground);
        map.set(2, 1, Vein);
        let flipped = map.hflip();
        assert_eq!(flipped.get(7 - 1 - 2, 1), Vein.id());
    }

    #[test]
    fn slice_round_trip() {
        let mut map = LabelMap::filled(4, 3, 0.16, MuscleBackground);
        map.set(2, 1, Artery);
        let vol = crate::pipeline::extrude_mask(&map, 5);
        for y in 0..5 {
            assert_eq!(vol.slice_y(y), map);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut map = LabelMap::filled(8, 6, 0.32, MuscleBackground);
        map.set(3, 2, Artery);
        map.set(7, 5, Vein);
        let meta = MaskMeta {
            spacing_mm: 0.32,
            body_site: "forearm".into(),
            seed: 17,
            generator: MaskGenerator::Literature,
        };
        save_mask(dir.path(), 3, &map, &meta).unwrap();
        let (loaded, loaded_meta) = load_mask(dir.path(), 3).unwrap();
        assert_eq!(loaded, map);
        assert_eq!(loaded_meta.seed, 17);
        assert_eq!(loaded_meta.generator, MaskGenerator::Literature);
    }

    #[test]
    fn dataset_loads_in_index_order() {
        let dir = tempfile::tempdir().unwrap();
        let meta = MaskMeta {
            spacing_mm: 0.16,
            body_site: "forearm".into(),
            seed: 0,
            generator: MaskGenerator::Gan,
        };
        for i in [2usize, 0, 1] {
            let map = LabelMap::filled(4 + i, 4, 0.16, MuscleBackground);
            save_mask(dir.path(), i, &map, &meta).unwrap();
        }
        let masks = load_mask_dataset(dir.path()).unwrap();
        assert_eq!(masks.len(), 3);
        assert_eq!(masks[0].0.nx, 4);
        assert_eq!(masks[1].0.nx, 5);
        assert_eq!(masks[2].0.nx, 6);
    }
}
