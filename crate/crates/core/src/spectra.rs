//! Chromophore absorption spectra.
//!
//! Tables are whitespace-separated text files, one chromophore per file,
//! with a `# wavelength_nm mua_per_mm` header. Values between grid points
//! are linearly interpolated; queries outside the grid are errors.

use std::path::Path;

use crate::error::{CoreError, Result};

/// One chromophore's sampled absorption curve (nm -> 1/mm).
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorptionTable {
    pub wavelengths_nm: Vec<f64>,
    pub mua_per_mm: Vec<f64>,
}

impl AbsorptionTable {
    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut wavelengths_nm = Vec::new();
        let mut mua_per_mm = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<f64> {
                tok.ok_or_else(|| CoreError::Format {
                    what: format!("spectra file {name}"),
                    detail: format!("line {}: expected two columns", lineno + 1),
                })?
                .parse::<f64>()
                .map_err(|_| CoreError::Format {
                    what: format!("spectra file {name}"),
                    detail: format!("line {}: not a number", lineno + 1),
                })
            };
            wavelengths_nm.push(parse(parts.next())?);
            mua_per_mm.push(parse(parts.next())?);
        }
        let table = AbsorptionTable { wavelengths_nm, mua_per_mm };
        table.validate(name)?;
        Ok(table)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.wavelengths_nm.len() < 2 {
            return Err(CoreError::Format {
                what: format!("spectra file {name}"),
                detail: "needs at least two grid points".into(),
            });
        }
        if !self.wavelengths_nm.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::Format {
                what: format!("spectra file {name}"),
                detail: "wavelength grid must be strictly increasing".into(),
            });
        }
        if self.mua_per_mm.iter().any(|&v| !(v > 0.0)) {
            return Err(CoreError::Format {
                what: format!("spectra file {name}"),
                detail: "all absorption values must be > 0".into(),
            });
        }
        if self.wavelengths_nm[0] > 700.0 || *self.wavelengths_nm.last().unwrap() < 850.0 {
            return Err(CoreError::Format {
                what: format!("spectra file {name}"),
                detail: "grid must cover 700-850 nm".into(),
            });
        }
        Ok(())
    }

    /// Linear interpolation at `wavelength_nm`.
    pub fn mua(&self, wavelength_nm: f64) -> Result<f64> {
        let grid = &self.wavelengths_nm;
        let lo = grid[0];
        let hi = *grid.last().unwrap();
        if wavelength_nm < lo || wavelength_nm > hi {
            return Err(CoreError::WavelengthOutOfGrid(wavelength_nm, lo, hi));
        }
        let j = match grid.binary_search_by(|w| w.partial_cmp(&wavelength_nm).unwrap()) {
            Ok(exact) => return Ok(self.mua_per_mm[exact]),
            Err(j) => j,
        };
        let (w0, w1) = (grid[j - 1], grid[j]);
        let (v0, v1) = (self.mua_per_mm[j - 1], self.mua_per_mm[j]);
        let t = (wavelength_nm - w0) / (w1 - w0);
        Ok(v0 + t * (v1 - v0))
    }
}

/// The four chromophores used for tissue absorption mixing.
#[derive(Debug, Clone)]
pub struct ChromophoreSpectra {
    pub hbo2: AbsorptionTable,
    pub hb: AbsorptionTable,
    pub water: AbsorptionTable,
    pub fat: AbsorptionTable,
}

impl ChromophoreSpectra {
    /// Tables compiled into the binary (mirrors `data/spectra/`).
    pub fn builtin() -> Self {
        ChromophoreSpectra {
            hbo2: AbsorptionTable::parse(include_str!("../data/spectra/hbo2.txt"), "hbo2")
                .expect("builtin hbo2 table"),
            hb: AbsorptionTable::parse(include_str!("../data/spectra/hb.txt"), "hb")
                .expect("builtin hb table"),
            water: AbsorptionTable::parse(include_str!("../data/spectra/water.txt"), "water")
                .expect("builtin water table"),
            fat: AbsorptionTable::parse(include_str!("../data/spectra/fat.txt"), "fat")
                .expect("builtin fat table"),
        }
    }

    /// Load `hbo2.txt`, `hb.txt`, `water.txt`, `fat.txt` from a directory.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let read = |stem: &str| -> Result<AbsorptionTable> {
            let path = dir.join(format!("{stem}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
            AbsorptionTable::parse(&text, stem)
        };
        Ok(ChromophoreSpectra {
            hbo2: read("hbo2")?,
            hb: read("hb")?,
            water: read("water")?,
            fat: read("fat")?,
        })
    }

    /// Wavelength in [lo, hi] where oxy- and deoxyhemoglobin absorption
    /// cross (the isosbestic point), found by bisection on the difference.
    pub fn hemoglobin_isosbestic_nm(&self, lo: f64, hi: f64) -> Option<f64> {
        let diff = |w: f64| self.hbo2.mua(w).unwrap() - self.hb.mua(w).unwrap();
        let (mut a, mut b) = (lo, hi);
        let (fa, fb) = (diff(a), diff(b));
        if fa == 0.0 {
            return Some(a);
        }
        if fa * fb > 0.0 {
            return None;
        }
        for _ in 0..80 {
            let m = 0.5 * (a + b);
            let fm = diff(m);
            if fm == 0.0 {
                return Some(m);
            }
            if fa * fm < 0.0 {
                b = m;
            } else {
                a = m;
            }
        }
        Some(0.5 * (a + b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_tables_parse_and_cover_range() {
        let s = ChromophoreSpectra::builtin();
        for table in [&s.hbo2, &s.hb, &s.water, &s.fat] {
            assert!(table.mua(700.0).unwrap() > 0.0);
            assert!(table.mua(850.0).unwrap() > 0.0);
        }
    }

    #[test]
    fn interpolation_is_linear_between_points() {
        let t = AbsorptionTable::parse("700 1.0\n710 3.0\n860 3.0", "t").unwrap();
        assert!((t.mua(705.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((t.mua(700.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((t.mua(710.0).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_grid_is_an_error() {
        let s = ChromophoreSpectra::builtin();
        assert!(matches!(
            s.hbo2.mua(500.0),
            Err(CoreError::WavelengthOutOfGrid(..))
        ));
        assert!(s.hbo2.mua(2000.0).is_err());
    }

    #[test]
    fn nonpositive_values_rejected() {
        assert!(AbsorptionTable::parse("700 1.0\n860 0.0", "t").is_err());
        assert!(AbsorptionTable::parse("700 1.0\n860 -1.0", "t").is_err());
    }

    #[test]
    fn decreasing_grid_rejected() {
        assert!(AbsorptionTable::parse("710 1.0\n700 1.0\n860 1.0", "t").is_err());
    }

    #[test]
    fn isosbestic_point_near_800() {
        let s = ChromophoreSpectra::builtin();
        let iso = s.hemoglobin_isosbestic_nm(780.0, 820.0).unwrap();
        assert!((iso - 800.0).abs() <= 10.0, "isosbestic at {iso}");
        let a = s.hbo2.mua(iso).unwrap();
        let b = s.hb.mua(iso).unwrap();
        assert!((a - b).abs() / a < 1e-6);
    }

    #[test]
    fn dir_round_trip_matches_builtin() {
        let dir = tempfile::tempdir().unwrap();
        for stem in ["hbo2", "hb", "water", "fat"] {
            let src = format!(
                "{}/data/spectra/{stem}.txt",
                env!("CARGO_MANIFEST_DIR")
            );
            std::fs::copy(src, dir.path().join(format!("{stem}.txt"))).unwrap();
        }
        let loaded = ChromophoreSpectra::from_dir(dir.path()).unwrap();
        let builtin = ChromophoreSpectra::builtin();
        assert_eq!(loaded.hbo2, builtin.hbo2);
        assert_eq!(loaded.fat, builtin.fat);
    }
}
