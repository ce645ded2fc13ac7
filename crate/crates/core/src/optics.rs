//! Per-class optical parameter assignment.
//!
//! Each tissue class has distributions for blood oxygenation and blood
//! volume fraction plus fixed water/fat fractions and a scattering power
//! law. Sampling one concrete draw per class yields a [`TissueInstance`];
//! applying an instance to a label volume at one wavelength yields the
//! per-voxel [`OpticalVolume`] the photon transport consumes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::forearm::UniformRange;
use crate::labelmap::LabelVolume;
use crate::rng::Rng64;
use crate::spectra::ChromophoreSpectra;
use crate::tissue::{TissueClass, ALL_CLASSES};

/// Optical description of one tissue class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassOptics {
    pub so2: UniformRange,
    pub vb: UniformRange,
    pub water_fraction: f64,
    pub fat_fraction: f64,
    /// `a` of mus'(lambda) = a * (lambda/500 nm)^(-b), in 1/mm.
    pub scattering_a_per_mm: f64,
    pub scattering_b: f64,
    pub anisotropy: f64,
    pub refractive_index: f64,
}

impl ClassOptics {
    fn validate(&self, class: TissueClass) -> Result<()> {
        let err = |msg: String| Err(CoreError::InvalidParams(format!("{}: {msg}", class.name())));
        let frac_ok = |r: &UniformRange| r.lo >= 0.0 && r.hi <= 1.0 && r.lo <= r.hi;
        if !frac_ok(&self.so2) {
            return err(format!("so2 range [{}, {}]", self.so2.lo, self.so2.hi));
        }
        if !frac_ok(&self.vb) {
            return err(format!("vb range [{}, {}]", self.vb.lo, self.vb.hi));
        }
        if !(0.0..=1.0).contains(&self.water_fraction) || !(0.0..=1.0).contains(&self.fat_fraction) {
            return err("water/fat fraction outside [0, 1]".into());
        }
        if self.vb.hi + self.water_fraction + self.fat_fraction > 1.0 + 1e-9 {
            return err("vb + water + fat exceeds 1".into());
        }
        if self.scattering_a_per_mm <= 0.0 {
            return err("scattering a must be > 0".into());
        }
        if !(-1.0..1.0).contains(&self.anisotropy) {
            return err("anisotropy outside [-1, 1)".into());
        }
        if self.refractive_index < 1.0 {
            return err("refractive index < 1".into());
        }
        Ok(())
    }

    /// Reduced scattering at a wavelength, in 1/mm.
    pub fn mus_prime(&self, wavelength_nm: f64) -> f64 {
        self.scattering_a_per_mm * (wavelength_nm / 500.0).powf(-self.scattering_b)
    }
}

/// Per-class optical specification, keyed by tissue class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueOpticalSpec {
    pub classes: BTreeMap<TissueClass, ClassOptics>,
}

impl TissueOpticalSpec {
    /// The spec shipped in `data/tissue_default.toml`.
    pub fn builtin() -> Self {
        let spec: TissueOpticalSpec =
            toml::from_str(include_str!("../data/tissue_default.toml"))
                .expect("builtin tissue spec");
        spec.validate().expect("builtin tissue spec valid");
        spec
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: TissueOpticalSpec = toml::from_str(text).map_err(|e| CoreError::Format {
            what: "tissue optical spec".into(),
            detail: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for (&class, optics) in &self.classes {
            optics.validate(class)?;
        }
        Ok(())
    }

    pub fn class(&self, class: TissueClass) -> Result<&ClassOptics> {
        self.classes
            .get(&class)
            .ok_or(CoreError::MissingClassSpec(class))
    }
}

/// One concrete draw of the stochastic per-class parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueInstance {
    pub seed: u64,
    pub so2: BTreeMap<TissueClass, f64>,
    pub vb: BTreeMap<TissueClass, f64>,
}

/// One draw per class per image, deterministic in the seed. Classes are
/// visited in id order so the draw sequence is stable.
pub fn sample_tissue_instance(spec: &TissueOpticalSpec, seed: u64) -> TissueInstance {
    let mut rng = Rng64::stream_named(seed, "tissue-instance");
    let mut so2 = BTreeMap::new();
    let mut vb = BTreeMap::new();
    for class in ALL_CLASSES {
        if let Some(optics) = spec.classes.get(&class) {
            so2.insert(class, optics.so2.sample(&mut rng));
            vb.insert(class, optics.vb.sample(&mut rng));
        }
    }
    TissueInstance { seed, so2, vb }
}

/// Absorption of a blood/water/fat mix at one wavelength, in 1/mm:
/// `vb * (so2 * mua_hbo2 + (1 - so2) * mua_hb) + w_water * mua_water
///  + w_fat * mua_fat`.
pub fn mixed_mua(
    so2: f64,
    vb: f64,
    water_fraction: f64,
    fat_fraction: f64,
    wavelength_nm: f64,
    spectra: &ChromophoreSpectra,
) -> Result<f64> {
    let hbo2 = spectra.hbo2.mua(wavelength_nm)?;
    let hb = spectra.hb.mua(wavelength_nm)?;
    let water = spectra.water.mua(wavelength_nm)?;
    let fat = spectra.fat.mua(wavelength_nm)?;
    Ok(vb * (so2 * hbo2 + (1.0 - so2) * hb) + water_fraction * water + fat_fraction * fat)
}

/// Absorption of one class under a sampled instance.
pub fn class_mua(
    instance: &TissueInstance,
    class: TissueClass,
    wavelength_nm: f64,
    spec: &TissueOpticalSpec,
    spectra: &ChromophoreSpectra,
) -> Result<f64> {
    let optics = spec.class(class)?;
    let so2 = *instance.so2.get(&class).ok_or(CoreError::MissingClassSpec(class))?;
    let vb = *instance.vb.get(&class).ok_or(CoreError::MissingClassSpec(class))?;
    mixed_mua(
        so2,
        vb,
        optics.water_fraction,
        optics.fat_fraction,
        wavelength_nm,
        spectra,
    )
}

/// Per-voxel optical parameters at one wavelength.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalVolume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing_mm: f64,
    pub wavelength_nm: f64,
    pub mua: Vec<f32>,
    pub mus: Vec<f32>,
    pub g: Vec<f32>,
    pub n: Vec<f32>,
}

impl OpticalVolume {
    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    pub fn voxel_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.voxel_count();
        if self.mua.len() != n || self.mus.len() != n || self.g.len() != n || self.n.len() != n {
            return Err(CoreError::InvalidVolume("buffer length mismatch".into()));
        }
        for i in 0..n {
            if !(self.mua[i] > 0.0) {
                return Err(CoreError::InvalidVolume(format!("mua[{i}] = {}", self.mua[i])));
            }
            if !(self.mus[i] >= 0.0) {
                return Err(CoreError::InvalidVolume(format!("mus[{i}] = {}", self.mus[i])));
            }
            if !(-1.0..1.0).contains(&self.g[i]) {
                return Err(CoreError::InvalidVolume(format!("g[{i}] = {}", self.g[i])));
            }
            if !(self.n[i] >= 1.0) {
                return Err(CoreError::InvalidVolume(format!("n[{i}] = {}", self.n[i])));
            }
        }
        Ok(())
    }
}

/// Map every voxel's class to (mua, mus, g, n) at one wavelength.
/// Values are class-constant within one instance; mus = mus'/(1 - g).
pub fn assign_optics(
    labels: &LabelVolume,
    instance: &TissueInstance,
    spec: &TissueOpticalSpec,
    spectra: &ChromophoreSpectra,
    wavelength_nm: f64,
) -> Result<OpticalVolume> {
    // Per-class lookup, indexed by id.
    let mut by_id: [Option<(f32, f32, f32, f32)>; 8] = [None; 8];
    let present: std::collections::BTreeSet<u8> = labels.data.iter().copied().collect();
    for id in present {
        let class = TissueClass::from_id(id)?;
        let optics = spec.class(class)?;
        let mua = class_mua(instance, class, wavelength_nm, spec, spectra)?;
        let mus = optics.mus_prime(wavelength_nm) / (1.0 - optics.anisotropy);
        by_id[id as usize] = Some((
            mua as f32,
            mus as f32,
            optics.anisotropy as f32,
            optics.refractive_index as f32,
        ));
    }

    let count = labels.voxel_count();
    let mut volume = OpticalVolume {
        nx: labels.nx,
        ny: labels.ny,
        nz: labels.nz,
        spacing_mm: labels.spacing_mm,
        wavelength_nm,
        mua: vec![0.0; count],
        mus: vec![0.0; count],
        g: vec![0.0; count],
        n: vec![0.0; count],
    };
    for (i, &id) in labels.data.iter().enumerate() {
        let (mua, mus, g, n) = by_id[id as usize].expect("id collected above");
        volume.mua[i] = mua;
        volume.mus[i] = mus;
        volume.g[i] = g;
        volume.n[i] = n;
    }
    volume.validate()?;
    Ok(volume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::extrude_mask;
    use crate::tissue::TissueClass::*;
    use crate::labelmap::LabelMap;

    fn spectra() -> ChromophoreSpectra {
        ChromophoreSpectra::builtin()
    }

    #[test]
    fn builtin_spec_parses_and_validates() {
        let spec = TissueOpticalSpec::builtin();
        assert_eq!(spec.classes.len(), 7);
        for class in ALL_CLASSES {
            assert!(spec.class(class).is_ok());
        }
    }

    #[test]
    fn instance_sampling_is_deterministic_and_in_support() {
        let spec = TissueOpticalSpec::builtin();
        let a = sample_tissue_instance(&spec, 11);
        let b = sample_tissue_instance(&spec, 11);
        assert_eq!(a, b);
        let artery = spec.class(Artery).unwrap();
        let so2 = a.so2[&Artery];
        assert!(so2 >= artery.so2.lo && so2 <= artery.so2.hi);
    }

    #[test]
    fn point_mass_distribution_is_exact() {
        let mut spec = TissueOpticalSpec::builtin();
        spec.classes.get_mut(&Vein).unwrap().so2 = UniformRange::point(0.7);
        let inst = sample_tissue_instance(&spec, 99);
        assert_eq!(inst.so2[&Vein], 0.7);
    }

    #[test]
    fn degenerate_mixes_reduce_to_single_tables() {
        let s = spectra();
        for wl in [700.0, 755.0, 800.0, 850.0] {
            let pure_hbo2 = mixed_mua(1.0, 1.0, 0.0, 0.0, wl, &s).unwrap();
            assert_eq!(pure_hbo2, s.hbo2.mua(wl).unwrap());
            let pure_water = mixed_mua(0.5, 0.0, 1.0, 0.0, wl, &s).unwrap();
            assert_eq!(pure_water, s.water.mua(wl).unwrap());
        }
    }

    #[test]
    fn isosbestic_so2_independence() {
        let s = spectra();
        let iso = s.hemoglobin_isosbestic_nm(780.0, 820.0).unwrap();
        let deoxy = mixed_mua(0.0, 1.0, 0.0, 0.0, iso, &s).unwrap();
        let oxy = mixed_mua(1.0, 1.0, 0.0, 0.0, iso, &s).unwrap();
        assert!((oxy - deoxy).abs() / oxy < 0.05, "oxy {oxy} deoxy {deoxy}");
    }

    #[test]
    fn mixed_mua_linear_in_vb() {
        let s = spectra();
        for wl in [710.0, 780.0, 845.0] {
            let baseline = mixed_mua(0.8, 0.0, 0.3, 0.1, wl, &s).unwrap();
            let one = mixed_mua(0.8, 0.02, 0.3, 0.1, wl, &s).unwrap();
            let two = mixed_mua(0.8, 0.04, 0.3, 0.1, wl, &s).unwrap();
            assert!(((two - baseline) - 2.0 * (one - baseline)).abs() < 1e-12);
        }
    }

    #[test]
    fn mus_prime_power_law() {
        let optics = ClassOptics {
            so2: UniformRange::point(0.0),
            vb: UniformRange::point(0.0),
            water_fraction: 1.0,
            fat_fraction: 0.0,
            scattering_a_per_mm: 1.0,
            scattering_b: 0.0,
            anisotropy: 0.9,
            refractive_index: 1.33,
        };
        // mus' = 1, g = 0.9 -> mus = 10
        let mus = optics.mus_prime(800.0) / (1.0 - optics.anisotropy);
        assert!((mus - 10.0).abs() < 1e-9);
    }

    #[test]
    fn homogeneous_map_yields_constant_volume() {
        let spec = TissueOpticalSpec::builtin();
        let s = spectra();
        let map = LabelMap::filled(6, 5, 0.32, MuscleBackground);
        let vol3 = extrude_mask(&map, 4);
        let inst = sample_tissue_instance(&spec, 5);
        let optics = assign_optics(&vol3, &inst, &spec, &s, 800.0).unwrap();
        let first = optics.mua[0];
        assert!(optics.mua.iter().all(|&v| v == first));
    }

    #[test]
    fn different_seeds_same_partitioning() {
        let spec = TissueOpticalSpec::builtin();
        let s = spectra();
        let params = crate::forearm::ForearmModelParams::default();
        let map = crate::forearm::generate_forearm_labelmap(&params, 2).unwrap();
        let vol3 = extrude_mask(&map, 3);
        let a = assign_optics(&vol3, &sample_tissue_instance(&spec, 1), &spec, &s, 760.0).unwrap();
        let b = assign_optics(&vol3, &sample_tissue_instance(&spec, 2), &spec, &s, 760.0).unwrap();
        // Equal labels must map to equal values within one instance, while
        // vessel absorption differs between the two instances.
        let mut per_class_value: [Option<f32>; 8] = [None; 8];
        let mut vessel_diff = false;
        for i in 0..vol3.voxel_count() {
            let id = vol3.data[i] as usize;
            match per_class_value[id] {
                Some(v) => assert_eq!(a.mua[i], v),
                None => per_class_value[id] = Some(a.mua[i]),
            }
            if id == TissueClass::Vein.id() as usize || id == TissueClass::Artery.id() as usize {
                vessel_diff |= a.mua[i] != b.mua[i];
            }
        }
        assert!(vessel_diff, "vessel absorption should differ across instances");
    }

    #[test]
    fn per_class_value_cardinality() {
        let spec = TissueOpticalSpec::builtin();
        let s = spectra();
        let params = crate::forearm::ForearmModelParams::default();
        let map = crate::forearm::generate_forearm_labelmap(&params, 9).unwrap();
        let vol3 = extrude_mask(&map, 2);
        let optics = assign_optics(&vol3, &sample_tissue_instance(&spec, 3), &spec, &s, 720.0).unwrap();
        let distinct: std::collections::BTreeSet<u32> =
            optics.mua.iter().map(|v| v.to_bits()).collect();
        assert!(distinct.len() <= 7, "found {} distinct mua values", distinct.len());
        optics.validate().unwrap();
    }

    #[test]
    fn missing_class_is_an_error() {
        let mut spec = TissueOpticalSpec::builtin();
        spec.classes.remove(&Vein);
        let s = spectra();
        let mut map = LabelMap::filled(4, 4, 0.32, MuscleBackground);
        map.set(1, 1, Vein);
        let vol3 = extrude_mask(&map, 2);
        let inst = sample_tissue_instance(&spec, 1);
        assert!(matches!(
            assign_optics(&vol3, &inst, &spec, &s, 800.0),
            Err(CoreError::MissingClassSpec(Vein))
        ));
    }

    #[test]
    fn unknown_key_in_spec_rejected() {
        let text = r#"
[classes.artery]
so2 = { lo = 0.9, hi = 1.0 }
vb = { lo = 1.0, hi = 1.0 }
water_fraction = 0.0
fat_fraction = 0.0
scattering_a_per_mm = 2.2
scattering_b = 1.2
anisotropy = 0.9
refractive_index = 1.38
bogus_key = 1
"#;
        assert!(TissueOpticalSpec::from_toml(text).is_err());
    }
}
