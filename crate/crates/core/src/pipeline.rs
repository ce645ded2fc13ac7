//! Mask -> volume -> multispectral image pipeline.
//!
//! A 2D mask is extruded along y, padded with heavy water so the gel
//! surface sits at the probe standoff distance, simulated per wavelength,
//! and reduced back to 2D by taking the center x-z slice cropped to the
//! original mask rows.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::labelmap::{LabelMap, LabelVolume};
use crate::mc::{initial_pressure, simulate_fluence_with, SourceSpec, TransportConfig};
use crate::optics::{assign_optics, sample_tissue_instance, TissueOpticalSpec};
use crate::rng::Rng64;
use crate::spectra::ChromophoreSpectra;
use crate::tissue::TissueClass;

/// Distance from the volume's top face to the highest gel voxel, in mm.
pub const STANDOFF_MM: f64 = 43.2;

/// Clamp floor applied before the log transform.
pub const LOG_EPSILON: f64 = 1e-10;

/// Acquisition wavelength list in nm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavelengthGrid {
    pub nm: Vec<f64>,
}

impl Default for WavelengthGrid {
    /// 700, 710, ..., 850 nm (16 channels).
    fn default() -> Self {
        WavelengthGrid {
            nm: (0..16).map(|i| 700.0 + 10.0 * i as f64).collect(),
        }
    }
}

impl WavelengthGrid {
    pub fn new(nm: Vec<f64>) -> Result<Self> {
        if nm.is_empty() {
            return Err(CoreError::InvalidParams("empty wavelength grid".into()));
        }
        if !nm.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::InvalidParams(
                "wavelength grid must be strictly increasing".into(),
            ));
        }
        Ok(WavelengthGrid { nm })
    }

    pub fn len(&self) -> usize {
        self.nm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nm.is_empty()
    }
}

/// Multichannel 2D image, channel-major: index `(c * nz + z) * nx + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultispectralImage {
    pub nx: usize,
    pub nz: usize,
    pub spacing_mm: f64,
    pub wavelengths_nm: Vec<f64>,
    pub data: Vec<f32>,
    pub mask_id: u64,
    pub instance_seed: u64,
    pub sim_seed: u64,
}

impl MultispectralImage {
    pub fn zeros(nx: usize, nz: usize, spacing_mm: f64, wavelengths_nm: Vec<f64>) -> Self {
        let channels = wavelengths_nm.len();
        MultispectralImage {
            nx,
            nz,
            spacing_mm,
            wavelengths_nm,
            data: vec![0.0; nx * nz * channels],
            mask_id: 0,
            instance_seed: 0,
            sim_seed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.wavelengths_nm.len()
    }

    #[inline]
    pub fn idx(&self, c: usize, z: usize, x: usize) -> usize {
        (c * self.nz + z) * self.nx + x
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.nx * self.nz;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Stack a 2D mask along y; every y slice equals the input.
pub fn extrude_mask(mask: &LabelMap, y_extent: usize) -> LabelVolume {
    assert!(y_extent >= 1, "y_extent must be >= 1");
    let mut data = Vec::with_capacity(mask.nx * y_extent * mask.nz);
    for z in 0..mask.nz {
        let row = &mask.data[z * mask.nx..(z + 1) * mask.nx];
        for _ in 0..y_extent {
            data.extend_from_slice(row);
        }
    }
    LabelVolume {
        nx: mask.nx,
        ny: y_extent,
        nz: mask.nz,
        spacing_mm: mask.spacing_mm,
        data,
    }
}

/// Index of the topmost gel voxel, if any.
pub fn gel_top_z(volume: &LabelVolume) -> Option<usize> {
    let gel = TissueClass::UsGel.id();
    let plane = volume.nx * volume.ny;
    (0..volume.nz).find(|&z| volume.data[z * plane..(z + 1) * plane].contains(&gel))
}

/// Rows of heavy water needed above a gel top at `z_gel` so it sits at the
/// standoff depth.
pub fn standoff_rows(spacing_mm: f64) -> usize {
    (STANDOFF_MM / spacing_mm).round() as usize
}

/// Pad (or trim pure heavy-water rows) so the topmost gel voxel sits
/// `STANDOFF_MM` below the top face. Maps already satisfying the offset are
/// returned unchanged.
pub fn place_in_volume(volume: &LabelVolume) -> Result<LabelVolume> {
    let z_gel = gel_top_z(volume).ok_or(CoreError::NoGelClass)?;
    let target = standoff_rows(volume.spacing_mm);
    let plane = volume.nx * volume.ny;
    if z_gel == target {
        return Ok(volume.clone());
    }
    if z_gel < target {
        let pad = target - z_gel;
        let hw = TissueClass::HeavyWater.id();
        let mut data = vec![hw; plane * pad];
        data.extend_from_slice(&volume.data);
        return Ok(LabelVolume {
            nx: volume.nx,
            ny: volume.ny,
            nz: volume.nz + pad,
            spacing_mm: volume.spacing_mm,
            data,
        });
    }
    // Gel sits too deep; trimming is only possible through pure heavy water.
    let trim = z_gel - target;
    let hw = TissueClass::HeavyWater.id();
    if volume.data[..plane * trim].iter().any(|&v| v != hw) {
        return Err(CoreError::InvalidParams(format!(
            "cannot raise gel top from row {z_gel} to {target}: non-heavy-water content above"
        )));
    }
    Ok(LabelVolume {
        nx: volume.nx,
        ny: volume.ny,
        nz: volume.nz - trim,
        spacing_mm: volume.spacing_mm,
        data: volume.data[plane * trim..].to_vec(),
    })
}

/// Everything the simulator needs besides the mask and the seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub y_extent: usize,
    pub photons_per_wavelength: u64,
    pub workers: usize,
    pub aperture_mm: (f64, f64),
    pub divergence_deg: f64,
    pub transport: TransportConfig,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            y_extent: 32,
            photons_per_wavelength: 100_000,
            workers: 1,
            aperture_mm: (30.0, 2.0),
            divergence_deg: 5.0,
            transport: TransportConfig::default(),
        }
    }
}

/// Seeds of one simulated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSeeds {
    pub mask_id: u64,
    pub instance_seed: u64,
    pub sim_seed: u64,
}

/// Per-wavelength photon seed, derived so a single-wavelength run matches
/// the corresponding channel of a full-grid run.
pub fn lambda_seed(sim_seed: u64, wavelength_nm: f64) -> u64 {
    Rng64::stream_named(sim_seed, &format!("lambda-{wavelength_nm}")).next_u64()
}

/// Simulate raw p0 and ground-truth mua stacks for one mask.
///
/// Per wavelength: assign optics from one shared tissue instance, run the
/// photon transport, form p0, then take the center x-z slice cropped back
/// to the original mask rows. Outputs are linear (not log) valued.
pub fn simulate_multispectral(
    mask: &LabelMap,
    spec: &TissueOpticalSpec,
    spectra: &ChromophoreSpectra,
    grid: &WavelengthGrid,
    params: &SimParams,
    seeds: SampleSeeds,
) -> Result<(MultispectralImage, MultispectralImage)> {
    let vol3 = extrude_mask(mask, params.y_extent);
    let z_gel = gel_top_z(&vol3).ok_or(CoreError::NoGelClass)?;
    let placed = place_in_volume(&vol3)?;
    let pad = standoff_rows(mask.spacing_mm) - z_gel;
    let instance = sample_tissue_instance(spec, seeds.instance_seed);

    let mut p0_img = MultispectralImage::zeros(mask.nx, mask.nz, mask.spacing_mm, grid.nm.clone());
    let mut mua_img = p0_img.clone();
    for img in [&mut p0_img, &mut mua_img] {
        img.mask_id = seeds.mask_id;
        img.instance_seed = seeds.instance_seed;
        img.sim_seed = seeds.sim_seed;
    }

    let y_mid = placed.ny / 2;
    for (c, &wl) in grid.nm.iter().enumerate() {
        let optics = assign_optics(&placed, &instance, spec, spectra, wl)?;
        let source = SourceSpec {
            center_mm: None,
            aperture_mm: params.aperture_mm,
            direction: (0.0, 0.0, 1.0),
            divergence_deg: params.divergence_deg,
            photon_count: params.photons_per_wavelength,
            base_seed: lambda_seed(seeds.sim_seed, wl),
        };
        let fluence = simulate_fluence_with(&optics, &source, params.workers, &params.transport)?;
        let p0 = initial_pressure(&fluence, &optics)?;
        for z in 0..mask.nz {
            let zv = z + pad;
            for x in 0..mask.nx {
                let vi = (zv * placed.ny + y_mid) * placed.nx + x;
                let oi = (c * mask.nz + z) * mask.nx + x;
                p0_img.data[oi] = p0.p0[vi];
                mua_img.data[oi] = optics.mua[vi];
            }
        }
    }
    Ok((p0_img, mua_img))
}

/// Log-scale (natural log, clamped at [`LOG_EPSILON`]) and optionally add
/// per-pixel Gaussian noise of standard deviation `sigma`.
pub fn preprocess(img: &MultispectralImage, sigma: f64, seed: u64) -> MultispectralImage {
    let mut rng = Rng64::stream_named(seed, "noise");
    let mut out = img.clone();
    for v in &mut out.data {
        let logged = (*v as f64).max(LOG_EPSILON).ln();
        let noisy = if sigma > 0.0 {
            logged + sigma * rng.normal()
        } else {
            logged
        };
        *v = noisy as f32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forearm::{generate_forearm_labelmap, ForearmModelParams};
    use crate::tissue::TissueClass::*;

    fn small_mask() -> LabelMap {
        let params = ForearmModelParams {
            image_shape: (24, 48),
            spacing_mm: 0.32,
            ..Default::default()
        };
        generate_forearm_labelmap(&params, 42).unwrap()
    }

    #[test]
    fn default_grid_is_16_channels() {
        let g = WavelengthGrid::default();
        assert_eq!(g.len(), 16);
        assert_eq!(g.nm[0], 700.0);
        assert_eq!(*g.nm.last().unwrap(), 850.0);
        assert!(g.nm.windows(2).all(|w| (w[1] - w[0] - 10.0).abs() < 1e-12));
    }

    #[test]
    fn extrusion_slices_and_histogram() {
        let mask = small_mask();
        let vol = extrude_mask(&mask, 7);
        assert_eq!((vol.nx, vol.ny, vol.nz), (24, 7, 48));
        assert_eq!(vol.slice_y(3), mask);
        let h2 = mask.class_histogram();
        let h3 = vol.class_histogram();
        for id in 1..8 {
            assert_eq!(h3[id], h2[id] * 7);
        }
    }

    #[test]
    fn placement_pads_to_standoff() {
        let mask = small_mask();
        let vol = extrude_mask(&mask, 4);
        let placed = place_in_volume(&vol).unwrap();
        let target = standoff_rows(0.32);
        assert_eq!(target, 135); // 43.2 / 0.32
        assert_eq!(gel_top_z(&placed), Some(target));
        // Padding rows are all heavy water.
        let z_gel = gel_top_z(&vol).unwrap();
        let pad = target - z_gel;
        let plane = vol.nx * vol.ny;
        assert!(placed.data[..plane * pad].iter().all(|&v| v == HeavyWater.id()));
        assert_eq!(&placed.data[plane * pad..], &vol.data[..]);
    }

    #[test]
    fn paper_scale_standoff_is_270_rows() {
        assert_eq!(standoff_rows(0.16), 270);
    }

    #[test]
    fn placement_is_idempotent() {
        let mask = small_mask();
        let vol = extrude_mask(&mask, 2);
        let placed = place_in_volume(&vol).unwrap();
        let again = place_in_volume(&placed).unwrap();
        assert_eq!(again, placed);
    }

    #[test]
    fn placement_requires_gel() {
        let map = LabelMap::filled(4, 4, 0.32, MuscleBackground);
        let vol = extrude_mask(&map, 2);
        assert!(matches!(place_in_volume(&vol), Err(CoreError::NoGelClass)));
    }

    fn quick_params() -> SimParams {
        SimParams {
            y_extent: 6,
            photons_per_wavelength: 2_000,
            workers: 2,
            ..Default::default()
        }
    }

    #[test]
    fn simulation_output_shape_and_channels() {
        let mask = small_mask();
        let spec = TissueOpticalSpec::builtin();
        let spectra = ChromophoreSpectra::builtin();
        let grid = WavelengthGrid::new(vec![700.0, 800.0]).unwrap();
        let seeds = SampleSeeds { mask_id: 1, instance_seed: 2, sim_seed: 3 };
        let (p0, mua) = simulate_multispectral(&mask, &spec, &spectra, &grid, &quick_params(), seeds).unwrap();
        assert_eq!((p0.nx, p0.nz, p0.channels()), (mask.nx, mask.nz, 2));
        assert_eq!((mua.nx, mua.nz, mua.channels()), (mask.nx, mask.nz, 2));
        assert!(p0.all_finite() && mua.all_finite());
        assert!(mua.data.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn single_wavelength_matches_multi_run_channel() {
        let mask = small_mask();
        let spec = TissueOpticalSpec::builtin();
        let spectra = ChromophoreSpectra::builtin();
        let seeds = SampleSeeds { mask_id: 0, instance_seed: 7, sim_seed: 9 };
        let full = WavelengthGrid::new(vec![700.0, 780.0, 850.0]).unwrap();
        let single = WavelengthGrid::new(vec![780.0]).unwrap();
        let (p_full, _) = simulate_multispectral(&mask, &spec, &spectra, &full, &quick_params(), seeds).unwrap();
        let (p_one, _) = simulate_multispectral(&mask, &spec, &spectra, &single, &quick_params(), seeds).unwrap();
        assert_eq!(p_one.channel(0), p_full.channel(1));
    }

    #[test]
    fn pipeline_is_deterministic() {
        let mask = small_mask();
        let spec = TissueOpticalSpec::builtin();
        let spectra = ChromophoreSpectra::builtin();
        let grid = WavelengthGrid::new(vec![750.0]).unwrap();
        let seeds = SampleSeeds { mask_id: 5, instance_seed: 1, sim_seed: 2 };
        let a = simulate_multispectral(&mask, &spec, &spectra, &grid, &quick_params(), seeds).unwrap();
        let b = simulate_multispectral(&mask, &spec, &spectra, &grid, &quick_params(), seeds).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn preprocess_sigma_zero_is_pure_log() {
        let mut img = MultispectralImage::zeros(8, 8, 0.32, vec![700.0]);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i + 1) as f32 * 0.01;
        }
        let out = preprocess(&img, 0.0, 1);
        for i in 0..img.data.len() {
            assert!((out.data[i] as f64 - (img.data[i] as f64).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn preprocess_clamps_zeros() {
        let img = MultispectralImage::zeros(4, 4, 0.32, vec![700.0]);
        let out = preprocess(&img, 0.0, 1);
        let expect = LOG_EPSILON.ln() as f32;
        assert!(out.data.iter().all(|&v| v == expect));
        assert!(out.all_finite());
    }

    #[test]
    fn preprocess_noise_moments() {
        let img = MultispectralImage::zeros(256, 256, 0.32, vec![700.0, 750.0, 800.0, 850.0]);
        let base = LOG_EPSILON.ln();
        let out = preprocess(&img, 0.5, 3);
        let n = out.data.len() as f64;
        let mean = out.data.iter().map(|&v| v as f64 - base).sum::<f64>() / n;
        let var = out
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - base - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.01, "noise mean {mean}");
        assert!((var.sqrt() - 0.5).abs() < 0.01, "noise std {}", var.sqrt());
    }

    #[test]
    fn preprocess_is_seeded() {
        let mut img = MultispectralImage::zeros(8, 8, 0.32, vec![700.0]);
        for v in &mut img.data {
            *v = 1.0;
        }
        let a = preprocess(&img, 0.5, 4);
        let b = preprocess(&img, 0.5, 4);
        let c = preprocess(&img, 0.5, 5);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
