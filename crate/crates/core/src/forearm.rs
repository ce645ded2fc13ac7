//! Literature-style probabilistic forearm scene generator.
//!
//! Scenes are built top-down along +z: a heavy-water bath (inside the probe
//! head), the transducer membrane, an ultrasound-gel layer, a skin layer
//! with a gently undulating surface, and muscle background carrying
//! elliptical vessel cross sections. All thicknesses and vessel properties
//! are drawn from configurable distributions so the priors can be replaced
//! wholesale.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::labelmap::LabelMap;
use crate::rng::Rng64;
use crate::tissue::TissueClass;

/// Closed uniform range in mm (lo == hi is a point mass).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformRange {
    pub lo: f64,
    pub hi: f64,
}

impl UniformRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        UniformRange { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        UniformRange { lo: v, hi: v }
    }

    pub fn sample(&self, rng: &mut Rng64) -> f64 {
        rng.uniform(self.lo, self.hi)
    }

    fn check(&self, name: &str, positive: bool) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(CoreError::InvalidParams(format!(
                "{name}: bad range [{}, {}]",
                self.lo, self.hi
            )));
        }
        if positive && self.lo <= 0.0 {
            return Err(CoreError::InvalidParams(format!(
                "{name}: bounds must be positive, got lo = {}",
                self.lo
            )));
        }
        Ok(())
    }
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub lo: u32,
    pub hi: u32,
}

impl IntRange {
    pub fn new(lo: u32, hi: u32) -> Self {
        IntRange { lo, hi }
    }

    pub fn sample(&self, rng: &mut Rng64) -> u32 {
        rng.int_range(i64::from(self.lo), i64::from(self.hi)) as u32
    }
}

/// Distribution parameters of the forearm scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForearmModelParams {
    /// Image extent: (columns, depth rows).
    pub image_shape: (usize, usize),
    /// Voxel pitch in mm.
    pub spacing_mm: f64,
    /// Heavy-water band thickness at the top of the image (mm).
    pub water_thickness_dist: UniformRange,
    /// Transducer membrane thickness (mm); rendered at least one row thick.
    pub membrane_thickness_mm: f64,
    /// Ultrasound gel thickness between membrane and skin surface (mm).
    pub gel_thickness_dist: UniformRange,
    /// Skin layer thickness (mm).
    pub skin_thickness_dist: UniformRange,
    /// Amplitude of the sinusoidal skin-surface undulation (mm).
    pub skin_undulation_amp_dist: UniformRange,
    /// Number of undulation periods across the image width.
    pub skin_undulation_cycles_dist: UniformRange,
    /// Total vessel count; each vessel is an artery with
    /// `artery_fraction` probability, otherwise a vein.
    pub vessel_count_dist: IntRange,
    pub artery_fraction: f64,
    /// Vessel semi-axis along x (mm).
    pub vessel_radius_dist: UniformRange,
    /// Ratio of z to x semi-axis.
    pub vessel_aspect_dist: UniformRange,
    /// Vessel center depth below the deepest skin point (mm).
    pub vessel_depth_dist: UniformRange,
}

impl Default for ForearmModelParams {
    fn default() -> Self {
        ForearmModelParams {
            image_shape: (128, 64),
            spacing_mm: 0.32,
            water_thickness_dist: UniformRange::new(1.0, 4.0),
            membrane_thickness_mm: 0.3,
            gel_thickness_dist: UniformRange::new(1.0, 4.0),
            skin_thickness_dist: UniformRange::new(0.4, 1.2),
            skin_undulation_amp_dist: UniformRange::new(0.0, 0.5),
            skin_undulation_cycles_dist: UniformRange::new(0.5, 2.0),
            vessel_count_dist: IntRange::new(1, 6),
            artery_fraction: 1.0 / 3.0,
            vessel_radius_dist: UniformRange::new(0.5, 3.0),
            vessel_aspect_dist: UniformRange::new(0.7, 1.3),
            vessel_depth_dist: UniformRange::new(1.0, 12.0),
        }
    }
}

impl ForearmModelParams {
    /// Full-resolution variant (256 x 128 at 0.16 mm).
    pub fn paper_scale() -> Self {
        ForearmModelParams {
            image_shape: (256, 128),
            spacing_mm: 0.16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nz) = self.image_shape;
        if nx < 8 || nz < 8 {
            return Err(CoreError::InvalidParams(format!(
                "image shape ({nx}, {nz}) too small"
            )));
        }
        if self.spacing_mm <= 0.0 {
            return Err(CoreError::InvalidParams("spacing_mm must be > 0".into()));
        }
        self.water_thickness_dist.check("water_thickness", true)?;
        self.gel_thickness_dist.check("gel_thickness", true)?;
        self.skin_thickness_dist.check("skin_thickness", true)?;
        self.skin_undulation_amp_dist.check("skin_undulation_amp", false)?;
        self.skin_undulation_cycles_dist.check("skin_undulation_cycles", false)?;
        self.vessel_radius_dist.check("vessel_radius", true)?;
        self.vessel_aspect_dist.check("vessel_aspect", true)?;
        self.vessel_depth_dist.check("vessel_depth", true)?;
        if self.membrane_thickness_mm < 0.0 {
            return Err(CoreError::InvalidParams("membrane thickness < 0".into()));
        }
        if !(0.0..=1.0).contains(&self.artery_fraction) {
            return Err(CoreError::InvalidParams("artery_fraction outside [0, 1]".into()));
        }
        if self.skin_undulation_amp_dist.lo < 0.0 {
            return Err(CoreError::InvalidParams("undulation amplitude < 0".into()));
        }
        // Worst-case layer stack must leave at least 1 mm of muscle so every
        // draw fits the image.
        let worst = self.water_thickness_dist.hi
            + self.membrane_thickness_mm
            + self.gel_thickness_dist.hi
            + self.skin_undulation_amp_dist.hi
            + self.skin_thickness_dist.hi
            + 1.0;
        let depth_mm = nz as f64 * self.spacing_mm;
        if worst > depth_mm {
            return Err(CoreError::InvalidParams(format!(
                "layer stack up to {worst:.2} mm cannot fit image depth {depth_mm:.2} mm"
            )));
        }
        Ok(())
    }
}

fn rows(mm: f64, spacing: f64) -> usize {
    (mm / spacing).round() as usize
}

/// Generate one forearm label map. Pure function of `(params, seed)`.
pub fn generate_forearm_labelmap(params: &ForearmModelParams, seed: u64) -> Result<LabelMap> {
    params.validate()?;
    let (nx, nz) = params.image_shape;
    let sp = params.spacing_mm;
    let mut rng = Rng64::new(seed);

    let water_rows = rows(params.water_thickness_dist.sample(&mut rng), sp).max(1);
    let membrane_rows = rows(params.membrane_thickness_mm, sp).max(1);
    let gel_rows = rows(params.gel_thickness_dist.sample(&mut rng), sp).max(1);
    let skin_rows = rows(params.skin_thickness_dist.sample(&mut rng), sp).max(1);
    let amp_rows = params.skin_undulation_amp_dist.sample(&mut rng) / sp;
    let cycles = params.skin_undulation_cycles_dist.sample(&mut rng);
    let phase = rng.uniform(0.0, std::f64::consts::TAU);

    let membrane_top = water_rows;
    let membrane_bot = membrane_top + membrane_rows;
    let gel_bot_base = membrane_bot + gel_rows;

    // Skin surface per column; gel shrinks and grows with the undulation but
    // always keeps at least one row.
    let skin_top: Vec<usize> = (0..nx)
        .map(|x| {
            let s = (std::f64::consts::TAU * cycles * x as f64 / nx as f64 + phase).sin();
            let top = gel_bot_base as f64 + amp_rows * s;
            (top.round() as usize)
                .max(membrane_bot + 1)
                .min(nz - skin_rows - 1)
        })
        .collect();

    let mut map = LabelMap::filled(nx, nz, sp, TissueClass::HeavyWater);
    for x in 0..nx {
        for z in membrane_top..membrane_bot {
            map.set(x, z, TissueClass::TransducerMembrane);
        }
        for z in membrane_bot..skin_top[x] {
            map.set(x, z, TissueClass::UsGel);
        }
        for z in skin_top[x]..skin_top[x] + skin_rows {
            map.set(x, z, TissueClass::Skin);
        }
        for z in skin_top[x] + skin_rows..nz {
            map.set(x, z, TissueClass::MuscleBackground);
        }
    }

    let skin_bot_max = skin_top.iter().max().unwrap() + skin_rows;
    let vessel_count = params.vessel_count_dist.sample(&mut rng);
    for _ in 0..vessel_count {
        let class = if rng.chance(params.artery_fraction) {
            TissueClass::Artery
        } else {
            TissueClass::Vein
        };
        let r_mm = params.vessel_radius_dist.sample(&mut rng);
        let aspect = params.vessel_aspect_dist.sample(&mut rng);
        let depth_mm = params.vessel_depth_dist.sample(&mut rng);

        let mut rx = rows(r_mm, sp).max(1);
        let mut rz = rows(r_mm * aspect, sp).max(1);
        // Shrink vessels that cannot fit between skin and the lower edge.
        let muscle_rows = nz.saturating_sub(skin_bot_max + 2);
        if muscle_rows < 3 {
            continue;
        }
        if 2 * rz + 1 > muscle_rows {
            let scale = muscle_rows as f64 / (2 * rz + 1) as f64;
            rz = ((rz as f64 * scale) as usize).max(1);
            rx = ((rx as f64 * scale) as usize).max(1);
        }
        let cz_min = skin_bot_max + rz + 1;
        let cz_max = nz - rz - 2;
        if cz_min > cz_max {
            continue;
        }
        let cz = (skin_bot_max + rz + 1 + rows(depth_mm, sp)).clamp(cz_min, cz_max);
        let cx_min = rx;
        let cx_max = nx - 1 - rx;
        if cx_min > cx_max {
            continue;
        }
        let cx = rng.int_range(cx_min as i64, cx_max as i64) as usize;

        for z in cz - rz..=cz + rz {
            for x in cx.saturating_sub(rx)..=(cx + rx).min(nx - 1) {
                let dx = (x as f64 - cx as f64) / rx as f64;
                let dz = (z as f64 - cz as f64) / rz as f64;
                if dx * dx + dz * dz <= 1.0 {
                    map.set(x, z, class);
                }
            }
        }
    }
    Ok(map)
}

/// Double a mask list by appending a horizontally flipped copy of each map.
pub fn hflip_copy_augment(masks: &[LabelMap]) -> Result<Vec<LabelMap>> {
    let first = masks
        .first()
        .ok_or_else(|| CoreError::InvalidParams("empty mask list".into()))?;
    for m in masks {
        if m.nx != first.nx || m.nz != first.nz {
            return Err(CoreError::ShapeMismatch(format!(
                "mask shapes differ: ({}, {}) vs ({}, {})",
                m.nx, m.nz, first.nx, first.nz
            )));
        }
    }
    let mut out = masks.to_vec();
    out.extend(masks.iter().map(LabelMap::hflip));
    Ok(out)
}
