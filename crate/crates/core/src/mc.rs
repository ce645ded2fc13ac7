//! Voxel Monte Carlo photon transport.
//!
//! Photons are launched from a rectangular aperture on the top face and
//! walked through the voxel grid with per-voxel step resampling: the free
//! path is drawn from the current voxel's mu_t and redrawn whenever a voxel
//! boundary is crossed first. Absorption uses implicit capture (deposit
//! `w * mua/mut`, multiply the weight by the albedo) with Russian roulette
//! termination. All boundaries are absorbing and refractive indices are
//! treated as matched, so there are no internal Fresnel events.
//!
//! Reproducibility contract: photon `i` draws from `Rng64::stream(seed, i)`
//! and deposits are accumulated per fixed-size photon chunk, with chunk
//! buffers folded into the master buffer in chunk-index order. The result
//! is therefore bit-identical for any worker count.

use crate::error::{CoreError, Result};
use crate::optics::OpticalVolume;
use crate::rng::Rng64;

/// Illumination geometry and photon budget.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SourceSpec {
    /// Aperture center on the top face, in mm. `None` centers it.
    pub center_mm: Option<(f64, f64)>,
    /// Aperture extent along x and y, in mm (0 collapses to a pencil beam).
    pub aperture_mm: (f64, f64),
    /// Emission direction; must be unit length with a +z component.
    pub direction: (f64, f64, f64),
    /// Divergence half-angle in degrees, in [0, 90).
    pub divergence_deg: f64,
    pub photon_count: u64,
    pub base_seed: u64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec {
            center_mm: None,
            aperture_mm: (30.0, 2.0),
            direction: (0.0, 0.0, 1.0),
            divergence_deg: 5.0,
            photon_count: 100_000,
            base_seed: 0,
        }
    }
}

impl SourceSpec {
    pub fn pencil_beam(photon_count: u64, base_seed: u64) -> Self {
        SourceSpec {
            aperture_mm: (0.0, 0.0),
            divergence_deg: 0.0,
            photon_count,
            base_seed,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.photon_count == 0 {
            return Err(CoreError::InvalidParams("photon_count must be >= 1".into()));
        }
        let (dx, dy, dz) = self.direction;
        let norm = (dx * dx + dy * dy + dz * dz).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(CoreError::InvalidParams(format!(
                "direction not normalized (|d| = {norm})"
            )));
        }
        if dz <= 0.0 {
            return Err(CoreError::InvalidParams(
                "direction must point into the volume (+z)".into(),
            ));
        }
        if !(0.0..90.0).contains(&self.divergence_deg) {
            return Err(CoreError::InvalidParams("divergence must be in [0, 90) deg".into()));
        }
        Ok(())
    }
}

/// Roulette thresholds and the chunk size of the deterministic reduction.
/// Changing `chunk_photons` changes the f32 accumulation grouping and
/// therefore the output bits; it is part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransportConfig {
    pub roulette_threshold: f64,
    pub roulette_survival: f64,
    pub chunk_photons: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            roulette_threshold: 1e-4,
            roulette_survival: 0.1,
            chunk_photons: 4096,
        }
    }
}

/// Simulated fluence, normalized to unit launched energy (1/mm^2 units).
#[derive(Debug, Clone, PartialEq)]
pub struct FluenceVolume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing_mm: f64,
    pub wavelength_nm: f64,
    pub phi: Vec<f32>,
    /// Weight fraction that left the volume (plus roulette settlement).
    pub escaped_weight: f64,
    /// Weight fraction absorbed in the volume.
    pub deposited_weight: f64,
}

impl FluenceVolume {
    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }
}

/// Initial pressure p0 = Gamma * mua * phi with Gamma = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialPressureVolume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing_mm: f64,
    pub wavelength_nm: f64,
    pub p0: Vec<f32>,
}

impl InitialPressureVolume {
    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }
}

/// Sample the cosine of the Henyey-Greenstein deflection angle.
/// For |g| below 1e-3 this degenerates to the uniform [-1, 1] draw.
#[inline]
pub fn sample_hg(g: f64, rng: &mut Rng64) -> f64 {
    let xi = rng.f64();
    if g.abs() < 1e-3 {
        return 2.0 * xi - 1.0;
    }
    let s = (1.0 - g * g) / (1.0 - g + 2.0 * g * xi);
    ((1.0 + g * g - s * s) / (2.0 * g)).clamp(-1.0, 1.0)
}

/// Henyey-Greenstein CDF, P(cos theta <= x).
pub fn hg_cdf(g: f64, x: f64) -> f64 {
    if g.abs() < 1e-3 {
        return (x + 1.0) / 2.0;
    }
    let term = (1.0 + g * g - 2.0 * g * x).sqrt();
    (1.0 - g * g) / (2.0 * g) * (1.0 / term - 1.0 / (1.0 + g))
}

struct PhotonOutcome {
    deposited: f64,
    escaped: f64,
}

struct Grid<'a> {
    nx: usize,
    ny: usize,
    nz: usize,
    h: f64,
    mua: &'a [f32],
    mus: &'a [f32],
}

impl<'a> Grid<'a> {
    #[inline]
    fn voxel(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.ny + iy) * self.nx + ix
    }
}

/// Rotate the local scattering frame (cos_t, phi) onto direction `u`.
#[inline]
fn scatter_direction(u: [f64; 3], cos_t: f64, phi: f64) -> [f64; 3] {
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let (sin_p, cos_p) = phi.sin_cos();
    let uz2 = 1.0 - u[2] * u[2];
    let mut v = if uz2 < 1e-12 {
        [
            sin_t * cos_p,
            sin_t * sin_p,
            cos_t * u[2].signum(),
        ]
    } else {
        let denom = uz2.sqrt();
        [
            sin_t * (u[0] * u[2] * cos_p - u[1] * sin_p) / denom + u[0] * cos_t,
            sin_t * (u[1] * u[2] * cos_p + u[0] * sin_p) / denom + u[1] * cos_t,
            -sin_t * cos_p * denom + u[2] * cos_t,
        ]
    };
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v[0] /= norm;
    v[1] /= norm;
    v[2] /= norm;
    v
}

/// Trace one photon, accumulating deposits into `buf` (f32) and returning
/// its weight ledger. The ledger closes exactly: deposits + escaped = 1,
/// with roulette gains/losses folded into the escaped bucket.
fn trace_photon(
    grid: &Grid,
    g_of: &[f32],
    source: &SourceSpec,
    cfg: &TransportConfig,
    photon_index: u64,
    buf: &mut [f32],
) -> PhotonOutcome {
    let mut rng = Rng64::stream(source.base_seed, photon_index);
    let h = grid.h;
    let (size_x, size_y) = (grid.nx as f64 * h, grid.ny as f64 * h);
    let (cx, cy) = source.center_mm.unwrap_or((size_x / 2.0, size_y / 2.0));

    // Launch position on the aperture, clamped just inside the volume.
    let eps = 1e-9 * h;
    let px = (cx + (rng.f64() - 0.5) * source.aperture_mm.0).clamp(eps, size_x - eps);
    let py = (cy + (rng.f64() - 0.5) * source.aperture_mm.1).clamp(eps, size_y - eps);
    let mut pos = [px, py, eps];

    // Direction: uniform cone of half-angle `divergence` around `direction`.
    let base = [source.direction.0, source.direction.1, source.direction.2];
    let mut dir = if source.divergence_deg > 0.0 {
        let cos_min = source.divergence_deg.to_radians().cos();
        let cos_t = 1.0 - rng.f64() * (1.0 - cos_min);
        let phi = rng.f64() * std::f64::consts::TAU;
        scatter_direction(base, cos_t, phi)
    } else {
        base
    };

    let mut ix = ((pos[0] / h) as usize).min(grid.nx - 1);
    let mut iy = ((pos[1] / h) as usize).min(grid.ny - 1);
    let mut iz = 0usize;

    let mut weight = 1.0f64;
    let mut deposited = 0.0f64;
    let mut escaped = 0.0f64;

    // Remaining distance to the sampled interaction, in mm; resampled from
    // the local mu_t after every interaction and at every voxel boundary.
    const MAX_EVENTS: u32 = 10_000_000;
    let mut events = 0u32;
    'life: while weight > 0.0 {
        events += 1;
        if events > MAX_EVENTS {
            escaped += weight;
            break;
        }
        let v = grid.voxel(ix, iy, iz);
        let mua = grid.mua[v] as f64;
        let mus = grid.mus[v] as f64;
        let mut_t = mua + mus;

        // Distance to the nearest voxel face along dir.
        let mut t_boundary = f64::INFINITY;
        let mut axis = 3usize;
        for k in 0..3 {
            let i_k = [ix, iy, iz][k] as f64;
            let d = dir[k];
            if d > 0.0 {
                let t = ((i_k + 1.0) * h - pos[k]) / d;
                if t < t_boundary {
                    t_boundary = t;
                    axis = k;
                }
            } else if d < 0.0 {
                let t = (i_k * h - pos[k]) / d;
                if t < t_boundary {
                    t_boundary = t;
                    axis = k;
                }
            }
        }
        let t_boundary = t_boundary.max(0.0);

        // Free path in the current voxel; infinite when the voxel is
        // transparent (ballistic traversal, not an error).
        let t_interact = if mut_t > 0.0 {
            -(1.0 - rng.f64()).ln() / mut_t
        } else {
            f64::INFINITY
        };

        if t_interact < t_boundary {
            for k in 0..3 {
                pos[k] += dir[k] * t_interact;
            }
            let deposit = weight * mua / mut_t;
            buf[v] += deposit as f32;
            deposited += deposit;
            weight -= deposit;
            if weight <= 0.0 {
                break;
            }
            let cos_t = sample_hg(g_of[v] as f64, &mut rng);
            let phi = rng.f64() * std::f64::consts::TAU;
            dir = scatter_direction(dir, cos_t, phi);

            if weight < cfg.roulette_threshold {
                if rng.f64() < cfg.roulette_survival {
                    let boosted = weight / cfg.roulette_survival;
                    // Settle the boost against the escape bucket so the
                    // per-photon ledger stays exact.
                    escaped += weight - boosted;
                    weight = boosted;
                } else {
                    escaped += weight;
                    break 'life;
                }
            }
        } else {
            // Move to the boundary and step into the adjacent voxel.
            for k in 0..3 {
                pos[k] += dir[k] * t_boundary;
            }
            match axis {
                0 => {
                    if dir[0] > 0.0 {
                        ix += 1;
                        pos[0] = ix as f64 * h;
                        if ix >= grid.nx {
                            escaped += weight;
                            break 'life;
                        }
                    } else {
                        pos[0] = ix as f64 * h;
                        if ix == 0 {
                            escaped += weight;
                            break 'life;
                        }
                        ix -= 1;
                    }
                }
                1 => {
                    if dir[1] > 0.0 {
                        iy += 1;
                        pos[1] = iy as f64 * h;
                        if iy >= grid.ny {
                            escaped += weight;
                            break 'life;
                        }
                    } else {
                        pos[1] = iy as f64 * h;
                        if iy == 0 {
                            escaped += weight;
                            break 'life;
                        }
                        iy -= 1;
                    }
                }
                2 => {
                    if dir[2] > 0.0 {
                        iz += 1;
                        pos[2] = iz as f64 * h;
                        if iz >= grid.nz {
                            escaped += weight;
                            break 'life;
                        }
                    } else {
                        pos[2] = iz as f64 * h;
                        if iz == 0 {
                            escaped += weight;
                            break 'life;
                        }
                        iz -= 1;
                    }
                }
                _ => {
                    // Degenerate direction (all components zero after
                    // rounding); retire the photon.
                    escaped += weight;
                    break 'life;
                }
            }
        }
    }
    PhotonOutcome { deposited, escaped }
}

/// Simulate fluence with default transport thresholds.
pub fn simulate_fluence(
    volume: &OpticalVolume,
    source: &SourceSpec,
    workers: usize,
) -> Result<FluenceVolume> {
    simulate_fluence_with(volume, source, workers, &TransportConfig::default())
}

/// Full-control variant of [`simulate_fluence`].
pub fn simulate_fluence_with(
    volume: &OpticalVolume,
    source: &SourceSpec,
    workers: usize,
    cfg: &TransportConfig,
) -> Result<FluenceVolume> {
    source.validate()?;
    volume.validate()?;
    if workers == 0 {
        return Err(CoreError::InvalidParams("workers must be >= 1".into()));
    }
    let n_voxels = volume.voxel_count();
    let grid = Grid {
        nx: volume.nx,
        ny: volume.ny,
        nz: volume.nz,
        h: volume.spacing_mm,
        mua: &volume.mua,
        mus: &volume.mus,
    };

    let n = source.photon_count;
    let chunk = cfg.chunk_photons.max(1);
    let n_chunks = n.div_ceil(chunk);

    let mut master = vec![0.0f64; n_voxels];
    let mut deposited = 0.0f64;
    let mut escaped = 0.0f64;

    let run_chunk = |c: u64| -> (Vec<f32>, f64, f64) {
        let mut buf = vec![0.0f32; n_voxels];
        let mut dep = 0.0f64;
        let mut esc = 0.0f64;
        let lo = c * chunk;
        let hi = ((c + 1) * chunk).min(n);
        for i in lo..hi {
            let out = trace_photon(&grid, &volume.g, source, cfg, i, &mut buf);
            dep += out.deposited;
            esc += out.escaped;
        }
        (buf, dep, esc)
    };

    // Waves of `workers` chunks; results fold into the master buffer in
    // chunk-index order, which keeps the output independent of the worker
    // count and of scheduling.
    let mut next = 0u64;
    while next < n_chunks {
        let wave = workers.min((n_chunks - next) as usize);
        let results: Vec<(Vec<f32>, f64, f64)> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..wave)
                .map(|j| {
                    let c = next + j as u64;
                    scope.spawn(move || run_chunk(c))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("photon worker")).collect()
        });
        for (buf, dep, esc) in results {
            for (m, b) in master.iter_mut().zip(&buf) {
                *m += *b as f64;
            }
            deposited += dep;
            escaped += esc;
        }
        next += wave as u64;
    }

    // phi = absorbed energy density / mua, per unit launched energy.
    let voxel_volume = volume.spacing_mm.powi(3);
    let norm = 1.0 / (n as f64 * voxel_volume);
    let phi: Vec<f32> = master
        .iter()
        .zip(&volume.mua)
        .map(|(&dep, &mua)| {
            if mua > 0.0 {
                (dep * norm / mua as f64) as f32
            } else {
                0.0
            }
        })
        .collect();

    Ok(FluenceVolume {
        nx: volume.nx,
        ny: volume.ny,
        nz: volume.nz,
        spacing_mm: volume.spacing_mm,
        wavelength_nm: volume.wavelength_nm,
        phi,
        escaped_weight: escaped / n as f64,
        deposited_weight: deposited / n as f64,
    })
}

/// Voxelwise p0 = mua * phi (Gamma = 1 by convention).
pub fn initial_pressure(
    fluence: &FluenceVolume,
    optics: &OpticalVolume,
) -> Result<InitialPressureVolume> {
    if (fluence.nx, fluence.ny, fluence.nz) != (optics.nx, optics.ny, optics.nz) {
        return Err(CoreError::ShapeMismatch(format!(
            "fluence ({},{},{}) vs optics ({},{},{})",
            fluence.nx, fluence.ny, fluence.nz, optics.nx, optics.ny, optics.nz
        )));
    }
    if fluence.wavelength_nm != optics.wavelength_nm {
        return Err(CoreError::ShapeMismatch(format!(
            "wavelength mismatch: {} vs {} nm",
            fluence.wavelength_nm, optics.wavelength_nm
        )));
    }
    let p0 = fluence
        .phi
        .iter()
        .zip(&optics.mua)
        .map(|(&phi, &mua)| phi * mua)
        .collect();
    Ok(InitialPressureVolume {
        nx: fluence.nx,
        ny: fluence.ny,
        nz: fluence.nz,
        spacing_mm: fluence.spacing_mm,
        wavelength_nm: fluence.wavelength_nm,
        p0,
    })
}

/// Convenience for tests and analytic checks: a homogeneous volume.
pub fn homogeneous_volume(
    (nx, ny, nz): (usize, usize, usize),
    spacing_mm: f64,
    wavelength_nm: f64,
    mua: f32,
    mus: f32,
    g: f32,
) -> OpticalVolume {
    let n = nx * ny * nz;
    OpticalVolume {
        nx,
        ny,
        nz,
        spacing_mm,
        wavelength_nm,
        mua: vec![mua; n],
        mus: vec![mus; n],
        g: vec![g; n],
        n: vec![1.33; n],
    }
}
