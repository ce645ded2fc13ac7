//! One-hot class tensors and the rotate/translate augmentation applied to
//! mask images before the GAN discriminator.
//!
//! The augmentation is computed as an index plan (output pixel -> source
//! pixel or fill), so the same transform can be applied to hard one-hot
//! masks here and replayed differentiably on network activations elsewhere.

use crate::error::{CoreError, Result};
use crate::labelmap::LabelMap;
use crate::rng::Rng64;
use crate::tissue::{TissueClass, NUM_CLASSES};

/// Dense (C, H, W) float tensor holding per-pixel class scores.
/// H maps to the label map's z axis and W to x.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ClassTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ClassTensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Encode a label map into a 7-channel one-hot tensor (channel = id - 1).
pub fn one_hot(map: &LabelMap) -> Result<ClassTensor> {
    let mut t = ClassTensor::zeros(NUM_CLASSES, map.nz, map.nx);
    for z in 0..map.nz {
        for x in 0..map.nx {
            let class = TissueClass::from_id(map.get(x, z))?;
            let i = t.idx(class.id() as usize - 1, z, x);
            t.data[i] = 1.0;
        }
    }
    Ok(t)
}

/// Per-pixel argmax back to class ids. Ties break toward the lowest channel.
pub fn argmax_decode(t: &ClassTensor, spacing_mm: f64) -> Result<LabelMap> {
    if t.channels != NUM_CLASSES {
        return Err(CoreError::ShapeMismatch(format!(
            "expected {NUM_CLASSES} channels, got {}",
            t.channels
        )));
    }
    let mut map = LabelMap {
        nx: t.width,
        nz: t.height,
        spacing_mm,
        data: vec![0; t.width * t.height],
    };
    for y in 0..t.height {
        for x in 0..t.width {
            let mut best_c = 0usize;
            let mut best_v = t.get(0, y, x);
            for c in 1..t.channels {
                let v = t.get(c, y, x);
                if v > best_v {
                    best_v = v;
                    best_c = c;
                }
            }
            map.data[y * t.width + x] = (best_c + 1) as u8;
        }
    }
    Ok(map)
}

/// Augmentation parameters; defaults mirror the GAN training setup
/// (p = 0.6 per transform, rotation +-45 deg, translation +-5 px).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AffineAugmentParams {
    pub p_apply: f64,
    pub rot_range_deg: (f64, f64),
    pub trans_range_px: (f64, f64),
}

impl Default for AffineAugmentParams {
    fn default() -> Self {
        AffineAugmentParams {
            p_apply: 0.6,
            rot_range_deg: (-45.0, 45.0),
            trans_range_px: (-5.0, 5.0),
        }
    }
}

/// Resolved index map of one augmentation draw.
///
/// `source[o]` is the flat (y * width + x) input index feeding output pixel
/// `o`, or `None` where the transform exposed out-of-image pixels.
#[derive(Debug, Clone)]
pub struct AffinePlan {
    pub height: usize,
    pub width: usize,
    pub source: Vec<Option<u32>>,
}

impl AffinePlan {
    pub fn identity(height: usize, width: usize) -> Self {
        AffinePlan {
            height,
            width,
            source: (0..(height * width) as u32).map(Some).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.source
            .iter()
            .enumerate()
            .all(|(i, s)| *s == Some(i as u32))
    }
}

/// Draw one augmentation plan. Rotation and the two translations are gated
/// by independent Bernoulli(p_apply) draws; rotation is resolved first,
/// then the translation, with nearest-neighbor source lookup.
pub fn sample_affine_plan(
    params: &AffineAugmentParams,
    height: usize,
    width: usize,
    rng: &mut Rng64,
) -> AffinePlan {
    let apply_rot = rng.chance(params.p_apply);
    let angle_deg = if apply_rot {
        rng.uniform(params.rot_range_deg.0, params.rot_range_deg.1)
    } else {
        0.0
    };
    let apply_tx = rng.chance(params.p_apply);
    let tx = if apply_tx {
        rng.uniform(params.trans_range_px.0, params.trans_range_px.1)
    } else {
        0.0
    };
    let apply_ty = rng.chance(params.p_apply);
    let ty = if apply_ty {
        rng.uniform(params.trans_range_px.0, params.trans_range_px.1)
    } else {
        0.0
    };
    build_affine_plan(height, width, angle_deg, tx, ty)
}

/// Deterministic plan for a fixed (angle, tx, ty); content rotates
/// counterclockwise about the image center and shifts by (+tx, +ty) pixels.
pub fn build_affine_plan(height: usize, width: usize, angle_deg: f64, tx: f64, ty: f64) -> AffinePlan {
    if angle_deg == 0.0 && tx == 0.0 && ty == 0.0 {
        return AffinePlan::identity(height, width);
    }
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let theta = angle_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let mut source = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            // Invert translation, then invert rotation.
            let ux = x as f64 - tx - cx;
            let uy = y as f64 - ty - cy;
            let sx = cos_t * ux + sin_t * uy + cx;
            let sy = -sin_t * ux + cos_t * uy + cy;
            let ix = sx.round();
            let iy = sy.round();
            if ix >= 0.0 && iy >= 0.0 && (ix as usize) < width && (iy as usize) < height {
                source.push(Some((iy as u32) * width as u32 + ix as u32));
            } else {
                source.push(None);
            }
        }
    }
    AffinePlan { height, width, source }
}

/// Channel index used to fill exposed pixels: the heavy-water class, which
/// is what borders the probe-facing side of every mask.
pub const FILL_CHANNEL: usize = TissueClass::HeavyWater as usize - 1;

/// Apply a plan to a class tensor. Exposed pixels become one-hot
/// heavy-water.
pub fn apply_affine_plan(plan: &AffinePlan, t: &ClassTensor) -> ClassTensor {
    assert_eq!((t.height, t.width), (plan.height, plan.width), "plan/tensor shape");
    let n = plan.height * plan.width;
    let mut out = ClassTensor::zeros(t.channels, t.height, t.width);
    for c in 0..t.channels {
        let src = &t.data[c * n..(c + 1) * n];
        let dst = &mut out.data[c * n..(c + 1) * n];
        let fill = if c == FILL_CHANNEL { 1.0 } else { 0.0 };
        for (o, s) in plan.source.iter().enumerate() {
            dst[o] = match s {
                Some(i) => src[*i as usize],
                None => fill,
            };
        }
    }
    out
}

/// One-call form: draw a plan and apply it.
pub fn affine_augment(t: &ClassTensor, rng: &mut Rng64, params: &AffineAugmentParams) -> ClassTensor {
    let plan = sample_affine_plan(params, t.height, t.width, rng);
    apply_affine_plan(&plan, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forearm::{generate_forearm_labelmap, ForearmModelParams};
    use crate::tissue::TissueClass::*;

    fn sample_map() -> LabelMap {
        generate_forearm_labelmap(&ForearmModelParams::default(), 42).unwrap()
    }

    #[test]
    fn one_hot_round_trip() {
        let map = sample_map();
        let t = one_hot(&map).unwrap();
        let back = argmax_decode(&t, map.spacing_mm).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn one_hot_channel_sums_to_one() {
        let map = sample_map();
        let t = one_hot(&map).unwrap();
        for y in 0..t.height {
            for x in 0..t.width {
                let s: f32 = (0..t.channels).map(|c| t.get(c, y, x)).sum();
                assert_eq!(s, 1.0);
            }
        }
    }

    #[test]
    fn one_hot_rejects_bad_id() {
        let mut map = sample_map();
        map.data[0] = 9;
        assert!(one_hot(&map).is_err());
    }

    #[test]
    fn argmax_ties_break_to_lowest_class() {
        let t = ClassTensor::zeros(7, 2, 2); // all-equal logits everywhere
        let map = argmax_decode(&t, 0.16).unwrap();
        assert!(map.data.iter().all(|&v| v == Artery.id()));
    }

    #[test]
    fn p_zero_is_identity() {
        let map = sample_map();
        let t = one_hot(&map).unwrap();
        let params = AffineAugmentParams { p_apply: 0.0, ..Default::default() };
        let mut rng = Rng64::new(5);
        let out = affine_augment(&t, &mut rng, &params);
        assert_eq!(out, t);
    }

    #[test]
    fn forced_translation_shifts_columns() {
        let map = sample_map();
        let t = one_hot(&map).unwrap();
        let plan = build_affine_plan(t.height, t.width, 0.0, 5.0, 0.0);
        let out = apply_affine_plan(&plan, &t);
        for c in 0..t.channels {
            for y in 0..t.height {
                for x in 0..t.width {
                    let expect = if x < 5 {
                        if c == FILL_CHANNEL { 1.0 } else { 0.0 }
                    } else {
                        t.get(c, y, x - 5)
                    };
                    assert_eq!(out.get(c, y, x), expect, "c={c} y={y} x={x}");
                }
            }
        }
    }

    #[test]
    fn no_new_labels_property() {
        let map = sample_map();
        let t = one_hot(&map).unwrap();
        let present_before: Vec<u8> = map.classes_present().iter().map(|c| c.id()).collect();
        let params = AffineAugmentParams::default();
        for seed in 0..20 {
            let mut rng = Rng64::new(seed);
            let out = affine_augment(&t, &mut rng, &params);
            let decoded = argmax_decode(&out, map.spacing_mm).unwrap();
            for class in decoded.classes_present() {
                assert!(
                    present_before.contains(&class.id()) || class == HeavyWater,
                    "unexpected class {class:?} after augmentation (seed {seed})"
                );
            }
        }
    }

    #[test]
    fn rotation_preserves_channel_sum() {
        let map = sample_map();
        let t = one_hot(&map).unwrap();
        let plan = build_affine_plan(t.height, t.width, 30.0, 0.0, 0.0);
        let out = apply_affine_plan(&plan, &t);
        for y in 0..t.height {
            for x in 0..t.width {
                let s: f32 = (0..t.channels).map(|c| out.get(c, y, x)).sum();
                assert_eq!(s, 1.0, "y={y} x={x}");
            }
        }
    }
}
