//! DCGAN mask generator: architecture builders, the training loop with
//! label smoothing/flipping and differentiable affine augmentation, and
//! mask sampling from a trained generator.

use std::path::Path;

use serde::{Deserialize, Serialize};

use pasyn_core::augment::{
    apply_affine_plan, argmax_decode, one_hot, sample_affine_plan, AffineAugmentParams,
    AffinePlan, ClassTensor, FILL_CHANNEL,
};
use pasyn_core::labelmap::LabelMap;
use pasyn_core::tissue::{TissueClass, NUM_CLASSES};
use pasyn_core::Rng64;

use crate::checkpoint::{apply_blobs, load_checkpoint, save_checkpoint};
use crate::error::{NnError, Result};
use crate::layers::{
    BatchNorm2d, ChannelSoftmax, Conv2d, CropTo, Layer, LeakyRelu, Model, PadTo, Param, Relu,
    Sequential, Sigmoid, TransposedConv2d,
};
use crate::loss::bce_loss;
use crate::optim::Adam;
use crate::tensor::Tensor4;

/// GAN training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanHyperparams {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Latent vector dimension ("initial channel size" of the generator).
    pub latent_dim: usize,
    pub gen_base_channels: usize,
    /// First-layer feature channels of the discriminator.
    pub disc_base_channels: usize,
    /// Real labels are 1 + U(smooth_lo, smooth_hi).
    pub smooth_lo: f64,
    pub smooth_hi: f64,
    /// p_flip(epoch) = clamp(intercept + slope * epoch, 0, 1).
    pub flip_intercept: f64,
    pub flip_slope: f64,
    pub augment: AffineAugmentParams,
    pub beta1: f64,
    pub checkpoint_every: usize,
}

impl Default for GanHyperparams {
    fn default() -> Self {
        GanHyperparams {
            max_epochs: 700,
            batch_size: 3,
            lr_g: 2e-4,
            lr_d: 2e-4,
            latent_dim: 100,
            gen_base_channels: 32,
            disc_base_channels: 56,
            smooth_lo: -0.3,
            smooth_hi: 0.0,
            flip_intercept: 0.2,
            flip_slope: -2.9e-4,
            augment: AffineAugmentParams::default(),
            beta1: 0.5,
            checkpoint_every: 100,
        }
    }
}

/// Generator latent dimension per body site.
pub fn latent_dim_for_site(site: &str) -> Result<usize> {
    match site {
        "forearm" => Ok(100),
        "calf" => Ok(106),
        "neck" => Ok(100),
        other => Err(NnError::InvalidSpec(format!("unknown body site '{other}'"))),
    }
}

/// Label-flip probability schedule; non-increasing, clamped to [0, 1].
pub fn p_flip(hp: &GanHyperparams, epoch: usize) -> f64 {
    (hp.flip_intercept + hp.flip_slope * epoch as f64).clamp(0.0, 1.0)
}

/// One smoothed "real" label draw: 1 + U(smooth_lo, smooth_hi).
pub fn smooth_real_label(hp: &GanHyperparams, rng: &mut Rng64) -> f64 {
    1.0 + rng.uniform(hp.smooth_lo, hp.smooth_hi)
}

/// Shape plan shared by generator and discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanShapePlan {
    pub mask_h: usize,
    pub mask_w: usize,
    /// Doubling block count.
    pub levels: usize,
    /// Initial (deepest) spatial extent.
    pub h0: usize,
    pub w0: usize,
    /// Internally padded extent (= mask extent when power-of-two friendly).
    pub h_pad: usize,
    pub w_pad: usize,
}

pub fn plan_gan_shape(mask_h: usize, mask_w: usize) -> Result<GanShapePlan> {
    if mask_h < 8 || mask_w < 8 {
        return Err(NnError::InvalidSpec(format!(
            "mask shape {mask_h}x{mask_w} too small for the DCGAN topology"
        )));
    }
    let mut levels = 1;
    while levels < 4 && mask_h.div_ceil(1 << (levels + 1)) >= 4 && mask_w.div_ceil(1 << (levels + 1)) >= 4 {
        levels += 1;
    }
    let h0 = mask_h.div_ceil(1 << levels);
    let w0 = mask_w.div_ceil(1 << levels);
    Ok(GanShapePlan {
        mask_h,
        mask_w,
        levels,
        h0,
        w0,
        h_pad: h0 << levels,
        w_pad: w0 << levels,
    })
}

/// Architecture record stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanArch {
    pub mask_h: usize,
    pub mask_w: usize,
    pub spacing_mm: f64,
    pub latent_dim: usize,
    pub gen_base_channels: usize,
    pub disc_base_channels: usize,
}

pub struct Generator {
    pub arch: GanArch,
    pub plan: GanShapePlan,
    net: Sequential<f32>,
}

pub struct Discriminator {
    pub arch: GanArch,
    pub plan: GanShapePlan,
    net: Sequential<f32>,
}

impl Model<f32> for Generator {
    fn forward(&mut self, x: &Tensor4<f32>, train: bool) -> Result<Tensor4<f32>> {
        Layer::forward(&mut self.net, x, train)
    }
    fn backward(&mut self, gy: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        Layer::backward(&mut self.net, gy)
    }
    fn params(&mut self) -> Vec<Param<'_, f32>> {
        Layer::params(&mut self.net)
    }
}

impl Model<f32> for Discriminator {
    fn forward(&mut self, x: &Tensor4<f32>, train: bool) -> Result<Tensor4<f32>> {
        Layer::forward(&mut self.net, x, train)
    }
    fn backward(&mut self, gy: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        Layer::backward(&mut self.net, gy)
    }
    fn params(&mut self) -> Vec<Param<'_, f32>> {
        Layer::params(&mut self.net)
    }
}

/// Build the generator/discriminator pair for a mask shape (H, W).
/// Shapes that are not power-of-two friendly get internal pad/crop layers.
pub fn build_dcgan(hp: &GanHyperparams, mask_shape: (usize, usize), spacing_mm: f64, init_seed: u64) -> Result<(Generator, Discriminator)> {
    let (mask_h, mask_w) = mask_shape;
    let plan = plan_gan_shape(mask_h, mask_w)?;
    let arch = GanArch {
        mask_h,
        mask_w,
        spacing_mm,
        latent_dim: hp.latent_dim,
        gen_base_channels: hp.gen_base_channels,
        disc_base_channels: hp.disc_base_channels,
    };

    let mut g_rng = Rng64::stream_named(init_seed, "g-init");
    let c0 = hp.gen_base_channels << (plan.levels - 1);
    let mut g_layers: Vec<Box<dyn Layer<f32>>> = vec![
        Box::new(TransposedConv2d::new_rect(hp.latent_dim, c0, (plan.h0, plan.w0), 1, 0, &mut g_rng)),
        Box::new(BatchNorm2d::new(c0, &mut g_rng)),
        Box::new(Relu::new()),
    ];
    let mut ch = c0;
    for level in 1..plan.levels {
        let next = c0 >> level;
        g_layers.push(Box::new(TransposedConv2d::new(ch, next, 4, 2, 1, &mut g_rng)));
        g_layers.push(Box::new(BatchNorm2d::new(next, &mut g_rng)));
        g_layers.push(Box::new(Relu::new()));
        ch = next;
    }
    g_layers.push(Box::new(TransposedConv2d::new(ch, NUM_CLASSES, 4, 2, 1, &mut g_rng)));
    if (plan.h_pad, plan.w_pad) != (mask_h, mask_w) {
        g_layers.push(Box::new(CropTo::new(mask_h, mask_w)));
    }
    g_layers.push(Box::new(ChannelSoftmax::new()));

    let mut d_rng = Rng64::stream_named(init_seed, "d-init");
    let mut d_layers: Vec<Box<dyn Layer<f32>>> = Vec::new();
    if (plan.h_pad, plan.w_pad) != (mask_h, mask_w) {
        d_layers.push(Box::new(PadTo::new(plan.h_pad, plan.w_pad)));
    }
    d_layers.push(Box::new(Conv2d::new(NUM_CLASSES, hp.disc_base_channels, 4, 2, 1, &mut d_rng)));
    d_layers.push(Box::new(LeakyRelu::new(0.2)));
    let mut ch = hp.disc_base_channels;
    for _ in 1..plan.levels {
        let next = ch * 2;
        d_layers.push(Box::new(Conv2d::new(ch, next, 4, 2, 1, &mut d_rng)));
        d_layers.push(Box::new(BatchNorm2d::new(next, &mut d_rng)));
        d_layers.push(Box::new(LeakyRelu::new(0.2)));
        ch = next;
    }
    d_layers.push(Box::new(Conv2d::new_rect(ch, 1, (plan.h0, plan.w0), 1, 0, &mut d_rng)));
    d_layers.push(Box::new(Sigmoid::new()));

    Ok((
        Generator { arch: arch.clone(), plan, net: Sequential::new(g_layers) },
        Discriminator { arch, plan, net: Sequential::new(d_layers) },
    ))
}

/// Standard-normal latent batch (N, latent_dim, 1, 1).
pub fn sample_latent(n: usize, latent_dim: usize, rng: &mut Rng64) -> Tensor4<f32> {
    Tensor4::randn(n, latent_dim, 1, 1, 1.0, rng)
}

// ---------------------------------------------------------------------------
// Differentiable per-sample affine augmentation

/// A batch of augmentation plans; forward applies them per sample, backward
/// scatter-adds output gradients back to their source pixels (fill pixels
/// are constants and contribute nothing).
pub struct BatchAffine {
    plans: Vec<AffinePlan>,
}

impl BatchAffine {
    pub fn sample(params: &AffineAugmentParams, n: usize, h: usize, w: usize, rng: &mut Rng64) -> Self {
        BatchAffine {
            plans: (0..n).map(|_| sample_affine_plan(params, h, w, rng)).collect(),
        }
    }

    pub fn identity(n: usize, h: usize, w: usize) -> Self {
        BatchAffine {
            plans: (0..n).map(|_| AffinePlan::identity(h, w)).collect(),
        }
    }

    pub fn forward(&self, x: &Tensor4<f32>) -> Tensor4<f32> {
        assert_eq!(x.n, self.plans.len(), "plan count");
        let mut out = Tensor4::zeros(x.n, x.c, x.h, x.w);
        let plane = x.h * x.w;
        for (n, plan) in self.plans.iter().enumerate() {
            for c in 0..x.c {
                let src = x.plane(n, c);
                let base = (n * x.c + c) * plane;
                let fill = if c == FILL_CHANNEL { 1.0 } else { 0.0 };
                for (o, s) in plan.source.iter().enumerate() {
                    out.data[base + o] = match s {
                        Some(i) => src[*i as usize],
                        None => fill,
                    };
                }
            }
        }
        out
    }

    pub fn backward(&self, gy: &Tensor4<f32>) -> Tensor4<f32> {
        let mut gx = Tensor4::zeros(gy.n, gy.c, gy.h, gy.w);
        let plane = gy.h * gy.w;
        for (n, plan) in self.plans.iter().enumerate() {
            for c in 0..gy.c {
                let base = (n * gy.c + c) * plane;
                for (o, s) in plan.source.iter().enumerate() {
                    if let Some(i) = s {
                        gx.data[base + *i as usize] += gy.data[base + o];
                    }
                }
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
}

pub struct GanTrainResult {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub history: Vec<EpochLosses>,
}

fn stack_class_tensors(tensors: &[&ClassTensor]) -> Tensor4<f32> {
    let (c, h, w) = (tensors[0].channels, tensors[0].height, tensors[0].width);
    let mut out = Tensor4::zeros(tensors.len(), c, h, w);
    for (n, t) in tensors.iter().enumerate() {
        out.data[n * c * h * w..(n + 1) * c * h * w].copy_from_slice(&t.data);
    }
    out
}

fn stack_batches(a: &Tensor4<f32>, b: &Tensor4<f32>) -> Tensor4<f32> {
    assert_eq!((a.c, a.h, a.w), (b.c, b.h, b.w), "batch stack shape");
    let mut out = Tensor4::zeros(a.n + b.n, a.c, a.h, a.w);
    out.data[..a.data.len()].copy_from_slice(&a.data);
    out.data[a.data.len()..].copy_from_slice(&b.data);
    out
}

/// Scalar label tensor (N, 1, 1, 1).
fn label_tensor(values: &[f64]) -> Tensor4<f32> {
    Tensor4::from_vec(values.len(), 1, 1, 1, values.iter().map(|&v| v as f32).collect())
}

/// Train the DCGAN on a set of same-shape masks.
///
/// Per step: one-hot real masks, generate fakes, augment both with fresh
/// per-sample affine plans, score the joint batch with the discriminator
/// under smoothed/possibly flipped labels, update D; then update G on the
/// non-saturating loss through a fresh augmented fake batch. Fully seeded,
/// single-threaded step order.
pub fn train_gan(
    masks: &[LabelMap],
    hp: &GanHyperparams,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<GanTrainResult> {
    if masks.is_empty() {
        return Err(NnError::InvalidSpec("empty mask dataset".into()));
    }
    let (h, w) = (masks[0].nz, masks[0].nx);
    for m in masks {
        if (m.nz, m.nx) != (h, w) {
            return Err(NnError::ShapeMismatch(format!(
                "mask shapes differ: {}x{} vs {h}x{w}",
                m.nz, m.nx
            )));
        }
    }
    let encoded: Vec<ClassTensor> = masks
        .iter()
        .map(|m| one_hot(m).map_err(NnError::from))
        .collect::<Result<_>>()?;

    let (mut generator, mut discriminator) =
        build_dcgan(hp, (h, w), masks[0].spacing_mm, seed)?;
    let mut adam_g = Adam::new(hp.lr_g, hp.beta1);
    let mut adam_d = Adam::new(hp.lr_d, hp.beta1);
    let mut rng = Rng64::stream_named(seed, "gan-train");

    let batch = hp.batch_size.min(masks.len());
    let steps_per_epoch = masks.len().div_ceil(batch);
    let mut order: Vec<usize> = (0..masks.len()).collect();
    let mut history = Vec::with_capacity(hp.max_epochs);

    for epoch in 0..hp.max_epochs {
        rng.shuffle(&mut order);
        let flip_p = p_flip(hp, epoch);
        let mut d_sum = 0.0;
        let mut g_sum = 0.0;
        for step in 0..steps_per_epoch {
            let idx = |k: usize| order[(step * batch + k) % masks.len()];
            let reals: Vec<&ClassTensor> = (0..batch).map(|k| &encoded[idx(k)]).collect();
            let real_batch = stack_class_tensors(&reals);

            // --- Discriminator update on the joint real/fake batch.
            let z = sample_latent(batch, hp.latent_dim, &mut rng);
            let fake = generator.forward(&z, true)?;
            let aug_real = BatchAffine::sample(&hp.augment, batch, h, w, &mut rng);
            let aug_fake = BatchAffine::sample(&hp.augment, batch, h, w, &mut rng);
            let d_input = stack_batches(&aug_real.forward(&real_batch), &aug_fake.forward(&fake));

            let flip = rng.chance(flip_p);
            let mut labels = Vec::with_capacity(2 * batch);
            let smoothed: Vec<f64> = (0..batch).map(|_| smooth_real_label(hp, &mut rng)).collect();
            if flip {
                labels.extend(std::iter::repeat_n(0.0, batch));
                labels.extend(&smoothed);
            } else {
                labels.extend(&smoothed);
                labels.extend(std::iter::repeat_n(0.0, batch));
            }
            let d_out = discriminator.forward(&d_input, true)?;
            let (d_loss, d_grad) = bce_loss(&d_out, &label_tensor(&labels))?;
            if !d_loss.is_finite() {
                return Err(NnError::NanLoss { epoch, step, which: "discriminator".into() });
            }
            discriminator.backward(&d_grad)?;
            adam_d.step(&mut discriminator.params())?;

            // --- Generator update (non-saturating: push fakes toward 1).
            let z2 = sample_latent(batch, hp.latent_dim, &mut rng);
            let fake2 = generator.forward(&z2, true)?;
            let aug2 = BatchAffine::sample(&hp.augment, batch, h, w, &mut rng);
            let d_out2 = discriminator.forward(&aug2.forward(&fake2), true)?;
            let ones = label_tensor(&vec![1.0; batch]);
            let (g_loss, g_grad) = bce_loss(&d_out2, &ones)?;
            if !g_loss.is_finite() {
                return Err(NnError::NanLoss { epoch, step, which: "generator".into() });
            }
            let grad_at_d_input = discriminator.backward(&g_grad)?;
            let grad_at_fake = aug2.backward(&grad_at_d_input);
            generator.backward(&grad_at_fake)?;
            adam_g.step(&mut generator.params())?;

            d_sum += d_loss as f64;
            g_sum += g_loss as f64;
        }
        history.push(EpochLosses {
            epoch,
            d_loss: d_sum / steps_per_epoch as f64,
            g_loss: g_sum / steps_per_epoch as f64,
        });
        if let Some(dir) = checkpoint_dir {
            if hp.checkpoint_every > 0 && (epoch + 1) % hp.checkpoint_every == 0 {
                let path = dir.join(format!("ckpt_epoch_{:04}.pasyn", epoch + 1));
                save_gan_checkpoint(&path, &mut generator, &mut discriminator)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_gan_checkpoint(&dir.join("ckpt_final.pasyn"), &mut generator, &mut discriminator)?;
    }
    Ok(GanTrainResult { generator, discriminator, history })
}

/// Write the per-epoch loss history as `epoch,d_loss,g_loss`.
pub fn write_gan_history_csv(path: &Path, history: &[EpochLosses]) -> Result<()> {
    let mut body = String::from("epoch,d_loss,g_loss\n");
    for e in history {
        body.push_str(&format!("{},{},{}\n", e.epoch, e.d_loss, e.g_loss));
    }
    std::fs::write(path, body).map_err(|e| NnError::io(path, e))
}

fn gan_param_walk<'a>(
    generator: &'a mut Generator,
    discriminator: &'a mut Discriminator,
) -> Vec<Param<'a, f32>> {
    let mut params = Vec::new();
    for mut p in generator.params() {
        p.name = format!("generator.{}", p.name);
        params.push(p);
    }
    for mut p in discriminator.params() {
        p.name = format!("discriminator.{}", p.name);
        params.push(p);
    }
    params
}

pub fn save_gan_checkpoint(
    path: &Path,
    generator: &mut Generator,
    discriminator: &mut Discriminator,
) -> Result<()> {
    let arch = serde_json::json!({
        "model": "dcgan",
        "arch": generator.arch,
    });
    save_checkpoint(path, &arch, &gan_param_walk(generator, discriminator))
}

pub fn load_gan_checkpoint(path: &Path) -> Result<(Generator, Discriminator)> {
    let loaded = load_checkpoint(path)?;
    if loaded.arch["model"] != "dcgan" {
        return Err(NnError::Checkpoint(format!(
            "{}: expected a dcgan checkpoint, found {}",
            path.display(),
            loaded.arch["model"]
        )));
    }
    let arch: GanArch = serde_json::from_value(loaded.arch["arch"].clone())?;
    let hp = GanHyperparams {
        latent_dim: arch.latent_dim,
        gen_base_channels: arch.gen_base_channels,
        disc_base_channels: arch.disc_base_channels,
        ..Default::default()
    };
    let (mut generator, mut discriminator) =
        build_dcgan(&hp, (arch.mask_h, arch.mask_w), arch.spacing_mm, 0)?;
    apply_blobs(&loaded, &mut gan_param_walk(&mut generator, &mut discriminator))?;
    Ok((generator, discriminator))
}

/// Draw `n` masks from a trained generator (eval mode, argmax decoding).
pub fn sample_masks(generator: &mut Generator, n: usize, seed: u64) -> Result<Vec<LabelMap>> {
    let mut rng = Rng64::stream_named(seed, "sample-masks");
    let mut out = Vec::with_capacity(n);
    let chunk = 16usize;
    let mut remaining = n;
    while remaining > 0 {
        let take = remaining.min(chunk);
        let z = sample_latent(take, generator.arch.latent_dim, &mut rng);
        let probs = generator.forward(&z, false)?;
        for k in 0..take {
            let mut t = ClassTensor::zeros(probs.c, probs.h, probs.w);
            t.data.copy_from_slice(
                &probs.data[k * probs.c * probs.h * probs.w..(k + 1) * probs.c * probs.h * probs.w],
            );
            out.push(argmax_decode(&t, generator.arch.spacing_mm)?);
        }
        remaining -= take;
    }
    Ok(out)
}

/// Fraction of correct real/fake calls at threshold 0.5.
pub fn discriminator_accuracy(
    discriminator: &mut Discriminator,
    reals: &Tensor4<f32>,
    fakes: &Tensor4<f32>,
) -> Result<f64> {
    let on_real = discriminator.forward(reals, false)?;
    let on_fake = discriminator.forward(fakes, false)?;
    let correct = on_real.data.iter().filter(|&&p| p > 0.5).count()
        + on_fake.data.iter().filter(|&&p| p <= 0.5).count();
    Ok(correct as f64 / (on_real.len() + on_fake.len()) as f64)
}

/// Procedural disk-on-background toy masks (disk = artery on muscle), the
/// fixture for GAN convergence checks.
pub fn toy_disk_masks(n: usize, size: usize, seed: u64) -> Vec<LabelMap> {
    let mut rng = Rng64::stream_named(seed, "toy-disks");
    (0..n)
        .map(|_| {
            let mut map = LabelMap::filled(size, size, 0.16, TissueClass::MuscleBackground);
            let r = rng.uniform(2.5, size as f64 * 0.28);
            let margin = r.ceil() as i64 + 1;
            let cx = rng.int_range(margin, size as i64 - 1 - margin) as f64;
            let cz = rng.int_range(margin, size as i64 - 1 - margin) as f64;
            for z in 0..size {
                for x in 0..size {
                    let dx = x as f64 - cx;
                    let dz = z as f64 - cz;
                    if dx * dx + dz * dz <= r * r {
                        map.set(x, z, TissueClass::Artery);
                    }
                }
            }
            map
        })
        .collect()
}

/// Disk area in pixels (class-1 count) of one mask.
pub fn disk_area(mask: &LabelMap) -> usize {
    mask.class_histogram()[TissueClass::Artery.id() as usize]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_schedule_values() {
        let hp = GanHyperparams::default();
        assert_eq!(p_flip(&hp, 0), 0.2);
        assert!((p_flip(&hp, 500) - 0.055).abs() < 1e-12);
        assert_eq!(p_flip(&hp, 690), 0.0);
        assert_eq!(p_flip(&hp, 700), 0.0);
        let mut prev = f64::INFINITY;
        for epoch in 0..800 {
            let p = p_flip(&hp, epoch);
            assert!((0.0..=1.0).contains(&p));
            assert!(p <= prev);
            prev = p;
        }
    }

    #[test]
    fn smoothing_bounds_and_mean() {
        let hp = GanHyperparams::default();
        let mut rng = Rng64::new(8);
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| smooth_real_label(&hp, &mut rng)).collect();
        assert!(draws.iter().all(|&v| (0.7..=1.0).contains(&v)));
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.85).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn generator_shape_and_softmax_normalization() {
        let hp = GanHyperparams {
            latent_dim: 100,
            gen_base_channels: 16,
            disc_base_channels: 16,
            ..Default::default()
        };
        // Target 64 wide x 32 high, i.e. mask shape (H, W) = (32, 64).
        let (mut g, _) = build_dcgan(&hp, (32, 64), 0.16, 1).unwrap();
        let mut rng = Rng64::new(2);
        let z = sample_latent(2, 100, &mut rng);
        let out = g.forward(&z, true).unwrap();
        assert_eq!(out.shape(), (2, NUM_CLASSES, 32, 64));
        for n in 0..out.n {
            for y in 0..out.h {
                for x in 0..out.w {
                    let s: f32 = (0..out.c).map(|c| out.at(n, c, y, x)).sum();
                    assert!((s - 1.0).abs() < 1e-6, "softmax sum {s}");
                }
            }
        }
    }

    #[test]
    fn discriminator_outputs_probabilities() {
        let hp = GanHyperparams {
            gen_base_channels: 16,
            disc_base_channels: 16,
            ..Default::default()
        };
        let (_, mut d) = build_dcgan(&hp, (32, 32), 0.16, 3).unwrap();
        let mut rng = Rng64::new(5);
        let x = Tensor4::randn(3, NUM_CLASSES, 32, 32, 1.0, &mut rng);
        let out = d.forward(&x, true).unwrap();
        assert_eq!(out.shape(), (3, 1, 1, 1));
        assert!(out.data.iter().all(|&p| (0.0..1.0).contains(&p)));
    }

    #[test]
    fn non_power_of_two_shape_pads_and_crops() {
        let hp = GanHyperparams {
            gen_base_channels: 8,
            disc_base_channels: 8,
            ..Default::default()
        };
        let (mut g, mut d) = build_dcgan(&hp, (24, 40), 0.16, 1).unwrap();
        let mut rng = Rng64::new(1);
        let z = sample_latent(1, hp.latent_dim, &mut rng);
        let out = g.forward(&z, true).unwrap();
        assert_eq!((out.h, out.w), (24, 40));
        let score = d.forward(&out, true).unwrap();
        assert_eq!(score.shape(), (1, 1, 1, 1));
    }

    #[test]
    fn affine_batch_is_adjoint() {
        // <A x, y> == <x, A^T y> for the scatter/gather pair.
        let mut rng = Rng64::new(11);
        let params = AffineAugmentParams::default();
        let aug = BatchAffine::sample(&params, 2, 12, 10, &mut rng);
        let x = Tensor4::randn(2, 7, 12, 10, 1.0, &mut rng);
        let y = Tensor4::randn(2, 7, 12, 10, 1.0, &mut rng);
        // Zero the fill contribution: adjointness holds for the linear part,
        // so compare against forward with fill removed.
        let fwd = aug.forward(&x);
        let zero = Tensor4::zeros(2, 7, 12, 10);
        let fill_only = aug.forward(&zero);
        let linear: Vec<f32> = fwd.data.iter().zip(&fill_only.data).map(|(a, b)| a - b).collect();
        let lhs: f64 = linear.iter().zip(&y.data).map(|(&a, &b)| a as f64 * b as f64).sum();
        let back = aug.backward(&y);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn gan_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let hp = GanHyperparams {
            gen_base_channels: 8,
            disc_base_channels: 8,
            latent_dim: 16,
            ..Default::default()
        };
        let (mut g, mut d) = build_dcgan(&hp, (32, 32), 0.25, 9).unwrap();
        let path = dir.path().join("gan.pasyn");
        save_gan_checkpoint(&path, &mut g, &mut d).unwrap();
        let (mut g2, _) = load_gan_checkpoint(&path).unwrap();
        let mut rng = Rng64::new(3);
        let z = sample_latent(2, 16, &mut rng);
        let a = g.forward(&z, false).unwrap();
        let b = g2.forward(&z, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(g2.arch.spacing_mm, 0.25);
    }

    #[test]
    fn sampled_masks_have_valid_classes() {
        let hp = GanHyperparams {
            gen_base_channels: 8,
            disc_base_channels: 8,
            latent_dim: 12,
            ..Default::default()
        };
        let (mut g, _) = build_dcgan(&hp, (16, 16), 0.16, 2).unwrap();
        let masks = sample_masks(&mut g, 5, 7).unwrap();
        assert_eq!(masks.len(), 5);
        for m in &masks {
            assert!(m.data.iter().all(|&v| (1..=7).contains(&v)));
        }
        let again = sample_masks(&mut g, 5, 7).unwrap();
        assert_eq!(masks, again);
    }

    #[test]
    fn toy_disks_have_one_disk_class() {
        let masks = toy_disk_masks(20, 32, 3);
        assert_eq!(masks.len(), 20);
        for m in &masks {
            let hist = m.class_histogram();
            assert!(hist[1] > 0, "disk present");
            assert_eq!(hist[1] + hist[3], 32 * 32);
        }
        // Areas vary.
        let areas: std::collections::BTreeSet<usize> = masks.iter().map(disk_area).collect();
        assert!(areas.len() > 5);
    }

    #[test]
    fn one_epoch_updates_both_networks() {
        let masks = toy_disk_masks(6, 16, 1);
        let hp = GanHyperparams {
            max_epochs: 1,
            batch_size: 3,
            gen_base_channels: 8,
            disc_base_channels: 8,
            latent_dim: 12,
            ..Default::default()
        };
        let (mut g0, mut d0) = build_dcgan(&hp, (16, 16), 0.16, 5).unwrap();
        let before_g: Vec<Vec<f32>> = g0.params().iter().map(|p| p.value.clone()).collect();
        let before_d: Vec<Vec<f32>> = d0.params().iter().map(|p| p.value.clone()).collect();

        let mut result = train_gan(&masks, &hp, 5, None).unwrap();
        assert_eq!(result.history.len(), 1);
        assert!(result.history[0].d_loss.is_finite());
        assert!(result.history[0].g_loss.is_finite());

        // All parameters finite, and at least one changed in each network.
        let after_g: Vec<Vec<f32>> = result.generator.params().iter().map(|p| p.value.clone()).collect();
        let after_d: Vec<Vec<f32>> = result.discriminator.params().iter().map(|p| p.value.clone()).collect();
        let finite = |vs: &[Vec<f32>]| vs.iter().flatten().all(|v| v.is_finite());
        assert!(finite(&after_g) && finite(&after_d));
        assert!(before_g != after_g, "generator unchanged");
        assert!(before_d != after_d, "discriminator unchanged");
    }

    #[test]
    fn training_is_deterministic() {
        let masks = toy_disk_masks(6, 16, 2);
        let hp = GanHyperparams {
            max_epochs: 2,
            batch_size: 3,
            gen_base_channels: 8,
            disc_base_channels: 8,
            latent_dim: 12,
            ..Default::default()
        };
        let a = train_gan(&masks, &hp, 9, None).unwrap();
        let b = train_gan(&masks, &hp, 9, None).unwrap();
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn discriminator_separates_trivial_fixture() {
        // All-artery vs all-muscle masks, augmentation off: the
        // discriminator alone must reach >= 95% accuracy within 200 steps.
        let hp = GanHyperparams {
            gen_base_channels: 8,
            disc_base_channels: 8,
            latent_dim: 8,
            ..Default::default()
        };
        let (_, mut d) = build_dcgan(&hp, (16, 16), 0.16, 4).unwrap();
        let class1 = one_hot(&LabelMap::filled(16, 16, 0.16, TissueClass::Artery)).unwrap();
        let class3 = one_hot(&LabelMap::filled(16, 16, 0.16, TissueClass::MuscleBackground)).unwrap();
        let reals = stack_class_tensors(&vec![&class1; 4]);
        let fakes = stack_class_tensors(&vec![&class3; 4]);
        let joint = stack_batches(&reals, &fakes);
        let labels = label_tensor(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let mut adam = Adam::new(2e-4, 0.5);
        let mut reached = None;
        for step in 0..200 {
            let out = d.forward(&joint, true).unwrap();
            let (_, grad) = bce_loss(&out, &labels).unwrap();
            d.backward(&grad).unwrap();
            adam.step(&mut d.params()).unwrap();
            let acc = discriminator_accuracy(&mut d, &reals, &fakes).unwrap();
            if acc >= 0.95 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "discriminator never separated the fixture");
    }
}
