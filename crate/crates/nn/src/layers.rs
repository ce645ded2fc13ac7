//! Network layers with hand-derived backward passes.
//!
//! Every layer caches what its backward pass needs during forward and
//! overwrites its parameter gradients on each backward call. Convolutions
//! parallelize over independent output slices, so results are bit-identical
//! for any thread count.

use rayon::prelude::*;

use pasyn_core::Rng64;

use crate::error::{NnError, Result};
use crate::tensor::{Scalar, Tensor4};

/// Mutable view of one named parameter and its gradient.
pub struct Param<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut Vec<T>,
    pub grad: &'a mut Vec<T>,
}

pub trait Layer<T: Scalar>: Send {
    fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>>;
    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>>;
    fn params(&mut self) -> Vec<Param<'_, T>> {
        Vec::new()
    }
    fn kind(&self) -> &'static str;
}

/// Anything trainable end to end: forward, backward, and a parameter walk.
pub trait Model<T: Scalar> {
    fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>>;
    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>>;
    fn params(&mut self) -> Vec<Param<'_, T>>;
}

fn shape_err(kind: &str, detail: String) -> NnError {
    NnError::ShapeMismatch(format!("{kind}: {detail}"))
}

// ---------------------------------------------------------------------------
// Conv2d

pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Tensor4<T>, // (cout, cin, kh, kw)
    pub bias: Vec<T>,
    pub weight_grad: Tensor4<T>,
    pub bias_grad: Vec<T>,
    cached_input: Option<Tensor4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng64) -> Self {
        Self::new_rect(cin, cout, (k, k), stride, pad, rng)
    }

    pub fn new_rect(
        cin: usize,
        cout: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
        rng: &mut Rng64,
    ) -> Self {
        assert!(stride >= 1);
        Conv2d {
            cin,
            cout,
            kh,
            kw,
            stride,
            pad,
            weight: Tensor4::randn(cout, cin, kh, kw, 0.02, rng),
            bias: vec![T::ZERO; cout],
            weight_grad: Tensor4::zeros(cout, cin, kh, kw),
            bias_grad: vec![T::ZERO; cout],
            cached_input: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let he = h + 2 * self.pad;
        let we = w + 2 * self.pad;
        if he < self.kh || we < self.kw {
            return Err(shape_err("conv2d", format!("input {h}x{w} smaller than kernel")));
        }
        Ok(((he - self.kh) / self.stride + 1, (we - self.kw) / self.stride + 1))
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor4<T>, _train: bool) -> Result<Tensor4<T>> {
        if x.c != self.cin {
            return Err(shape_err("conv2d", format!("expected {} input channels, got {}", self.cin, x.c)));
        }
        let (oh, ow) = self.out_hw(x.h, x.w)?;
        let mut out = Tensor4::zeros(x.n, self.cout, oh, ow);
        let (stride, pad, kh, kw) = (self.stride, self.pad, self.kh, self.kw);
        let (cin, cout) = (self.cin, self.cout);
        let weight = &self.weight.data;
        let bias = &self.bias;
        out.data
            .par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(nc, plane)| {
                let n = nc / cout;
                let co = nc % cout;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            let xplane = x.plane(n, ci);
                            let wbase = ((co * cin + ci) * kh) * kw;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy as usize >= x.h {
                                    continue;
                                }
                                let xrow = iy as usize * x.w;
                                let wrow = wbase + ky * kw;
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix as usize >= x.w {
                                        continue;
                                    }
                                    acc += xplane[xrow + ix as usize] * weight[wrow + kx];
                                }
                            }
                        }
                        plane[oy * ow + ox] = acc;
                    }
                }
            });
        self.cached_input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or(NnError::BackwardBeforeForward("conv2d"))?;
        let (oh, ow) = (gy.h, gy.w);
        let (stride, pad, kh, kw) = (self.stride, self.pad, self.kh, self.kw);
        let (cin, cout) = (self.cin, self.cout);
        let weight = &self.weight.data;

        // Input gradient: scatter per sample (samples are independent).
        let mut gx = Tensor4::zeros(x.n, x.c, x.h, x.w);
        let plane_in = x.h * x.w;
        gx.data
            .par_chunks_mut(cin * plane_in)
            .enumerate()
            .for_each(|(n, gx_n)| {
                for co in 0..cout {
                    let gplane = gy.plane(n, co);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gplane[oy * ow + ox];
                            for ci in 0..cin {
                                let wbase = ((co * cin + ci) * kh) * kw;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy as usize >= x.h {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix as usize >= x.w {
                                            continue;
                                        }
                                        gx_n[ci * plane_in + iy as usize * x.w + ix as usize] +=
                                            g * weight[wbase + ky * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            });

        // Weight/bias gradients: gather per output channel.
        let wplane = cin * kh * kw;
        let mut bias_grad = vec![T::ZERO; cout];
        self.weight_grad
            .data
            .par_chunks_mut(wplane)
            .zip(bias_grad.par_iter_mut())
            .enumerate()
            .for_each(|(co, (gw, gb))| {
                gw.iter_mut().for_each(|v| *v = T::ZERO);
                for n in 0..x.n {
                    let gplane = gy.plane(n, co);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gplane[oy * ow + ox];
                            *gb += g;
                            for ci in 0..cin {
                                let xplane = x.plane(n, ci);
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy as usize >= x.h {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix as usize >= x.w {
                                            continue;
                                        }
                                        gw[(ci * kh + ky) * kw + kx] +=
                                            g * xplane[iy as usize * x.w + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        self.bias_grad = bias_grad;
        Ok(gx)
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        vec![
            Param {
                name: "weight".into(),
                shape: vec![self.cout, self.cin, self.kh, self.kw],
                value: &mut self.weight.data,
                grad: &mut self.weight_grad.data,
            },
            Param {
                name: "bias".into(),
                shape: vec![self.cout],
                value: &mut self.bias,
                grad: &mut self.bias_grad,
            },
        ]
    }

    fn kind(&self) -> &'static str {
        "conv2d"
    }
}

// ---------------------------------------------------------------------------
// TransposedConv2d

/// Transposed convolution: the adjoint of [`Conv2d`] with the same stride,
/// padding, and (reinterpreted) weight buffer.
pub struct TransposedConv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Tensor4<T>, // (cin, cout, kh, kw)
    pub bias: Vec<T>,
    pub weight_grad: Tensor4<T>,
    pub bias_grad: Vec<T>,
    cached_input: Option<Tensor4<T>>,
}

impl<T: Scalar> TransposedConv2d<T> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng64) -> Self {
        Self::new_rect(cin, cout, (k, k), stride, pad, rng)
    }

    pub fn new_rect(
        cin: usize,
        cout: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
        rng: &mut Rng64,
    ) -> Self {
        assert!(stride >= 1);
        TransposedConv2d {
            cin,
            cout,
            kh,
            kw,
            stride,
            pad,
            weight: Tensor4::randn(cin, cout, kh, kw, 0.02, rng),
            bias: vec![T::ZERO; cout],
            weight_grad: Tensor4::zeros(cin, cout, kh, kw),
            bias_grad: vec![T::ZERO; cout],
            cached_input: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = (h - 1) * self.stride + self.kh;
        let ow = (w - 1) * self.stride + self.kw;
        if oh < 2 * self.pad || ow < 2 * self.pad {
            return Err(shape_err("tconv2d", "padding exceeds output".into()));
        }
        Ok((oh - 2 * self.pad, ow - 2 * self.pad))
    }
}

impl<T: Scalar> Layer<T> for TransposedConv2d<T> {
    fn forward(&mut self, x: &Tensor4<T>, _train: bool) -> Result<Tensor4<T>> {
        if x.c != self.cin {
            return Err(shape_err("tconv2d", format!("expected {} input channels, got {}", self.cin, x.c)));
        }
        let (oh, ow) = self.out_hw(x.h, x.w)?;
        let mut out = Tensor4::zeros(x.n, self.cout, oh, ow);
        let (stride, pad, kh, kw) = (self.stride, self.pad, self.kh, self.kw);
        let (cin, cout) = (self.cin, self.cout);
        let weight = &self.weight.data;
        let bias = &self.bias;
        // Gather form: for output pixel oy, source row iy satisfies
        // oy = iy*stride - pad + ky  =>  iy = (oy + pad - ky) / stride.
        out.data
            .par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(nc, plane)| {
                let n = nc / cout;
                let co = nc % cout;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ky in 0..kh {
                            let ty = oy as isize + pad as isize - ky as isize;
                            if ty < 0 || ty % stride as isize != 0 {
                                continue;
                            }
                            let iy = (ty / stride as isize) as usize;
                            if iy >= x.h {
                                continue;
                            }
                            for kx in 0..kw {
                                let tx = ox as isize + pad as isize - kx as isize;
                                if tx < 0 || tx % stride as isize != 0 {
                                    continue;
                                }
                                let ix = (tx / stride as isize) as usize;
                                if ix >= x.w {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.at(n, ci, iy, ix)
                                        * weight[((ci * cout + co) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        plane[oy * ow + ox] = acc;
                    }
                }
            });
        self.cached_input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or(NnError::BackwardBeforeForward("tconv2d"))?;
        let (stride, pad, kh, kw) = (self.stride, self.pad, self.kh, self.kw);
        let (cin, cout) = (self.cin, self.cout);
        let weight = &self.weight.data;

        // Input gradient is an ordinary convolution of gy with the weight.
        let mut gx = Tensor4::zeros(x.n, x.c, x.h, x.w);
        gx.data
            .par_chunks_mut(x.h * x.w)
            .enumerate()
            .for_each(|(nc, plane)| {
                let n = nc / cin;
                let ci = nc % cin;
                for iy in 0..x.h {
                    for ix in 0..x.w {
                        let mut acc = T::ZERO;
                        for co in 0..cout {
                            let gplane = gy.plane(n, co);
                            for ky in 0..kh {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                if oy < 0 || oy as usize >= gy.h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ox = (ix * stride + kx) as isize - pad as isize;
                                    if ox < 0 || ox as usize >= gy.w {
                                        continue;
                                    }
                                    acc += gplane[oy as usize * gy.w + ox as usize]
                                        * weight[((ci * cout + co) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        plane[iy * x.w + ix] = acc;
                    }
                }
            });

        // Weight gradient, gathered per input channel.
        let wplane = cout * kh * kw;
        self.weight_grad
            .data
            .par_chunks_mut(wplane)
            .enumerate()
            .for_each(|(ci, gw)| {
                gw.iter_mut().for_each(|v| *v = T::ZERO);
                for n in 0..x.n {
                    let xplane = x.plane(n, ci);
                    for co in 0..cout {
                        let gplane = gy.plane(n, co);
                        for iy in 0..x.h {
                            for ix in 0..x.w {
                                let xv = xplane[iy * x.w + ix];
                                for ky in 0..kh {
                                    let oy = (iy * stride + ky) as isize - pad as isize;
                                    if oy < 0 || oy as usize >= gy.h {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ox = (ix * stride + kx) as isize - pad as isize;
                                        if ox < 0 || ox as usize >= gy.w {
                                            continue;
                                        }
                                        gw[(co * kh + ky) * kw + kx] +=
                                            xv * gplane[oy as usize * gy.w + ox as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            });

        let mut bias_grad = vec![T::ZERO; cout];
        bias_grad.par_iter_mut().enumerate().for_each(|(co, gb)| {
            for n in 0..gy.n {
                for &g in gy.plane(n, co) {
                    *gb += g;
                }
            }
        });
        self.bias_grad = bias_grad;
        Ok(gx)
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        vec![
            Param {
                name: "weight".into(),
                shape: vec![self.cin, self.cout, self.kh, self.kw],
                value: &mut self.weight.data,
                grad: &mut self.weight_grad.data,
            },
            Param {
                name: "bias".into(),
                shape: vec![self.cout],
                value: &mut self.bias,
                grad: &mut self.bias_grad,
            },
        ]
    }

    fn kind(&self) -> &'static str {
        "tconv2d"
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d

pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub gamma_grad: Vec<T>,
    pub beta_grad: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    normalized: Tensor4<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize, rng: &mut Rng64) -> Self {
        BatchNorm2d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: (0..channels).map(|_| T::from_f64(1.0 + rng.normal() * 0.02)).collect(),
            beta: vec![T::ZERO; channels],
            gamma_grad: vec![T::ZERO; channels],
            beta_grad: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            cache: None,
        }
    }

    /// Per-channel batch mean/variance (biased), pre-affine normalization.
    pub fn batch_stats(x: &Tensor4<T>, c: usize) -> (f64, f64) {
        let count = (x.n * x.h * x.w) as f64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for n in 0..x.n {
            for &v in x.plane(n, c) {
                let v = v.to_f64();
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / count;
        (mean, (sumsq / count - mean * mean).max(0.0))
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        if x.c != self.channels {
            return Err(shape_err("batchnorm2d", format!("expected {} channels, got {}", self.channels, x.c)));
        }
        let mut out = Tensor4::zeros(x.n, x.c, x.h, x.w);
        let mut normalized = Tensor4::zeros(x.n, x.c, x.h, x.w);
        let mut inv_std = vec![T::ZERO; x.c];
        let count = (x.n * x.h * x.w) as f64;
        for c in 0..x.c {
            let (mean, var) = if train {
                let (m, v) = Self::batch_stats(x, c);
                let momentum = self.momentum;
                let unbiased = if count > 1.0 { v * count / (count - 1.0) } else { v };
                self.running_mean[c] = T::from_f64(
                    (1.0 - momentum) * self.running_mean[c].to_f64() + momentum * m,
                );
                self.running_var[c] = T::from_f64(
                    (1.0 - momentum) * self.running_var[c].to_f64() + momentum * unbiased,
                );
                (m, v)
            } else {
                (self.running_mean[c].to_f64(), self.running_var[c].to_f64())
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = T::from_f64(istd);
            let gamma = self.gamma[c];
            let beta = self.beta[c];
            let mean_t = T::from_f64(mean);
            let istd_t = T::from_f64(istd);
            for n in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let i = x.idx(n, c, y, xx);
                        let nv = (x.data[i] - mean_t) * istd_t;
                        normalized.data[i] = nv;
                        out.data[i] = gamma * nv + beta;
                    }
                }
            }
        }
        self.cache = Some(BnCache { normalized, inv_std, train });
        Ok(out)
    }

    fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(NnError::BackwardBeforeForward("batchnorm2d"))?;
        let xhat = &cache.normalized;
        if gy.shape() != xhat.shape() {
            return Err(shape_err("batchnorm2d", "grad shape".into()));
        }
        let mut gx = Tensor4::zeros(gy.n, gy.c, gy.h, gy.w);
        let count = (gy.n * gy.h * gy.w) as f64;
        for c in 0..gy.c {
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for n in 0..gy.n {
                for y in 0..gy.h {
                    for xx in 0..gy.w {
                        let i = gy.idx(n, c, y, xx);
                        let g = gy.data[i].to_f64();
                        sum_g += g;
                        sum_gx += g * xhat.data[i].to_f64();
                    }
                }
            }
            self.beta_grad[c] = T::from_f64(sum_g);
            self.gamma_grad[c] = T::from_f64(sum_gx);
            let gamma = self.gamma[c].to_f64();
            let istd = cache.inv_std[c].to_f64();
            if cache.train {
                let mean_g = sum_g / count;
                let mean_gx = sum_gx / count;
                for n in 0..gy.n {
                    for y in 0..gy.h {
                        for xx in 0..gy.w {
                            let i = gy.idx(n, c, y, xx);
                            let g = gy.data[i].to_f64();
                            let xh = xhat.data[i].to_f64();
                            gx.data[i] = T::from_f64(gamma * istd * (g - mean_g - xh * mean_gx));
                        }
                    }
                }
            } else {
                for n in 0..gy.n {
                    for y in 0..gy.h {
                        for xx in 0..gy.w {
                            let i = gy.idx(n, c, y, xx);
                            gx.data[i] = T::from_f64(gy.data[i].to_f64() * gamma * istd);
                        }
                    }
                }
            }
        }
        Ok(gx)
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        vec![
            Param {
                name: "gamma".into(),
                shape: vec![self.channels],
                value: &mut self.gamma,
                grad: &mut self.gamma_grad,
            },
            Param {
                name: "beta".into(),
                shape: vec![self.channels],
                value: &mut self.beta,
                grad: &mut self.beta_grad,
            },
        ]
    }

    fn kind(&self) -> &'static str {
        "batchnorm2d"
    }
}

// ---------------------------------------------------------------------------
// Pointwise activations

pub struct Relu<T> {
    cached_input: Option<Tensor4<T>>,
}

impl<T> Relu<T> {
    pub fn new() -> Self {
        Relu { cached_input: None }
    }
}

impl<T> Default for Relu<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor4<T>, _train: bool) -> Result<Tensor4<T>> {
        self.cached_input = Some(x.clone());
        Ok(x.map(|v| v.maximum(T::ZERO)))
    }

    fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or(NnError::BackwardBeforeForward("relu"))?;
        let mut gx = gy.clone();
        for (g, v) in gx.data.iter_mut().zip(&x.data) {
            if *v <= T::ZERO {
                *g = T::ZERO;
            }
        }
        Ok(gx)
    }

    fn kind(&self) -> &'static str {
        "relu"
    }
}

pub struct LeakyRelu<T> {
    pub alpha: f64,
    cached_input: Option<Tensor4<T>>,
}

impl<T> LeakyRelu<T> {
    pub fn new(alpha: f64) -> Self {
        LeakyRelu { alpha, cached_input: None }
    }
}

impl<T: Scalar> Layer<T> for LeakyRelu<T> {
    fn forward(&mut self, x: &Tensor4<T>, _train: bool) -> Result<Tensor4<T>> {
        self.cached_input = Some(x.clone());
        let a = T::from_f64(self.alpha);
        Ok(x.map(|v| if v > T::ZERO { v } else { a * v }))
    }

    fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or(NnError::BackwardBeforeForward("leaky-relu"))?;
        let a = T::from_f64(self.alpha);
        let mut gx = gy.clone();
        for (g, v) in gx.data.iter_mut().zip(&x.data) {
            if *v <= T::ZERO {
                *g *= a;
            }
        }
        Ok(gx)
    }

    fn kind(&self) -> &'static str {
        "leaky-relu"
    }
}

pub struct Tanh<T> {
    cached_output: Option<Tensor4<T>>,
}

impl<T> Tanh<T> {
    pub fn new() -> Self {
        Tanh { cached_output: None }
    }
}

impl<T> Default for Tanh<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Layer<T> for Tanh<T> {
    fn forward(&mut self, x: &Tensor4<T>, _train: bool) -> Result<Tensor4<T>> {
        let out = x.map(|v| v.tanh());
        self.cached_output = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = self
            .cached_output
            .as_ref()
            .ok_or(NnError::BackwardBeforeForward("tanh"))?;
        let mut gx = gy.clone();
        for (g, v) in gx.data.iter_mut().zip(&y.data) {
            *g *= T::ONE - *v * *v;
        }
        Ok(gx)
    }

    fn kind(&self) -> &'static str {
        "tanh"
    }
}

pub struct Sigmoid<T> {
    cached_output: Option<Tensor4<T>>,
}

impl<T> Sigmoid<T> {
    pub fn new() -> Self {
        Sigmoid { cached_output: None }
    }
}

impl<T> Default for Sigmoid<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Layer<T> for Sigmoid<T> {
    fn forward(&mut self, x: &Tensor4<T>, _train: bool) -> Result<Tensor4<T>> {
        let out = x.map(|v| T::ONE / (T::ONE + (-v).exp()));
        self.cached_output = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = self
            .cached_output
            .as_ref()
            .ok_or(NnError::BackwardBeforeForward("sigmoid"))?;
        let mut gx = gy.clone();
        for (g, v) in gx.data.iter_mut().zip(&y.data) {
            *g *= *v * (T::ONE - *v);
        }
        Ok(gx)
    }

    fn kind(&self) -> &'static str {
        "sigmoid"
    }
}

// ---------------------------------------------------------------------------
// MaxPool2x2 / UpsampleNearest2x

pub struct MaxPool2x2 {
    argmax: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2x2 {
    pub fn new() -> Self {
        MaxPool2x2 { argmax: None }
    }
}

impl Default for MaxPool2x2 {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Layer<T> for MaxPool2x2 {
    fn forward(&mut self, x: &Tensor4<T>, _train: bool) -> Result<Tensor4<T>> {
        if x.h % 2 != 0 || x.w % 2 != 0 {
            return Err(shape_err("maxpool2x2", format!("odd input {}x{}", x.h, x.w)));
        }
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
        let mut argmax = vec![0usize; out.len()];
        for n in 0..x.n {
            for c in 0..x.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_i = x.idx(n, c, 2 * oy, 2 * ox);
                        let mut best_v = x.data[best_i];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = x.idx(n, c, 2 * oy + dy, 2 * ox + dx);
                            if x.data[i] > best_v {
                                best_v = x.data[i];
                                best_i = i;
                            }
                        }
                        let o = out.idx(n, c, oy, ox);
                        out.data[o] = best_v;
                        argmax[o] = best_i;
                    }
                }
            }
        }
        self.argmax = Some((argmax, x.shape()));
        Ok(out)
    }

    fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (argmax, (n, c, h, w)) = self
            .argmax
            .as_ref()
            .ok_or(NnError::BackwardBeforeForward("maxpool2x2"))?;
        let mut gx = Tensor4::zeros(*n, *c, *h, *w);
        for (o, &i) in argmax.iter().enumerate() {
            gx.data[i] += gy.data[o];
        }
        Ok(gx)
    }

    fn kind(&self) -> &'static str {
        "maxpool2x2"
    }
}

pub struct UpsampleNearest2x {
    in_shape: Option<(usize, usize, usize, usize)>,
}

impl UpsampleNearest2x {
    pub fn new() -> Self {
        UpsampleNearest2x { in_shape: None }
    }
}

impl Default for UpsampleNearest2x {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Layer<T> for UpsampleNearest2x {
    fn forward(&mut self, x: &Tensor4<T>, _train: bool) -> Result<Tensor4<T>> {
        let mut out = Tensor4::zeros(x.n, x.c, x.h * 2, x.w * 2);
        for n in 0..x.n {
            for c in 0..x.c {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let v = x.at(n, c, y, xx);
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let o = out.idx(n, c, 2 * y + dy, 2 * xx + dx);
                            out.data[o] = v;
                        }
                    }
                }
            }
        }
        self.in_shape = Some(x.shape());
        Ok(out)
    }

    fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (n, c, h, w) = self
            .in_shape
            .ok_or(NnError::BackwardBeforeForward("upsample-nearest2x"))?;
        if gy.h != 2 * h || gy.w != 2 * w {
            return Err(shape_err("upsample-nearest2x", "grad shape".into()));
        }
        let mut gx = Tensor4::zeros(n, c, h, w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = T::ZERO;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            acc += gy.at(ni, ci, 2 * y + dy, 2 * xx + dx);
                        }
                        let i = gx.idx(ni, ci, y, xx);
                        gx.data[i] = acc;
                    }
                }
            }
        }
        Ok(gx)
    }

    fn kind(&self) -> &'static str {
        "upsample-nearest2x"
    }
}

// ---------------------------------------------------------------------------
// ChannelSoftmax

/// Per-pixel softmax over channels (the generator's output head).
pub struct ChannelSoftmax<T> {
    cached_output: Option<Tensor4<T>>,
}

impl<T> ChannelSoftmax<T> {
    pub fn new() -> Self {
        ChannelSoftmax { cached_output: None }
    }
}

impl<T> Default for ChannelSoftmax<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Layer<T> for ChannelSoftmax<T> {
    fn forward(&mut self, x: &Tensor4<T>, _train: bool) -> Result<Tensor4<T>> {
        let mut out = Tensor4::zeros(x.n, x.c, x.h, x.w);
        for n in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut max = x.at(n, 0, y, xx);
                    for c in 1..x.c {
                        max = max.maximum(x.at(n, c, y, xx));
                    }
                    let mut sum = T::ZERO;
                    for c in 0..x.c {
                        let e = (x.at(n, c, y, xx) - max).exp();
                        out.data[out.idx(n, c, y, xx)] = e;
                        sum += e;
                    }
                    for c in 0..x.c {
                        let i = out.idx(n, c, y, xx);
                        out.data[i] /= sum;
                    }
                }
            }
        }
        self.cached_output = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = self
            .cached_output
            .as_ref()
            .ok_or(NnError::BackwardBeforeForward("channel-softmax"))?;
        let mut gx = Tensor4::zeros(gy.n, gy.c, gy.h, gy.w);
        for n in 0..gy.n {
            for py in 0..gy.h {
                for px in 0..gy.w {
                    let mut dot = T::ZERO;
                    for c in 0..gy.c {
                        dot += gy.at(n, c, py, px) * y.at(n, c, py, px);
                    }
                    for c in 0..gy.c {
                        let i = gx.idx(n, c, py, px);
                        gx.data[i] = y.at(n, c, py, px) * (gy.at(n, c, py, px) - dot);
                    }
                }
            }
        }
        Ok(gx)
    }

    fn kind(&self) -> &'static str {
        "channel-softmax"
    }
}

// ---------------------------------------------------------------------------
// Crop / zero-pad (used when mask shapes are not power-of-two friendly)

/// Center-crop to a target (H, W); backward zero-pads.
pub struct CropTo {
    pub th: usize,
    pub tw: usize,
    in_shape: Option<(usize, usize, usize, usize)>,
}

impl CropTo {
    pub fn new(th: usize, tw: usize) -> Self {
        CropTo { th, tw, in_shape: None }
    }

    fn offsets(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - self.th) / 2, (w - self.tw) / 2)
    }
}

impl<T: Scalar> Layer<T> for CropTo {
    fn forward(&mut self, x: &Tensor4<T>, _train: bool) -> Result<Tensor4<T>> {
        if x.h < self.th || x.w < self.tw {
            return Err(shape_err("crop", format!("input {}x{} below target {}x{}", x.h, x.w, self.th, self.tw)));
        }
        let (oy, ox) = self.offsets(x.h, x.w);
        let mut out = Tensor4::zeros(x.n, x.c, self.th, self.tw);
        for n in 0..x.n {
            for c in 0..x.c {
                for y in 0..self.th {
                    for xx in 0..self.tw {
                        let o = out.idx(n, c, y, xx);
                        out.data[o] = x.at(n, c, y + oy, xx + ox);
                    }
                }
            }
        }
        self.in_shape = Some(x.shape());
        Ok(out)
    }

    fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (n, c, h, w) = self
            .in_shape
            .ok_or(NnError::BackwardBeforeForward("crop"))?;
        let (oy, ox) = self.offsets(h, w);
        let mut gx = Tensor4::zeros(n, c, h, w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..self.th {
                    for xx in 0..self.tw {
                        let i = gx.idx(ni, ci, y + oy, xx + ox);
                        gx.data[i] = gy.at(ni, ci, y, xx);
                    }
                }
            }
        }
        Ok(gx)
    }

    fn kind(&self) -> &'static str {
        "crop"
    }
}

/// Zero-pad up to a target (H, W); backward crops.
pub struct PadTo {
    pub th: usize,
    pub tw: usize,
    in_shape: Option<(usize, usize, usize, usize)>,
}

impl PadTo {
    pub fn new(th: usize, tw: usize) -> Self {
        PadTo { th, tw, in_shape: None }
    }
}

impl<T: Scalar> Layer<T> for PadTo {
    fn forward(&mut self, x: &Tensor4<T>, _train: bool) -> Result<Tensor4<T>> {
        if x.h > self.th || x.w > self.tw {
            return Err(shape_err("pad", format!("input {}x{} above target {}x{}", x.h, x.w, self.th, self.tw)));
        }
        let (oy, ox) = ((self.th - x.h) / 2, (self.tw - x.w) / 2);
        let mut out = Tensor4::zeros(x.n, x.c, self.th, self.tw);
        for n in 0..x.n {
            for c in 0..x.c {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let o = out.idx(n, c, y + oy, xx + ox);
                        out.data[o] = x.at(n, c, y, xx);
                    }
                }
            }
        }
        self.in_shape = Some(x.shape());
        Ok(out)
    }

    fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (n, c, h, w) = self.in_shape.ok_or(NnError::BackwardBeforeForward("pad"))?;
        let (oy, ox) = ((self.th - h) / 2, (self.tw - w) / 2);
        let mut gx = Tensor4::zeros(n, c, h, w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let i = gx.idx(ni, ci, y, xx);
                        gx.data[i] = gy.at(ni, ci, y + oy, xx + ox);
                    }
                }
            }
        }
        Ok(gx)
    }

    fn kind(&self) -> &'static str {
        "pad"
    }
}

// ---------------------------------------------------------------------------
// Channel concat / split (the U-Net skip connection primitive)

/// Concatenate two tensors along channels.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if a.n != b.n || a.h != b.h || a.w != b.w {
        return Err(shape_err("concat", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = Tensor4::zeros(a.n, a.c + b.c, a.h, a.w);
    let plane = a.h * a.w;
    for n in 0..a.n {
        for c in 0..a.c {
            let start = out.idx(n, c, 0, 0);
            out.data[start..start + plane].copy_from_slice(a.plane(n, c));
        }
        for c in 0..b.c {
            let start = out.idx(n, a.c + c, 0, 0);
            out.data[start..start + plane].copy_from_slice(b.plane(n, c));
        }
    }
    Ok(out)
}

/// Split a tensor into its first `ca` and remaining channels (the adjoint
/// of [`concat_channels`]).
pub fn split_channels<T: Scalar>(x: &Tensor4<T>, ca: usize) -> (Tensor4<T>, Tensor4<T>) {
    assert!(ca <= x.c, "split point beyond channel count");
    let cb = x.c - ca;
    let mut a = Tensor4::zeros(x.n, ca, x.h, x.w);
    let mut b = Tensor4::zeros(x.n, cb, x.h, x.w);
    let plane = x.h * x.w;
    for n in 0..x.n {
        for c in 0..ca {
            let start = a.idx(n, c, 0, 0);
            a.data[start..start + plane].copy_from_slice(x.plane(n, c));
        }
        for c in 0..cb {
            let start = b.idx(n, c, 0, 0);
            b.data[start..start + plane].copy_from_slice(x.plane(n, ca + c));
        }
    }
    (a, b)
}

// ---------------------------------------------------------------------------
// Sequential

pub struct Sequential<T> {
    pub layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Box<dyn Layer<T>>>) -> Self {
        Sequential { layers }
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, train)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut cur = gy.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let kind = layer.kind();
            for mut p in layer.params() {
                p.name = format!("{i}.{kind}.{}", p.name);
                out.push(p);
            }
        }
        out
    }

    fn kind(&self) -> &'static str {
        "sequential"
    }
}

impl<T: Scalar> Model<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        Layer::forward(self, x, train)
    }

    fn backward(&mut self, gy: &Tensor4<T>) -> Result<Tensor4<T>> {
        Layer::backward(self, gy)
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        Layer::params(self)
    }
}
