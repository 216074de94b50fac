//! Progressive denoising: a bootstrapped high-frequency noise estimate refined by a
//! small residual CNN, applied over a fixed number of stages with shared weights.
//!
//! Stage `k` computes
//!
//! ```text
//! N^_k    = (R_0 - C(R_0) + N_gs) / 2      if k == 0
//!         =  R_k - C(R_k)                  otherwise
//! N_{k+1} = N^_k - F(N^_k)
//! R_{k+1} = R_0 - N_{k+1}
//! ```
//!
//! where `C` is a 5x5 Gaussian blur and `F` is conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv3x3.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{
    convolve_separable, convolve_separable_adjoint, gaussian_kernel_with_radius, Image, Kernel1D,
};

pub const STAGES: usize = 3;
pub const HIDDEN: usize = 16;
pub const BLUR_SIGMA: f64 = 1.0;
pub const BLUR_RADIUS: usize = 2;

/// Layers with fewer multiply-adds than this run on the calling thread.
const PAR_MIN_WORK: usize = 1 << 16;

/// 3x3 convolution with edge-replicated input, weights laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        ConvLayer {
            in_ch,
            out_ch,
            weights: vec![0.0; out_ch * in_ch * 9],
            bias: vec![0.0; out_ch],
        }
    }

    #[inline]
    fn w(&self, o: usize, i: usize, k: usize) -> f64 {
        self.weights[(o * self.in_ch + i) * 9 + k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdmWeights {
    pub layers: Vec<ConvLayer>,
}

impl PdmWeights {
    pub fn channel_plan() -> [(usize, usize); 3] {
        [(3, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, 3)]
    }

    pub fn zeros() -> Self {
        PdmWeights {
            layers: Self::channel_plan()
                .iter()
                .map(|&(i, o)| ConvLayer::zeros(i, o))
                .collect(),
        }
    }

    /// He-normal taps, zero bias.
    pub fn he_normal(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros();
        for layer in &mut w.layers {
            let std = (2.0 / (layer.in_ch * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            for v in &mut layer.weights {
                *v = normal.sample(&mut rng);
            }
        }
        w
    }

    pub fn zeros_like(&self) -> Self {
        PdmWeights {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer::zeros(l.in_ch, l.out_ch))
                .collect(),
        }
    }

    /// Weight and bias arrays in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        let plan = Self::channel_plan();
        if self.layers.len() != plan.len() {
            return Err(Error::Shape(format!(
                "expected 3 conv layers, got {}",
                self.layers.len()
            )));
        }
        for (l, &(i, o)) in self.layers.iter().zip(&plan) {
            if l.in_ch != i || l.out_ch != o || l.weights.len() != i * o * 9 || l.bias.len() != o {
                return Err(Error::Shape(format!(
                    "conv layer {}->{} has wrong shape",
                    l.in_ch, l.out_ch
                )));
            }
        }
        if !self.is_finite() {
            return Err(Error::InvalidArgument(
                "denoiser weights are not finite".into(),
            ));
        }
        Ok(())
    }
}

/// Planar `C x H x W` activations.
#[derive(Debug, Clone, PartialEq)]
struct Planes {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Planes {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Planes {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    fn from_image(img: &Image) -> Self {
        let (w, h, c) = (img.width(), img.height(), img.channels());
        let mut p = Planes::zeros(c, h, w);
        for (idx, &v) in img.data().iter().enumerate() {
            let ch = idx % c;
            let px = idx / c;
            p.data[ch * h * w + px] = v;
        }
        p
    }

    fn to_image(&self) -> Image {
        let (c, hw) = (self.c, self.h * self.w);
        let mut data = vec![0.0; c * hw];
        for ch in 0..c {
            for px in 0..hw {
                data[px * c + ch] = self.data[ch * hw + px];
            }
        }
        Image::from_vec(self.w, self.h, c, data).expect("shape")
    }

    fn plane(&self, c: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// One channel padded by a replicated one-pixel border.
    fn padded(&self, c: usize) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let src = self.plane(c);
        let pw = w + 2;
        let mut out = vec![0.0; (h + 2) * pw];
        for py in 0..h + 2 {
            let y = py.saturating_sub(1).min(h - 1);
            for px in 0..pw {
                let x = px.saturating_sub(1).min(w - 1);
                out[py * pw + px] = src[y * w + x];
            }
        }
        out
    }
}

fn conv_forward(layer: &ConvLayer, input: &Planes) -> Planes {
    let (h, w) = (input.h, input.w);
    let pw = w + 2;
    let padded: Vec<Vec<f64>> = (0..input.c).map(|c| input.padded(c)).collect();
    let mut out = Planes::zeros(layer.out_ch, h, w);
    let body = |(o, dst): (usize, &mut [f64])| {
        dst.fill(layer.bias[o]);
        for (i, pad) in padded.iter().enumerate() {
            for k in 0..9 {
                let (ky, kx) = (k / 3, k % 3);
                let wv = layer.w(o, i, k);
                if wv == 0.0 {
                    continue;
                }
                for y in 0..h {
                    let src = &pad[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                    let row = &mut dst[y * w..(y + 1) * w];
                    for (d, s) in row.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
    };
    if conv_work(layer, h, w) < PAR_MIN_WORK {
        out.data.chunks_mut(h * w).enumerate().for_each(body);
    } else {
        out.data.par_chunks_mut(h * w).enumerate().for_each(body);
    }
    out
}

fn conv_work(layer: &ConvLayer, h: usize, w: usize) -> usize {
    layer.in_ch * layer.out_ch * 9 * h * w
}

/// Returns the input adjoint and accumulates parameter gradients into `grad`.
fn conv_backward(
    layer: &ConvLayer,
    input: &Planes,
    grad_out: &Planes,
    grad: &mut ConvLayer,
) -> Planes {
    let (h, w) = (input.h, input.w);
    let pw = w + 2;
    let padded: Vec<Vec<f64>> = (0..input.c).map(|c| input.padded(c)).collect();
    // parameter gradients, one output channel per task
    let small = conv_work(layer, h, w) < PAR_MIN_WORK;
    let param_grad = |o: usize| {
        let g = grad_out.plane(o);
        let mut gw = vec![0.0; layer.in_ch * 9];
        for (i, pad) in padded.iter().enumerate() {
            for k in 0..9 {
                let (ky, kx) = (k / 3, k % 3);
                let mut acc = 0.0;
                for y in 0..h {
                    let src = &pad[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                    let gr = &g[y * w..(y + 1) * w];
                    for (a, b) in src.iter().zip(gr) {
                        acc += a * b;
                    }
                }
                gw[i * 9 + k] = acc;
            }
        }
        (gw, g.iter().sum::<f64>())
    };
    let per_out: Vec<(Vec<f64>, f64)> = if small {
        (0..layer.out_ch).map(param_grad).collect()
    } else {
        (0..layer.out_ch).into_par_iter().map(param_grad).collect()
    };
    for (o, (gw, gb)) in per_out.into_iter().enumerate() {
        let base = o * layer.in_ch * 9;
        for (dst, v) in grad.weights[base..base + layer.in_ch * 9]
            .iter_mut()
            .zip(gw)
        {
            *dst += v;
        }
        grad.bias[o] += gb;
    }
    // input adjoint, one input channel per task
    let mut grad_in = Planes::zeros(input.c, h, w);
    let input_grad = |(i, dst): (usize, &mut [f64])| {
        let mut gpad = vec![0.0; (h + 2) * pw];
        for o in 0..layer.out_ch {
            let g = grad_out.plane(o);
            for k in 0..9 {
                let (ky, kx) = (k / 3, k % 3);
                let wv = layer.w(o, i, k);
                if wv == 0.0 {
                    continue;
                }
                for y in 0..h {
                    let row = &mut gpad[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                    for (d, s) in row.iter_mut().zip(&g[y * w..(y + 1) * w]) {
                        *d += wv * s;
                    }
                }
            }
        }
        // fold the replicated border back onto the edge pixels
        for py in 0..h + 2 {
            let y = py.saturating_sub(1).min(h - 1);
            for px in 0..pw {
                let x = px.saturating_sub(1).min(w - 1);
                dst[y * w + x] += gpad[py * pw + px];
            }
        }
    };
    if small {
        grad_in
            .data
            .chunks_mut(h * w)
            .enumerate()
            .for_each(input_grad);
    } else {
        grad_in
            .data
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(input_grad);
    }
    grad_in
}

#[derive(Debug, Clone)]
struct NetCache {
    input: Planes,
    pre1: Planes,
    act1: Planes,
    pre2: Planes,
    act2: Planes,
}

fn relu(p: &Planes) -> Planes {
    Planes {
        data: p.data.iter().map(|&v| v.max(0.0)).collect(),
        ..*p
    }
}

fn net_forward(w: &PdmWeights, input: &Image) -> (Image, NetCache) {
    let input = Planes::from_image(input);
    let pre1 = conv_forward(&w.layers[0], &input);
    let act1 = relu(&pre1);
    let pre2 = conv_forward(&w.layers[1], &act1);
    let act2 = relu(&pre2);
    let out = conv_forward(&w.layers[2], &act2).to_image();
    (
        out,
        NetCache {
            input,
            pre1,
            act1,
            pre2,
            act2,
        },
    )
}

fn net_backward(
    w: &PdmWeights,
    cache: &NetCache,
    grad_out: &Image,
    grads: &mut PdmWeights,
) -> Image {
    let g3 = Planes::from_image(grad_out);
    let mut g2 = conv_backward(&w.layers[2], &cache.act2, &g3, &mut grads.layers[2]);
    for (g, pre) in g2.data.iter_mut().zip(&cache.pre2.data) {
        if *pre <= 0.0 {
            *g = 0.0;
        }
    }
    let mut g1 = conv_backward(&w.layers[1], &cache.act1, &g2, &mut grads.layers[1]);
    for (g, pre) in g1.data.iter_mut().zip(&cache.pre1.data) {
        if *pre <= 0.0 {
            *g = 0.0;
        }
    }
    conv_backward(&w.layers[0], &cache.input, &g1, &mut grads.layers[0]).to_image()
}

/// Applies the refinement network alone (no bootstrapping).
pub fn refine_network(w: &PdmWeights, input: &Image) -> Result<Image> {
    w.validate()?;
    if input.channels() != 3 {
        return Err(Error::Shape("denoiser input needs 3 channels".into()));
    }
    Ok(net_forward(w, input).0)
}

fn blur_kernel() -> Kernel1D {
    gaussian_kernel_with_radius(BLUR_SIGMA, 0, BLUR_RADIUS).expect("fixed kernel")
}

/// The low-pass filter `C`.
pub fn blur(img: &Image) -> Image {
    let k = blur_kernel();
    convolve_separable(img, &k, &k)
}

/// Initial noise estimate for stage `k`.
pub fn bootstrap(r_k: &Image, ngs: &Image, k: usize) -> Result<Image> {
    r_k.ensure_same_shape(ngs, "bootstrap inputs")?;
    let high = r_k.zip_map(&blur(r_k), |a, b| a - b);
    Ok(if k == 0 {
        high.zip_map(ngs, |h, n| 0.5 * (h + n))
    } else {
        high
    })
}

#[derive(Debug, Clone)]
pub struct StageTrace {
    pub n_hat: Image,
    pub noise: Image,
    pub output: Image,
    cache: NetCache,
}

#[derive(Debug, Clone)]
pub struct PdmTrace {
    pub r0: Image,
    pub stages: Vec<StageTrace>,
}

impl PdmTrace {
    /// Final denoised image `R_K`.
    pub fn output(&self) -> &Image {
        &self.stages.last().map(|s| &s.output).unwrap_or(&self.r0)
    }

    /// `R_k`, with `R_0` the undenoised input.
    pub fn stage_output(&self, k: usize) -> &Image {
        if k == 0 {
            &self.r0
        } else {
            &self.stages[k - 1].output
        }
    }
}

pub fn pdm_forward(r0: &Image, ngs: &Image, w: &PdmWeights) -> Result<PdmTrace> {
    pdm_forward_stages(r0, ngs, w, STAGES)
}

pub fn pdm_forward_stages(
    r0: &Image,
    ngs: &Image,
    w: &PdmWeights,
    stages: usize,
) -> Result<PdmTrace> {
    w.validate()?;
    r0.ensure_same_shape(ngs, "denoiser inputs")?;
    if r0.channels() != 3 {
        return Err(Error::Shape("denoiser input needs 3 channels".into()));
    }
    if !r0.is_finite() || !ngs.is_finite() {
        return Err(Error::InvalidArgument(
            "denoiser input is not finite".into(),
        ));
    }
    let mut trace = PdmTrace {
        r0: r0.clone(),
        stages: Vec::with_capacity(stages),
    };
    for k in 0..stages {
        let n_hat = bootstrap(trace.stage_output(k), ngs, k)?;
        let (refined, cache) = net_forward(w, &n_hat);
        let noise = n_hat.zip_map(&refined, |a, b| a - b);
        let output = r0.zip_map(&noise, |a, b| a - b);
        trace.stages.push(StageTrace {
            n_hat,
            noise,
            output,
            cache,
        });
    }
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct PdmGrads {
    pub weights: PdmWeights,
    pub r0: Image,
    pub ngs: Image,
}

/// Back-propagates an adjoint on the final output plus optional adjoints on
/// intermediate outputs `(k, dL/dR_k)` for `1 <= k < stages`.
pub fn pdm_backward(
    trace: &PdmTrace,
    w: &PdmWeights,
    grad_output: &Image,
    grad_intermediates: &[(usize, &Image)],
) -> Result<PdmGrads> {
    let stages = trace.stages.len();
    grad_output.ensure_same_shape(&trace.r0, "denoiser output adjoint")?;
    let mut grad_r: Vec<Image> = (0..=stages)
        .map(|_| Image::new(trace.r0.width(), trace.r0.height(), 3))
        .collect();
    grad_r[stages] = grad_output.clone();
    for &(k, g) in grad_intermediates {
        if k == 0 || k > stages {
            return Err(Error::InvalidArgument(format!("no intermediate stage {k}")));
        }
        g.ensure_same_shape(&trace.r0, "intermediate adjoint")?;
        grad_r[k].add_scaled(g, 1.0);
    }
    let k = blur_kernel();
    let mut grads = PdmGrads {
        weights: w.zeros_like(),
        r0: Image::new(trace.r0.width(), trace.r0.height(), 3),
        ngs: Image::new(trace.r0.width(), trace.r0.height(), 3),
    };
    for stage in (0..stages).rev() {
        let g_next = std::mem::replace(&mut grad_r[stage + 1], Image::new(0, 0, 1));
        grads.r0.add_scaled(&g_next, 1.0);
        // N = N^ - F(N^), and dL/dN = -dL/dR
        let g_noise = g_next.scaled(-1.0);
        let through_net = net_backward(w, &trace.stages[stage].cache, &g_next, &mut grads.weights);
        let g_hat = g_noise.zip_map(&through_net, |a, b| a + b);
        let high = g_hat.zip_map(&convolve_separable_adjoint(&g_hat, &k, &k), |a, b| a - b);
        if stage == 0 {
            grads.r0.add_scaled(&high, 0.5);
            grads.ngs.add_scaled(&g_hat, 0.5);
        } else {
            grad_r[stage].add_scaled(&high, 1.0);
        }
    }
    Ok(grads)
}
