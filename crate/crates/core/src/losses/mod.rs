//! Unsupervised objectives and image-quality metrics. Every loss returns its value
//! together with the adjoint on each differentiable input.

mod ssim;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use ssim::{ssim, ssim_with_grad, SSIM_K1, SSIM_K2, SSIM_RADIUS, SSIM_SIGMA};

pub const PRIOR_WEIGHT: f64 = 0.1;
pub const DEPTH_WEIGHT: f64 = 0.1;
/// SSIM share of the reconstruction loss.
pub const SSIM_LAMBDA: f64 = 0.2;
/// Below this standard deviation a correlation is treated as undefined.
pub const PCC_MIN_STD: f64 = 1e-8;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error and its subgradient with respect to `a`.
pub fn l1_loss(a: &Image, b: &Image) -> Result<(f64, Image)> {
    a.ensure_same_shape(b, "l1 inputs")?;
    let n = a.len() as f64;
    let value = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n;
    Ok((value, a.zip_map(b, |x, y| sign(x - y) / n)))
}

/// Mean squared error and its gradient with respect to `a`.
pub fn mse_loss(a: &Image, b: &Image) -> Result<(f64, Image)> {
    a.ensure_same_shape(b, "mse inputs")?;
    let n = a.len() as f64;
    let value = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok((value, a.zip_map(b, |x, y| 2.0 * (x - y) / n)))
}

/// Input rescaled to mean intensity `theta`, clamped to `[0, 1]`.
pub fn exposure_target(input: &Image, theta: f64) -> Result<Image> {
    let mean = input.mean();
    if !(mean > 0.0) {
        return Err(Error::InvalidArgument(
            "exposure target needs an input with positive mean".into(),
        ));
    }
    let k = theta / mean;
    Ok(input.map(|v| (k * v).clamp(0.0, 1.0)))
}

pub fn exposure_loss(r: &Image, input: &Image, theta: f64) -> Result<(f64, Image)> {
    r.ensure_same_shape(input, "exposure inputs")?;
    l1_loss(r, &exposure_target(input, theta)?)
}

pub fn prior_loss(pr: &Image, prior: &Image) -> Result<(f64, Image)> {
    l1_loss(pr, prior)
}

fn pcc_slices(x: &[f64], y: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx / n).sqrt() <= PCC_MIN_STD || (syy / n).sqrt() <= PCC_MIN_STD {
        log::warn!("correlation of a constant signal is undefined; using 0");
        if let Some(g) = grad {
            g.fill(0.0);
        }
        return 0.0;
    }
    let norm = (sxx * syy).sqrt();
    let rho = sxy / norm;
    if let Some(g) = grad {
        for ((gi, a), b) in g.iter_mut().zip(x).zip(y) {
            *gi = (b - my) / norm - rho * (a - mx) / sxx;
        }
    }
    rho
}

/// Pearson correlation over every sample; 0 when either input is constant.
pub fn pcc(x: &Image, y: &Image) -> Result<f64> {
    x.ensure_same_shape(y, "pcc inputs")?;
    Ok(pcc_slices(x.data(), y.data(), None))
}

/// Correlation and its gradient with respect to `x`.
pub fn pcc_with_grad(x: &Image, y: &Image) -> Result<(f64, Image)> {
    x.ensure_same_shape(y, "pcc inputs")?;
    let mut g = Image::new(x.width(), x.height(), x.channels());
    let rho = pcc_slices(x.data(), y.data(), Some(g.data_mut()));
    Ok((rho, g))
}

/// Pixel rectangle `(x0, y0, width, height)`.
pub type Patch = (usize, usize, usize, usize);

/// The full `size x size` tiles of a frame, row-major. A frame smaller than one tile
/// yields the whole frame.
pub fn patch_grid(width: usize, height: usize, size: usize) -> Vec<Patch> {
    let (nx, ny) = if size == 0 {
        (0, 0)
    } else {
        (width / size, height / size)
    };
    if nx == 0 || ny == 0 {
        return vec![(0, 0, width, height)];
    }
    (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i * size, j * size, size, size)))
        .collect()
}

/// Half of the grid (rounded up), drawn without replacement, in grid order.
pub fn sample_patches(width: usize, height: usize, size: usize, rng: &mut impl Rng) -> Vec<Patch> {
    let grid = patch_grid(width, height, size);
    let k = grid.len().div_ceil(2);
    let mut picks = rand::seq::index::sample(rng, grid.len(), k).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| grid[i]).collect()
}

fn crop(img: &Image, p: Patch) -> Image {
    let (x0, y0, w, h) = p;
    Image::from_fn(w, h, img.channels(), |x, y, c| img.get(x0 + x, y0 + y, c))
}

#[derive(Debug, Clone)]
pub struct DepthLoss {
    pub global: f64,
    pub local: f64,
    pub grad: Image,
    pub patches: Vec<Patch>,
}

impl DepthLoss {
    pub fn value(&self) -> f64 {
        self.global + self.local
    }
}

/// `1 - PCC` over the whole frame plus the mean of `1 - PCC` over sampled patches.
pub fn depth_loss(
    dr: &Image,
    depth: &Image,
    patch_size: usize,
    rng: &mut impl Rng,
) -> Result<DepthLoss> {
    dr.ensure_same_shape(depth, "depth inputs")?;
    let (rho, g) = pcc_with_grad(dr, depth)?;
    let mut grad = g.scaled(-1.0);
    let patches = sample_patches(dr.width(), dr.height(), patch_size, rng);
    let k = patches.len() as f64;
    let mut local = 0.0;
    for &p in &patches {
        let (rho_p, gp) = pcc_with_grad(&crop(dr, p), &crop(depth, p))?;
        local += (1.0 - rho_p) / k;
        let (x0, y0, w, h) = p;
        for y in 0..h {
            for x in 0..w {
                for c in 0..dr.channels() {
                    let i = grad.index(x0 + x, y0 + y, c);
                    grad.data_mut()[i] -= gp.get(x, y, c) / k;
                }
            }
        }
    }
    Ok(DepthLoss {
        global: 1.0 - rho,
        local,
        grad,
        patches,
    })
}

/// Anisotropic total variation with forward differences, normalized by the sample
/// count, and its subgradient.
pub fn total_variation(img: &Image) -> (f64, Image) {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let n = img.len() as f64;
    let mut value = 0.0;
    let mut grad = Image::new(w, h, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = img.get(x, y, ch);
                if x + 1 < w {
                    let d = img.get(x + 1, y, ch) - v;
                    value += d.abs();
                    let s = sign(d) / n;
                    grad.data_mut()[img.index(x + 1, y, ch)] += s;
                    grad.data_mut()[img.index(x, y, ch)] -= s;
                }
                if y + 1 < h {
                    let d = img.get(x, y + 1, ch) - v;
                    value += d.abs();
                    let s = sign(d) / n;
                    grad.data_mut()[img.index(x, y + 1, ch)] += s;
                    grad.data_mut()[img.index(x, y, ch)] -= s;
                }
            }
        }
    }
    (value / n, grad)
}

#[derive(Debug, Clone)]
pub struct DenoiseLoss {
    pub value: f64,
    pub grad_r: Image,
    pub grad_rk: Image,
}

/// `MSE(R, R_K) + TV(R)`.
pub fn denoise_loss(r: &Image, rk: &Image) -> Result<DenoiseLoss> {
    let (mse, g) = mse_loss(r, rk)?;
    let (tv, gtv) = total_variation(r);
    let grad_rk = g.scaled(-1.0);
    let mut grad_r = g;
    grad_r.add_scaled(&gtv, 1.0);
    Ok(DenoiseLoss {
        value: mse + tv,
        grad_r,
        grad_rk,
    })
}

#[derive(Debug, Clone)]
pub struct ReconstructionLoss {
    pub value: f64,
    pub l1: f64,
    pub ssim: f64,
    pub grad_r: Image,
    pub grad_lr: Image,
}

/// `(1 - lambda) L1(R*L, I) + lambda (1 - SSIM(R*L, I))`.
pub fn reconstruction_loss(
    r: &Image,
    lr: &Image,
    input: &Image,
    lambda: f64,
) -> Result<ReconstructionLoss> {
    r.ensure_same_shape(lr, "reconstruction inputs")?;
    r.ensure_same_shape(input, "reconstruction inputs")?;
    let out = r.zip_map(lr, |a, b| a * b);
    let (l1, g1) = l1_loss(&out, input)?;
    let (s, gs) = ssim_with_grad(&out, input)?;
    let g_out = g1.zip_map(&gs, |a, b| (1.0 - lambda) * a - lambda * b);
    Ok(ReconstructionLoss {
        value: (1.0 - lambda) * l1 + lambda * (1.0 - s),
        l1,
        ssim: s,
        grad_r: g_out.zip_map(lr, |g, l| g * l),
        grad_lr: g_out.zip_map(r, |g, v| g * v),
    })
}

/// Peak signal-to-noise ratio for unit dynamic range; `+inf` for identical inputs.
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    let (mse, _) = mse_loss(x, y)?;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// Per-term values of one evaluation of the full objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub exp: f64,
    pub prior: f64,
    pub depth_global: f64,
    pub depth_local: f64,
    pub de: f64,
    pub rec_l1: f64,
    pub rec_ssim: f64,
    pub rec: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn depth(&self) -> f64 {
        self.depth_global + self.depth_local
    }

    pub fn weighted_total(&self) -> f64 {
        self.exp + PRIOR_WEIGHT * self.prior + DEPTH_WEIGHT * self.depth() + self.de + self.rec
    }

    /// Name of the first non-finite term.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("exp", self.exp),
            ("prior", self.prior),
            ("depth_global", self.depth_global),
            ("depth_local", self.depth_local),
            ("de", self.de),
            ("rec", self.rec),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Which terms participate, plus their free parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub theta: f64,
    pub patch_size: usize,
    pub lambda: f64,
    pub exposure: bool,
    pub prior: bool,
    pub depth: bool,
    pub denoise: bool,
    pub reconstruction: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            theta: 0.5,
            patch_size: 128,
            lambda: SSIM_LAMBDA,
            exposure: true,
            prior: true,
            depth: true,
            denoise: true,
            reconstruction: true,
        }
    }
}

/// Everything the objective reads for one view.
pub struct LossInputs<'a> {
    /// Enhanced output.
    pub r: &'a Image,
    /// Penultimate denoising stage, if the denoiser ran.
    pub r_prev: Option<&'a Image>,
    pub pr: &'a Image,
    pub dr: &'a Image,
    pub lr: &'a Image,
    pub input: &'a Image,
    pub prior: &'a Image,
    pub depth: &'a Image,
}

/// Adjoints of the weighted total.
#[derive(Debug, Clone)]
pub struct LossAdjoints {
    pub r: Image,
    pub r_prev: Option<Image>,
    pub pr: Image,
    pub dr: Image,
    pub lr: Image,
}

pub fn evaluate(
    inp: &LossInputs,
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<(LossBundle, LossAdjoints)> {
    let (w, h) = (inp.r.width(), inp.r.height());
    let mut b = LossBundle::default();
    let mut adj = LossAdjoints {
        r: Image::new(w, h, 3),
        r_prev: inp.r_prev.map(|_| Image::new(w, h, 3)),
        pr: Image::new(w, h, 1),
        dr: Image::new(w, h, 1),
        lr: Image::new(w, h, 3),
    };
    if cfg.exposure {
        let (v, g) = exposure_loss(inp.r, inp.input, cfg.theta)?;
        b.exp = v;
        adj.r.add_scaled(&g, 1.0);
    }
    if cfg.prior {
        let (v, g) = prior_loss(inp.pr, inp.prior)?;
        b.prior = v;
        adj.pr.add_scaled(&g, PRIOR_WEIGHT);
    }
    if cfg.depth {
        let d = depth_loss(inp.dr, inp.depth, cfg.patch_size, rng)?;
        b.depth_global = d.global;
        b.depth_local = d.local;
        adj.dr.add_scaled(&d.grad, DEPTH_WEIGHT);
    }
    if cfg.denoise {
        if let (Some(rk), Some(g_prev)) = (inp.r_prev, adj.r_prev.as_mut()) {
            let d = denoise_loss(inp.r, rk)?;
            b.de = d.value;
            adj.r.add_scaled(&d.grad_r, 1.0);
            g_prev.add_scaled(&d.grad_rk, 1.0);
        }
    }
    if cfg.reconstruction {
        let rec = reconstruction_loss(inp.r, inp.lr, inp.input, cfg.lambda)?;
        b.rec_l1 = rec.l1;
        b.rec_ssim = rec.ssim;
        b.rec = rec.value;
        adj.r.add_scaled(&rec.grad_r, 1.0);
        adj.lr.add_scaled(&rec.grad_lr, 1.0);
    }
    b.total = b.weighted_total();
    Ok((b, adj))
}
