//! Independent reference implementations used by the acceptance suite.

#![allow(dead_code)]

use dimsplat::render::RenderConfig;
use dimsplat::scene::{logit, Camera, GaussianCloud, SH_COEFFS};
use dimsplat::Image;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize, lo: f64, hi: f64) -> Image {
    Image::from_fn(w, h, c, |_, _, _| rng.random_range(lo..hi))
}

/// Smooth random texture: sinusoids plus blobs, values in `[0.1, 0.9]`.
pub fn texture(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    let waves: Vec<[f64; 5]> = (0..4)
        .map(|_| {
            [
                rng.random_range(0.1..0.6),
                rng.random_range(0.1..0.6),
                rng.random_range(0.0..6.3),
                rng.random_range(0.05..0.2),
                rng.random_range(0.0..3.0),
            ]
        })
        .collect();
    let blobs: Vec<[f64; 6]> = (0..5)
        .map(|_| {
            [
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(1.5..5.0),
                rng.random_range(-0.25..0.25),
                rng.random_range(-0.25..0.25),
                rng.random_range(-0.25..0.25),
            ]
        })
        .collect();
    let base = [
        rng.random_range(0.3..0.6),
        rng.random_range(0.3..0.6),
        rng.random_range(0.3..0.6),
    ];
    Image::from_fn(w, h, 3, |x, y, c| {
        let (xf, yf) = (x as f64, y as f64);
        let mut v = base[c];
        for (k, wv) in waves.iter().enumerate() {
            if k % 3 == c || k == 3 {
                v += wv[3] * (wv[0] * xf + wv[1] * yf + wv[2] + wv[4] * c as f64).sin();
            }
        }
        for b in &blobs {
            let r2 = (xf - b[0]).powi(2) + (yf - b[1]).powi(2);
            v += b[3 + c] * (-r2 / (2.0 * b[2] * b[2])).exp();
        }
        v.clamp(0.1, 0.9)
    })
}

fn sh_basis(degree: usize, d: [f64; 3]) -> [f64; SH_COEFFS] {
    let [x, y, z] = d;
    let mut b = [0.0; SH_COEFFS];
    b[0] = 0.28209479177387814;
    if degree >= 1 {
        let c1 = 0.4886025119029199;
        b[1] = -c1 * y;
        b[2] = c1 * z;
        b[3] = -c1 * x;
    }
    if degree >= 2 {
        b[4] = 1.0925484305920792 * x * y;
        b[5] = -1.0925484305920792 * y * z;
        b[6] = 0.31539156525252005 * (2.0 * z * z - x * x - y * y);
        b[7] = -1.0925484305920792 * x * z;
        b[8] = 0.5462742152960396 * (x * x - y * y);
    }
    if degree >= 3 {
        b[9] = -0.5900435899266435 * y * (3.0 * x * x - y * y);
        b[10] = 2.890611442640554 * x * y * z;
        b[11] = -0.4570457994644658 * y * (4.0 * z * z - x * x - y * y);
        b[12] = 0.3731763325901154 * z * (2.0 * z * z - 3.0 * x * x - 3.0 * y * y);
        b[13] = -0.4570457994644658 * x * (4.0 * z * z - x * x - y * y);
        b[14] = 1.445305721320277 * z * (x * x - y * y);
        b[15] = -0.5900435899266435 * x * (x * x - 3.0 * y * y);
    }
    b
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Straightforward per-pixel compositing of all primitives: 11 channels
/// (rgb, structure, depth, illumination rgb, noise rgb).
pub fn oracle_render(
    cloud: &GaussianCloud,
    cam: &Camera,
    bg: [f64; 3],
    cfg: &RenderConfig,
) -> Vec<[f64; 11]> {
    let r = cam.rotation;
    let t = cam.translation;
    let center: [f64; 3] = std::array::from_fn(|j| -(0..3).map(|i| r[i][j] * t[i]).sum::<f64>());
    struct Splat {
        z: f64,
        idx: usize,
        mean: [f64; 2],
        inv: [f64; 3],
        opacity: f64,
        feat: [f64; 11],
    }
    let mut splats = Vec::new();
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let pc: [f64; 3] =
            std::array::from_fn(|k| (0..3).map(|j| r[k][j] * p[j]).sum::<f64>() + t[k]);
        if !(pc[2] >= cam.near && pc[2] <= cam.far) {
            continue;
        }
        let q = cloud.rotations[i];
        let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        let rot = [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
        let s = cloud.log_scales[i].map(f64::exp);
        let mut sigma = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                sigma[a][b] = (0..3).map(|k| rot[a][k] * s[k] * s[k] * rot[b][k]).sum();
            }
        }
        let zc = pc[2];
        let jac = [
            [cam.fx / zc, 0.0, -cam.fx * pc[0] / (zc * zc)],
            [0.0, cam.fy / zc, -cam.fy * pc[1] / (zc * zc)],
        ];
        let mut m = [[0.0; 3]; 2];
        for a in 0..2 {
            for b in 0..3 {
                m[a][b] = (0..3).map(|k| jac[a][k] * r[k][b]).sum();
            }
        }
        let mut c2 = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                c2[a][b] = (0..3)
                    .map(|k| (0..3).map(|l| m[a][k] * sigma[k][l] * m[b][l]).sum::<f64>())
                    .sum();
            }
        }
        c2[0][0] += 0.3;
        c2[1][1] += 0.3;
        let det = c2[0][0] * c2[1][1] - c2[0][1] * c2[1][0];
        if !(det >= 1e-12) {
            continue;
        }
        let dir = {
            let v: [f64; 3] = std::array::from_fn(|k| p[k] - center[k]);
            let l = (v.iter().map(|a| a * a).sum::<f64>()).sqrt().max(1e-12);
            v.map(|a| a / l)
        };
        let basis = sh_basis(cloud.sh_degree, dir);
        let mut feat = [0.0; 11];
        for ch in 0..3 {
            let c: f64 = 0.5
                + (0..SH_COEFFS)
                    .map(|k| basis[k] * cloud.sh[i][k][ch])
                    .sum::<f64>();
            feat[ch] = c.max(0.0);
            feat[5 + ch] = cloud.illum[i][ch].exp();
            feat[8 + ch] = cloud.noise[i][ch];
        }
        feat[3] = sigmoid(cloud.structure_logits[i]);
        feat[4] = sigmoid(cloud.depth_logits[i]);
        splats.push(Splat {
            z: zc,
            idx: i,
            mean: [cam.fx * pc[0] / zc + cam.cx, cam.fy * pc[1] / zc + cam.cy],
            inv: [c2[1][1] / det, -c2[0][1] / det, c2[0][0] / det],
            opacity: sigmoid(cloud.opacity_logits[i]),
            feat,
        });
    }
    splats.sort_by(|a, b| a.z.total_cmp(&b.z).then(a.idx.cmp(&b.idx)));
    let mut out = vec![[0.0; 11]; cam.width * cam.height];
    for py in 0..cam.height {
        for px in 0..cam.width {
            let mut acc = [0.0; 11];
            let mut trans = 1.0;
            for s in &splats {
                let dx = px as f64 - s.mean[0];
                let dy = py as f64 - s.mean[1];
                let q = s.inv[0] * dx * dx + 2.0 * s.inv[1] * dx * dy + s.inv[2] * dy * dy;
                let alpha = s.opacity * (-0.5 * q).exp();
                if alpha < cfg.min_alpha {
                    continue;
                }
                if trans * (1.0 - alpha) < cfg.min_transmittance {
                    break;
                }
                for k in 0..11 {
                    acc[k] += s.feat[k] * alpha * trans;
                }
                trans *= 1.0 - alpha;
            }
            for k in 0..3 {
                acc[k] += trans * bg[k];
            }
            out[py * cam.width + px] = acc;
        }
    }
    out
}

fn unit_quaternion(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.2 {
            return q.map(|v| v / n);
        }
    }
}

/// Random cluster around the origin seen by a camera on a sphere of radius ~3.
/// Colors stay away from the lower clamp so the scene is smooth in every parameter.
pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> (GaussianCloud, Camera) {
    let points: Vec<[f64; 3]> = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-0.6..0.6)))
        .collect();
    let colors: Vec<[f64; 3]> = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.3..0.8)))
        .collect();
    let mut cloud = GaussianCloud::from_points(&points, &colors).unwrap();
    cloud.sh_degree = rng.random_range(0..=3);
    for i in 0..n {
        cloud.rotations[i] = unit_quaternion(rng);
        cloud.log_scales[i] = std::array::from_fn(|_| rng.random_range(0.05f64..0.35).ln());
        cloud.opacity_logits[i] = logit(rng.random_range(0.2..0.9));
        for k in 1..SH_COEFFS {
            for ch in 0..3 {
                cloud.sh[i][k][ch] = rng.random_range(-0.04..0.04);
            }
        }
        cloud.structure_logits[i] = rng.random_range(-2.0..2.0);
        cloud.depth_logits[i] = rng.random_range(-2.0..2.0);
        cloud.illum[i] = std::array::from_fn(|_| rng.random_range(-1.0..0.5));
        cloud.noise[i] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
    }
    let theta: f64 = rng.random_range(-0.6..0.6);
    let phi: f64 = rng.random_range(-0.4..0.4);
    let d = rng.random_range(2.5..3.5);
    let eye = [
        d * theta.sin() * phi.cos(),
        d * phi.sin(),
        -d * theta.cos() * phi.cos(),
    ];
    let f = rng.random_range(0.9..1.4) * w.max(h) as f64;
    let mut cam = Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], w, h, f).unwrap();
    cam.cx += rng.random_range(-1.0..1.0);
    cam.cy += rng.random_range(-1.0..1.0);
    (cloud, cam)
}

/// Relative tolerance with an absolute floor.
pub fn close(fd: f64, an: f64, rel: f64, abs: f64) -> bool {
    let err = (fd - an).abs();
    err <= abs || err <= rel * fd.abs().max(an.abs())
}

pub fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn oracle_pcc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / n;
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
    cov / (vx.sqrt() * vy.sqrt())
}

pub fn oracle_tv(img: &Image) -> f64 {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                if x + 1 < w {
                    s += (img.get(x + 1, y, ch) - img.get(x, y, ch)).abs();
                }
                if y + 1 < h {
                    s += (img.get(x, y + 1, ch) - img.get(x, y, ch)).abs();
                }
            }
        }
    }
    s / img.len() as f64
}

/// Per-window SSIM with an explicit 11x11 Gaussian table (sigma 1.5) and clamped coordinates.
pub fn oracle_ssim(x: &Image, y: &Image) -> f64 {
    let r = 5isize;
    let g: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / 4.5).exp()).collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (w, h) = (x.width() as isize, x.height() as isize);
    let mut sum = 0.0;
    for ch in 0..x.channels() {
        for py in 0..h {
            for px in 0..w {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in -r..=r {
                    for i in -r..=r {
                        let wt = g[(j + r) as usize] * g[(i + r) as usize] / total;
                        let sx = (px + i).clamp(0, w - 1) as usize;
                        let sy = (py + j).clamp(0, h - 1) as usize;
                        let a = x.get(sx, sy, ch);
                        let b = y.get(sx, sy, ch);
                        mx += wt * a;
                        my += wt * b;
                        xx += wt * a * a;
                        yy += wt * b * b;
                        xy += wt * a * b;
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    sum / x.len() as f64
}

pub fn oracle_exposure(r: &Image, input: &Image, theta: f64) -> f64 {
    let mean = input.data().iter().sum::<f64>() / input.len() as f64;
    let target: Vec<f64> = input
        .data()
        .iter()
        .map(|v| (theta * v / mean).clamp(0.0, 1.0))
        .collect();
    mean_abs(r.data(), &target)
}

pub fn oracle_reconstruction(r: &Image, lr: &Image, input: &Image, lambda: f64) -> f64 {
    let out = Image::from_fn(r.width(), r.height(), 3, |x, y, c| {
        r.get(x, y, c) * lr.get(x, y, c)
    });
    (1.0 - lambda) * mean_abs(out.data(), input.data()) + lambda * (1.0 - oracle_ssim(&out, input))
}

pub fn crop(img: &Image, p: (usize, usize, usize, usize)) -> Vec<f64> {
    let (x0, y0, w, h) = p;
    let mut v = Vec::new();
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            for c in 0..img.channels() {
                v.push(img.get(x, y, c));
            }
        }
    }
    v
}

pub fn oracle_psnr(a: &Image, b: &Image) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}
