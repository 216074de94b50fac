use crate::error::Result;
use crate::image::{
    convolve_separable, convolve_separable_adjoint, gaussian_kernel_with_radius, Image, Kernel1D,
};

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RADIUS: usize = 5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

const C1: f64 = SSIM_K1 * SSIM_K1;
const C2: f64 = SSIM_K2 * SSIM_K2;

fn window() -> Kernel1D {
    gaussian_kernel_with_radius(SSIM_SIGMA, 0, SSIM_RADIUS).expect("fixed kernel")
}

struct Moments {
    mx: Image,
    my: Image,
    sxx: Image,
    syy: Image,
    sxy: Image,
}

fn moments(x: &Image, y: &Image, k: &Kernel1D) -> Moments {
    let blur = |img: &Image| convolve_separable(img, k, k);
    let mx = blur(x);
    let my = blur(y);
    let sxx = blur(&x.zip_map(x, |a, b| a * b)).zip_map(&mx, |e, m| e - m * m);
    let syy = blur(&y.zip_map(y, |a, b| a * b)).zip_map(&my, |e, m| e - m * m);
    let exy = blur(&x.zip_map(y, |a, b| a * b));
    let mxy = mx.zip_map(&my, |a, b| a * b);
    let sxy = exy.zip_map(&mxy, |e, m| e - m);
    Moments {
        mx,
        my,
        sxx,
        syy,
        sxy,
    }
}

/// Mean SSIM over all pixels and channels, Gaussian 11x11 window, replicated borders.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    x.ensure_same_shape(y, "ssim inputs")?;
    let m = moments(x, y, &window());
    let n = x.len() as f64;
    let mut sum = 0.0;
    for i in 0..x.len() {
        let (mx, my) = (m.mx.data()[i], m.my.data()[i]);
        let num = (2.0 * mx * my + C1) * (2.0 * m.sxy.data()[i] + C2);
        let den = (mx * mx + my * my + C1) * (m.sxx.data()[i] + m.syy.data()[i] + C2);
        sum += num / den;
    }
    Ok(sum / n)
}

/// SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad(x: &Image, y: &Image) -> Result<(f64, Image)> {
    x.ensure_same_shape(y, "ssim inputs")?;
    let k = window();
    let m = moments(x, y, &k);
    let n = x.len() as f64;
    let mut sum = 0.0;
    let mut a = Image::new(x.width(), x.height(), x.channels());
    let mut b = a.clone();
    let mut c = a.clone();
    for i in 0..x.len() {
        let (mx, my) = (m.mx.data()[i], m.my.data()[i]);
        let n1 = 2.0 * mx * my + C1;
        let n2 = 2.0 * m.sxy.data()[i] + C2;
        let d1 = mx * mx + my * my + C1;
        let d2 = m.sxx.data()[i] + m.syy.data()[i] + C2;
        let s = n1 * n2 / (d1 * d2);
        sum += s;
        let ds_dmx = 2.0 * my * n2 / (d1 * d2) - s * 2.0 * mx / d1;
        let ds_dsxx = -s / d2;
        let ds_dsxy = 2.0 * n1 / (d1 * d2);
        // variances depend on the means too
        a.data_mut()[i] = (ds_dmx - 2.0 * mx * ds_dsxx - my * ds_dsxy) / n;
        b.data_mut()[i] = ds_dsxx / n;
        c.data_mut()[i] = ds_dsxy / n;
    }
    let ga = convolve_separable_adjoint(&a, &k, &k);
    let gb = convolve_separable_adjoint(&b, &k, &k);
    let gc = convolve_separable_adjoint(&c, &k, &k);
    let mut grad = ga;
    for i in 0..x.len() {
        grad.data_mut()[i] += 2.0 * x.data()[i] * gb.data()[i] + y.data()[i] * gc.data()[i];
    }
    Ok((sum / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, w: usize, h: usize, c: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, c, |_, _, _| rng.random())
    }

    /// Direct per-window evaluation with a 2D weight table.
    fn ssim_oracle(x: &Image, y: &Image) -> f64 {
        let r = SSIM_RADIUS as isize;
        let g: Vec<f64> = (-r..=r)
            .map(|k| (-((k * k) as f64) / (2.0 * 1.5 * 1.5)).exp())
            .collect();
        let total: f64 = g.iter().sum::<f64>().powi(2);
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
                    sum += (2.0 * mx * my + C1) * (2.0 * cxy + C2)
                        / ((mx * mx + my * my + C1) * (vx + vy + C2));
                }
            }
        }
        sum / x.len() as f64
    }

    #[test]
    fn identical_images_score_one() {
        let x = random(1, 9, 7, 3);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric() {
        let x = random(2, 12, 10, 3);
        let y = random(3, 12, 10, 3);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn matches_window_oracle() {
        let x = random(4, 13, 9, 3);
        let y = random(5, 13, 9, 3);
        assert!((ssim(&x, &y).unwrap() - ssim_oracle(&x, &y)).abs() <= 1e-5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = random(6, 8, 8, 3);
        let y = random(7, 8, 8, 3);
        let (v, g) = ssim_with_grad(&x, &y).unwrap();
        assert_eq!(v, ssim(&x, &y).unwrap());
        let h = 1e-6;
        for k in 0..x.len() {
            let mut a = x.clone();
            a.data_mut()[k] += h;
            let mut b = x.clone();
            b.data_mut()[k] -= h;
            let fd = (ssim(&a, &y).unwrap() - ssim(&b, &y).unwrap()) / (2.0 * h);
            let err = (fd - g.data()[k]).abs();
            assert!(
                err <= 1e-6 || err <= 1e-3 * fd.abs(),
                "{k}: {fd} vs {}",
                g.data()[k]
            );
        }
    }

    #[test]
    fn shape_mismatch() {
        assert!(ssim(&Image::new(4, 4, 3), &Image::new(4, 4, 1)).is_err());
    }
}
