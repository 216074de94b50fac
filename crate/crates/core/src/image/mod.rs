//! Float rasters and the separable filtering primitives every other module builds on.
//!
//! Pixels are stored row-major with interleaved channels: the sample for
//! `(x, y, c)` lives at `(y * width + x) * channels + c`. Filters replicate the
//! edge pixel for out-of-range taps.

mod io;

pub use io::{load_image, load_pfm, save_image, save_pfm, save_png};

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidArgument(
                "image needs at least one channel".into(),
            ));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        debug_assert!(self.same_shape(other));
        Image {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        assert!(c < self.channels);
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self
                .data
                .iter()
                .skip(c)
                .step_by(self.channels)
                .copied()
                .collect(),
        }
    }

    /// Element-wise `self += k * other`.
    pub fn add_scaled(&mut self, other: &Image, k: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn scaled(&self, k: f64) -> Image {
        self.map(|v| v * k)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        debug_assert!(self.same_shape(other));
        if self.data.is_empty() {
            return 0.0;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }
}

/// Odd-length 1D filter, applied as a true convolution `out[x] = sum_k taps[k] * in[x - k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel1D {
    taps: Vec<f64>,
    parity: Parity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Parity {
    Even,
    Odd,
    None,
}

impl Kernel1D {
    pub fn new(taps: Vec<f64>) -> Result<Self> {
        if taps.len() % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel length must be odd, got {}",
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("kernel taps must be finite".into()));
        }
        let r = taps.len() / 2;
        let parity = if (1..=r).all(|k| taps[r + k] == taps[r - k]) {
            Parity::Even
        } else if taps[r] == 0.0 && (1..=r).all(|k| taps[r + k] == -taps[r - k]) {
            Parity::Odd
        } else {
            Parity::None
        };
        Ok(Kernel1D { taps, parity })
    }

    pub fn identity() -> Self {
        Kernel1D {
            taps: vec![1.0],
            parity: Parity::Even,
        }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    /// Tap at signed offset `k` in `-radius..=radius`.
    #[inline]
    pub fn at(&self, k: isize) -> f64 {
        self.taps[(k + self.radius() as isize) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    /// Convolves one strided line with edge replication.
    fn apply_line(&self, src: impl Fn(usize) -> f64, len: usize, mut dst: impl FnMut(usize, f64)) {
        let r = self.radius() as isize;
        let last = len as isize - 1;
        let at = |i: isize| src(i.clamp(0, last) as usize);
        for x in 0..len as isize {
            let v = match self.parity {
                // Pairing taps keeps constant input mapped to an exact constant (even)
                // or exact zero (odd).
                Parity::Even => {
                    let mut acc = self.at(0) * at(x);
                    for k in 1..=r {
                        acc += self.at(k) * (at(x - k) + at(x + k));
                    }
                    acc
                }
                Parity::Odd => {
                    let mut acc = 0.0;
                    for k in 1..=r {
                        acc += self.at(k) * (at(x - k) - at(x + k));
                    }
                    acc
                }
                Parity::None => {
                    let mut acc = 0.0;
                    for k in -r..=r {
                        acc += self.at(k) * at(x - k);
                    }
                    acc
                }
            };
            dst(x as usize, v);
        }
    }
}

/// Sampled Gaussian (`order == 0`) or first-derivative-of-Gaussian (`order == 1`)
/// kernel truncated at `ceil(3 sigma)`.
///
/// The smoothing kernel is normalized to unit sum. The derivative kernel is scaled so
/// that convolving the ramp `g(x) = x` gives exactly 1.
pub fn gaussian_kernel(sigma: f64, order: u32) -> Result<Kernel1D> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    gaussian_kernel_with_radius(sigma, order, radius)
}

pub fn gaussian_kernel_with_radius(sigma: f64, order: u32, radius: usize) -> Result<Kernel1D> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let r = radius as isize;
    let g = |k: isize| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp();
    let taps = match order {
        0 => {
            let raw: Vec<f64> = (-r..=r).map(g).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|t| t / s).collect()
        }
        1 => {
            if radius == 0 {
                return Err(Error::InvalidArgument(
                    "derivative kernel needs radius >= 1".into(),
                ));
            }
            let mut taps = vec![0.0; 2 * radius + 1];
            for k in 1..=r {
                let t = -(k as f64) * g(k);
                taps[(r + k) as usize] = t;
                taps[(r - k) as usize] = -t;
            }
            // ramp response is -sum_k k * t_k
            let response: f64 = (-r..=r).map(|k| -(k as f64) * taps[(k + r) as usize]).sum();
            taps.into_iter().map(|t| t / response).collect()
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unsupported derivative order {order}"
            )))
        }
    };
    Kernel1D::new(taps)
}

/// Images needing fewer multiply-adds than this are filtered on the calling thread.
const PAR_MIN_WORK: usize = 1 << 16;

/// Per-channel separable convolution: `kx` along rows, then `ky` along columns.
pub fn convolve_separable(img: &Image, kx: &Kernel1D, ky: &Kernel1D) -> Image {
    let (w, h, ch) = (img.width, img.height, img.channels);
    if img.is_empty() {
        return img.clone();
    }
    let row_len = w * ch;
    let small = img.data.len() * (kx.taps.len() + ky.taps.len()) < PAR_MIN_WORK;
    let mut tmp = vec![0.0; img.data.len()];
    let horizontal = |(dst, src): (&mut [f64], &[f64])| {
        for c in 0..ch {
            kx.apply_line(|x| src[x * ch + c], w, |x, v| dst[x * ch + c] = v);
        }
    };
    if small {
        tmp.chunks_mut(row_len)
            .zip(img.data.chunks(row_len))
            .for_each(horizontal);
    } else {
        tmp.par_chunks_mut(row_len)
            .zip(img.data.par_chunks(row_len))
            .for_each(horizontal);
    }
    let mut out = vec![0.0; img.data.len()];
    let r = ky.radius() as isize;
    let last = h as isize - 1;
    let vertical = |(y, dst): (usize, &mut [f64])| {
        let y = y as isize;
        let row = |k: isize| {
            let yy = (y - k).clamp(0, last) as usize;
            &tmp[yy * row_len..(yy + 1) * row_len]
        };
        match ky.parity {
            Parity::Even => {
                let t0 = ky.at(0);
                let center = row(0);
                for (d, s) in dst.iter_mut().zip(center) {
                    *d = t0 * s;
                }
                for k in 1..=r {
                    let (a, b, t) = (row(k), row(-k), ky.at(k));
                    for i in 0..row_len {
                        dst[i] += t * (a[i] + b[i]);
                    }
                }
            }
            Parity::Odd => {
                dst.fill(0.0);
                for k in 1..=r {
                    let (a, b, t) = (row(k), row(-k), ky.at(k));
                    for i in 0..row_len {
                        dst[i] += t * (a[i] - b[i]);
                    }
                }
            }
            Parity::None => {
                dst.fill(0.0);
                for k in -r..=r {
                    let (a, t) = (row(k), ky.at(k));
                    for i in 0..row_len {
                        dst[i] += t * a[i];
                    }
                }
            }
        }
    };
    if small {
        out.chunks_mut(row_len).enumerate().for_each(vertical);
    } else {
        out.par_chunks_mut(row_len).enumerate().for_each(vertical);
    }
    Image {
        width: w,
        height: h,
        channels: ch,
        data: out,
    }
}

/// Transpose of [`convolve_separable`]: maps an adjoint on the output back to the input.
pub fn convolve_separable_adjoint(grad: &Image, kx: &Kernel1D, ky: &Kernel1D) -> Image {
    let (w, h, ch) = (grad.width, grad.height, grad.channels);
    if grad.is_empty() {
        return grad.clone();
    }
    let row_len = w * ch;
    // vertical transpose
    let ry = ky.radius() as isize;
    let last_y = h as isize - 1;
    let mut tmp = vec![0.0; grad.data.len()];
    for y in 0..h as isize {
        let src = &grad.data[y as usize * row_len..(y as usize + 1) * row_len];
        for k in -ry..=ry {
            let t = ky.at(k);
            let yy = (y - k).clamp(0, last_y) as usize;
            let dst = &mut tmp[yy * row_len..(yy + 1) * row_len];
            for i in 0..row_len {
                dst[i] += t * src[i];
            }
        }
    }
    // horizontal transpose, rows independent
    let rx = kx.radius() as isize;
    let last_x = w as isize - 1;
    let mut out = vec![0.0; grad.data.len()];
    let horizontal = |(dst, src): (&mut [f64], &[f64])| {
        for x in 0..w as isize {
            for k in -rx..=rx {
                let t = kx.at(k);
                let xx = (x - k).clamp(0, last_x) as usize;
                for c in 0..ch {
                    dst[xx * ch + c] += t * src[x as usize * ch + c];
                }
            }
        }
    };
    if grad.data.len() * kx.taps.len() < PAR_MIN_WORK {
        out.chunks_mut(row_len)
            .zip(tmp.chunks(row_len))
            .for_each(horizontal);
    } else {
        out.par_chunks_mut(row_len)
            .zip(tmp.par_chunks(row_len))
            .for_each(horizontal);
    }
    Image {
        width: w,
        height: h,
        channels: ch,
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, c, |_, _, _| rng.random::<f64>())
    }

    /// Dense 2D convolution with clamped indices.
    fn dense_oracle(img: &Image, kx: &Kernel1D, ky: &Kernel1D) -> Image {
        let (w, h) = (img.width() as isize, img.height() as isize);
        let (rx, ry) = (kx.radius() as isize, ky.radius() as isize);
        Image::from_fn(img.width(), img.height(), img.channels(), |x, y, c| {
            let mut acc = 0.0;
            for j in -ry..=ry {
                for i in -rx..=rx {
                    let yy = (y as isize - j).clamp(0, h - 1) as usize;
                    let xx = (x as isize - i).clamp(0, w - 1) as usize;
                    acc += ky.at(j) * kx.at(i) * img.get(xx, yy, c);
                }
            }
            acc
        })
    }

    #[test]
    fn smoothing_kernel_sigma_one_has_seven_symmetric_taps() {
        let k = gaussian_kernel(1.0, 0).unwrap();
        assert_eq!(k.taps().len(), 7);
        assert!((k.sum() - 1.0).abs() < 1e-12);
        for i in 1..=3 {
            assert_eq!(k.at(i), k.at(-i));
        }
    }

    #[test]
    fn derivative_kernel_is_antisymmetric() {
        let k = gaussian_kernel(1.0, 1).unwrap();
        assert_eq!(k.taps().len(), 7);
        assert!(k.sum().abs() < 1e-12);
        for i in 1..=3 {
            assert_eq!(k.at(i), -k.at(-i));
        }
        assert_eq!(k.at(0), 0.0);
    }

    #[test]
    fn ramp_derivative_is_one_in_interior() {
        for &sigma in &[0.7, 1.0, 2.0] {
            let d = gaussian_kernel(sigma, 1).unwrap();
            let s = gaussian_kernel(sigma, 0).unwrap();
            let img = Image::from_fn(32, 8, 1, |x, _, _| x as f64);
            let out = convolve_separable(&img, &d, &s);
            let r = d.radius();
            for y in 0..8 {
                for x in r..32 - r {
                    assert!(
                        (out.get(x, y, 0) - 1.0).abs() < 1e-12,
                        "sigma {sigma} x {x}"
                    );
                }
            }
        }
    }

    #[test]
    fn non_positive_sigma_rejected() {
        assert!(gaussian_kernel(0.0, 0).is_err());
        assert!(gaussian_kernel(-1.0, 1).is_err());
        assert!(gaussian_kernel(f64::NAN, 0).is_err());
        assert!(gaussian_kernel(1.0, 2).is_err());
    }

    #[test]
    fn constant_image_derivative_is_exactly_zero() {
        let img = Image::filled(9, 7, 3, 0.37);
        let d = gaussian_kernel(1.3, 1).unwrap();
        let s = gaussian_kernel(1.3, 0).unwrap();
        assert!(convolve_separable(&img, &d, &s)
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(convolve_separable(&img, &s, &d)
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernels_are_noop() {
        let img = random_image(6, 5, 3, 1);
        let id = Kernel1D::identity();
        assert_eq!(convolve_separable(&img, &id, &id), img);
    }

    #[test]
    fn separable_matches_dense_oracle_5x5() {
        let img = random_image(5, 5, 1, 7);
        let d = gaussian_kernel(1.0, 1).unwrap();
        let s = gaussian_kernel(1.0, 0).unwrap();
        let asym = Kernel1D::new(vec![0.1, -0.4, 0.9, 0.2, 0.05]).unwrap();
        for (kx, ky) in [(&d, &s), (&s, &d), (&s, &s), (&asym, &d)] {
            let a = convolve_separable(&img, kx, ky);
            let b = dense_oracle(&img, kx, ky);
            assert!(a.max_abs_diff(&b) <= 1e-6);
        }
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let x = random_image(7, 6, 2, 3);
        let y = random_image(7, 6, 2, 4);
        let kx = Kernel1D::new(vec![0.1, -0.4, 0.9, 0.2, 0.05]).unwrap();
        let ky = gaussian_kernel(1.0, 1).unwrap();
        let ax = convolve_separable(&x, &kx, &ky);
        let aty = convolve_separable_adjoint(&y, &kx, &ky);
        let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn even_length_kernel_rejected() {
        assert!(Kernel1D::new(vec![0.5, 0.5]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn separable_equals_dense(w in 1usize..=16, h in 1usize..=16, seed in 0u64..1000, sigma in 0.3f64..2.5) {
            let img = random_image(w, h, 2, seed);
            let d = gaussian_kernel(sigma, 1).unwrap();
            let s = gaussian_kernel(sigma, 0).unwrap();
            let a = convolve_separable(&img, &d, &s);
            let b = dense_oracle(&img, &d, &s);
            proptest::prop_assert!(a.max_abs_diff(&b) <= 1e-6);
        }

        #[test]
        fn convolution_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = random_image(9, 8, 1, seed);
            let y = random_image(9, 8, 1, seed + 1);
            let d = gaussian_kernel(1.0, 1).unwrap();
            let s = gaussian_kernel(1.0, 0).unwrap();
            let combo = x.zip_map(&y, |p, q| a * p + b * q);
            let lhs = convolve_separable(&combo, &s, &d);
            let cx = convolve_separable(&x, &s, &d);
            let cy = convolve_separable(&y, &s, &d);
            let rhs = cx.zip_map(&cy, |p, q| a * p + b * q);
            proptest::prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
        }
    }
}
