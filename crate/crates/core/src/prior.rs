//! Illumination-invariant structure prior.
//!
//! RGB is mapped to the Gaussian color model planes (spectral intensity, slope and
//! curvature). Each plane is differentiated spatially with Gaussian-derivative
//! filters and divided by the locally smoothed intensity, so a global scaling of the
//! illumination cancels. The three gradient magnitudes are then combined into a
//! single edge-strength map.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{convolve_separable, gaussian_kernel, Image};
use crate::render::{render_scalar, RenderConfig};
use crate::scene::{Camera, GaussianCloud};

/// RGB to (E, E_lambda, E_lambdalambda).
pub const GAUSSIAN_COLOR_MODEL: [[f64; 3]; 3] =
    [[0.06, 0.63, 0.27], [0.3, 0.04, -0.35], [0.34, -0.6, 0.17]];

#[derive(Debug, Clone)]
pub struct SpectralTriple {
    pub e: Image,
    pub e_lambda: Image,
    pub e_lambdalambda: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Weight of the spectral-slope term.
    pub beta: f64,
    /// Weight of the spectral-curvature term.
    pub gamma: f64,
    /// Scale of the Gaussian derivative filters, in pixels.
    pub sigma: f64,
    pub epsilon: f64,
    /// The map is divided by this percentile of itself, then clamped to `[0, 1]`.
    pub normalize_percentile: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            beta: 1.0,
            gamma: 1.0,
            sigma: 1.0,
            epsilon: 1e-4,
            normalize_percentile: 99.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta >= 0.0
            && self.gamma >= 0.0
            && self.sigma > 0.0
            && self.epsilon > 0.0
            && self.normalize_percentile > 0.0
            && self.normalize_percentile <= 100.0
            && [self.beta, self.gamma, self.sigma, self.epsilon]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid prior config {self:?}"
            )))
        }
    }
}

pub fn rgb_to_spectral(img: &Image) -> Result<SpectralTriple> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!(
            "spectral transform needs 3 channels, got {}",
            img.channels()
        )));
    }
    let m = &GAUSSIAN_COLOR_MODEL;
    let plane = |row: &[f64; 3]| {
        let data = img
            .data()
            .chunks_exact(3)
            .map(|p| row[0] * p[0] + row[1] * p[1] + row[2] * p[2])
            .collect();
        Image::from_vec(img.width(), img.height(), 1, data).expect("shape preserved")
    };
    Ok(SpectralTriple {
        e: plane(&m[0]),
        e_lambda: plane(&m[1]),
        e_lambdalambda: plane(&m[2]),
    })
}

/// Unnormalized invariant edge strength.
pub fn prior_magnitude(img: &Image, cfg: &PriorConfig) -> Result<Image> {
    cfg.validate()?;
    let spectral = rgb_to_spectral(img)?;
    let d = gaussian_kernel(cfg.sigma, 1)?;
    let s = gaussian_kernel(cfg.sigma, 0)?;
    let e_smooth = convolve_separable(&spectral.e, &s, &s);
    let mut acc = Image::new(img.width(), img.height(), 1);
    for (plane, weight) in [
        (&spectral.e, 1.0),
        (&spectral.e_lambda, cfg.beta),
        (&spectral.e_lambdalambda, cfg.gamma),
    ] {
        if weight == 0.0 {
            continue;
        }
        let gx = convolve_separable(plane, &d, &s);
        let gy = convolve_separable(plane, &s, &d);
        acc.data_mut()
            .par_iter_mut()
            .zip(gx.data().par_iter().zip(gy.data()))
            .zip(e_smooth.data())
            .for_each(|((a, (x, y)), e)| {
                // E is non-negative for non-negative RGB; guard against noise-driven negatives.
                let denom = e.max(0.0) + cfg.epsilon;
                *a += weight * (x * x + y * y) / (denom * denom);
            });
    }
    Ok(acc.map(f64::sqrt))
}

/// Structure prior in `[0, 1]`.
pub fn extract_prior(img: &Image, cfg: &PriorConfig) -> Result<Image> {
    let raw = prior_magnitude(img, cfg)?;
    let scale = percentile(raw.data(), cfg.normalize_percentile).max(cfg.epsilon);
    Ok(raw.map(|v| (v / scale).clamp(0.0, 1.0)))
}

/// Linearly interpolated percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Stand-in depth target: the camera-space depth of each primitive composited like
/// any other attribute, divided by the accumulated weight, then min/max normalized.
/// Uncovered pixels take the farthest depth seen in the frame.
pub fn synthesize_depth_target(cloud: &GaussianCloud, cam: &Camera) -> Result<Image> {
    if cloud.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot synthesize depth from an empty cloud".into(),
        ));
    }
    let depths: Vec<f64> = cloud
        .positions
        .iter()
        .map(|p| cam.world_to_camera(p)[2])
        .collect();
    let (value, weight) = render_scalar(cloud, cam, &depths, &RenderConfig::default())?;
    let mut depth = Image::new(cam.width, cam.height, 1);
    let mut covered = Vec::with_capacity(depth.len());
    for i in 0..depth.len() {
        if weight.data()[i] > 1e-6 {
            let d = value.data()[i] / weight.data()[i];
            depth.data_mut()[i] = d;
            covered.push(d);
        }
    }
    if covered.is_empty() {
        return Ok(depth);
    }
    let lo = covered.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = covered.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for i in 0..depth.len() {
        if weight.data()[i] <= 1e-6 {
            depth.data_mut()[i] = hi;
        }
    }
    let range = hi - lo;
    Ok(depth.map(|d| if range > 1e-12 { (d - lo) / range } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pixel(rgb: [f64; 3]) -> Image {
        Image::from_vec(1, 1, 3, rgb.to_vec()).unwrap()
    }

    #[test]
    fn spectral_transform_columns() {
        let t = rgb_to_spectral(&pixel([1.0, 0.0, 0.0])).unwrap();
        assert_eq!(
            (
                t.e.data()[0],
                t.e_lambda.data()[0],
                t.e_lambdalambda.data()[0]
            ),
            (0.06, 0.3, 0.34)
        );
        let t = rgb_to_spectral(&pixel([0.0; 3])).unwrap();
        assert_eq!(t.e.data()[0], 0.0);
        let t = rgb_to_spectral(&pixel([1.0; 3])).unwrap();
        assert!((t.e.data()[0] - 0.96).abs() < 1e-12);
        assert!((t.e_lambda.data()[0] + 0.01).abs() < 1e-12);
        assert!((t.e_lambdalambda.data()[0] + 0.09).abs() < 1e-12);
    }

    #[test]
    fn wrong_channel_count() {
        assert!(rgb_to_spectral(&Image::new(2, 2, 1)).is_err());
        assert!(extract_prior(&Image::new(2, 2, 1), &PriorConfig::default()).is_err());
    }

    #[test]
    fn constant_image_has_zero_prior() {
        let img = Image::filled(12, 9, 3, 0.42);
        let p = extract_prior(&img, &PriorConfig::default()).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
        let black = Image::new(5, 5, 3);
        let p = extract_prior(&black, &PriorConfig::default()).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn halving_intensity_keeps_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Image::from_fn(24, 20, 3, |_, _, _| 0.2 + 0.8 * rng.random::<f64>());
        let cfg = PriorConfig::default();
        let a = extract_prior(&img, &cfg).unwrap();
        let b = extract_prior(&img.scaled(0.5), &cfg).unwrap();
        assert!(a.mean_abs_diff(&b) <= 1e-3);
    }

    #[test]
    fn step_edge_in_red_is_localized() {
        let img = Image::from_fn(20, 6, 3, |x, _, c| match c {
            0 if x >= 10 => 0.8,
            0 => 0.2,
            _ => 0.5,
        });
        let p = extract_prior(&img, &PriorConfig::default()).unwrap();
        for y in 0..6 {
            assert!(p.get(9, y, 0) > 0.5 && p.get(10, y, 0) > 0.5);
            for x in (0..6).chain(14..20) {
                assert_eq!(p.get(x, y, 0), 0.0, "x={x}");
            }
        }
    }

    #[test]
    fn intensity_only_term_matches_single_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Image::from_fn(10, 9, 3, |_, _, _| 0.1 + rng.random::<f64>());
        let cfg = PriorConfig {
            beta: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        let got = prior_magnitude(&img, &cfg).unwrap();
        // straight-line oracle: dense 2D filters on the E plane
        let d = gaussian_kernel(1.0, 1).unwrap();
        let s = gaussian_kernel(1.0, 0).unwrap();
        let e = Image::from_fn(10, 9, 1, |x, y, _| {
            0.06 * img.get(x, y, 0) + 0.63 * img.get(x, y, 1) + 0.27 * img.get(x, y, 2)
        });
        let r = 3isize;
        let at = |x: isize, y: isize| e.get(x.clamp(0, 9) as usize, y.clamp(0, 8) as usize, 0);
        for y in 0..9isize {
            for x in 0..10isize {
                let (mut gx, mut gy, mut es) = (0.0, 0.0, 0.0);
                for j in -r..=r {
                    for i in -r..=r {
                        let v = at(x - i, y - j);
                        gx += d.at(i) * s.at(j) * v;
                        gy += s.at(i) * d.at(j) * v;
                        es += s.at(i) * s.at(j) * v;
                    }
                }
                let expect = (gx * gx + gy * gy).sqrt() / (es + 1e-4);
                assert!((got.get(x as usize, y as usize, 0) - expect).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn output_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Image::from_fn(16, 16, 3, |_, _, _| rng.random::<f64>());
        let p = extract_prior(&img, &PriorConfig::default()).unwrap();
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_config_rejected() {
        let img = Image::filled(4, 4, 3, 0.5);
        for cfg in [
            PriorConfig {
                sigma: 0.0,
                ..Default::default()
            },
            PriorConfig {
                beta: -1.0,
                ..Default::default()
            },
            PriorConfig {
                epsilon: 0.0,
                ..Default::default()
            },
            PriorConfig {
                normalize_percentile: 0.0,
                ..Default::default()
            },
        ] {
            assert!(extract_prior(&img, &cfg).is_err());
        }
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 50.0), 5.0);
        assert_eq!(percentile(&v, 100.0), 10.0);
        assert!((percentile(&v, 99.0) - 9.9).abs() < 1e-12);
    }
}
