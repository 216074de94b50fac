//! Tile-based front-to-back compositing of every per-primitive channel in one pass.

mod backward;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::sh;
use crate::scene::{project, Camera, GaussianCloud, Projected};

pub use backward::{render_backward, ChannelAdjoints};

/// Composited channels: rgb, structure, depth, illumination (3), noise (3).
pub const NUM_CHANNELS: usize = 11;
pub(crate) const CH_RGB: usize = 0;
pub(crate) const CH_P: usize = 3;
pub(crate) const CH_D: usize = 4;
pub(crate) const CH_L: usize = 5;
pub(crate) const CH_N: usize = 8;

/// Screen ellipses with a determinant below this are skipped.
pub const MIN_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub tile_size: usize,
    /// Contributions with `alpha` below this are skipped.
    pub min_alpha: f64,
    /// Compositing stops before transmittance would drop below this.
    pub min_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            tile_size: 16,
            min_alpha: 1.0 / 255.0,
            min_transmittance: 1e-4,
        }
    }
}

impl RenderConfig {
    /// No skipping and no early termination.
    pub fn exact() -> Self {
        RenderConfig {
            min_alpha: 0.0,
            min_transmittance: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::InvalidArgument("tile size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.min_alpha) || !(0.0..1.0).contains(&self.min_transmittance) {
            return Err(Error::InvalidArgument(
                "render thresholds must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn bbox_cutoff(&self) -> f64 {
        self.min_alpha.max(1e-12)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RenderStats {
    pub contributors_mean: f64,
    pub contributors_max: usize,
    /// Outside the clip range.
    pub culled: usize,
    /// Degenerate screen covariance.
    pub skipped: usize,
}

/// Per-frame state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RenderAux {
    pub(crate) camera: Camera,
    pub(crate) config: RenderConfig,
    pub(crate) n_primitives: usize,
    pub(crate) frame: Frame,
    pub(crate) features: Vec<[f64; NUM_CHANNELS]>,
    /// Color channels that hit the lower clamp.
    pub(crate) color_clamped: Vec<[bool; 3]>,
    pub(crate) background: [f64; NUM_CHANNELS],
    /// Per pixel: number of tile-list entries walked during compositing.
    pub(crate) walked: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub r0: Image,
    pub pr: Image,
    pub dr: Image,
    pub lr: Image,
    pub ngs: Image,
    pub transmittance: Image,
    pub contributors: Vec<u32>,
    pub stats: RenderStats,
    pub aux: RenderAux,
}

pub fn render_stats(out: &RenderOutput) -> RenderStats {
    out.stats
}

impl RenderOutput {
    /// Primitives that landed in at least one tile.
    pub fn visible(&self) -> Vec<bool> {
        let mut v = vec![false; self.aux.n_primitives];
        for list in &self.aux.frame.lists {
            for &i in list {
                v[i as usize] = true;
            }
        }
        v
    }
}

/// Projected primitives binned into screen tiles, each list sorted front to back.
#[derive(Debug, Clone)]
pub(crate) struct Frame {
    pub width: usize,
    pub height: usize,
    pub tile: usize,
    pub tiles_x: usize,
    pub projected: Vec<Projected>,
    pub conics: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub lists: Vec<Vec<u32>>,
    pub culled: usize,
    pub skipped: usize,
}

impl Frame {
    fn build(cloud: &GaussianCloud, cam: &Camera, cfg: &RenderConfig) -> Frame {
        let (w, h, tile) = (cam.width, cam.height, cfg.tile_size);
        let tiles_x = w.div_ceil(tile);
        let tiles_y = h.div_ceil(tile);
        let projected = project(cloud, cam);
        let n = cloud.len();
        let mut conics = vec![[0.0; 3]; n];
        let opacity: Vec<f64> = (0..n).map(|i| cloud.opacity(i)).collect();
        let (mut culled, mut skipped) = (0, 0);
        let mut visible = Vec::with_capacity(n);
        for (i, p) in projected.iter().enumerate() {
            if p.culled {
                culled += 1;
                continue;
            }
            if !(p.det() >= MIN_DET) || !p.mean[0].is_finite() || !p.mean[1].is_finite() {
                skipped += 1;
                continue;
            }
            conics[i] = p.conic();
            visible.push(i);
        }
        visible.sort_by(|&a, &b| {
            projected[a]
                .depth
                .total_cmp(&projected[b].depth)
                .then(a.cmp(&b))
        });

        let cut = cfg.bbox_cutoff();
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for &i in &visible {
            let o = opacity[i];
            if o <= cut {
                continue;
            }
            let r = (2.0 * (o / cut).ln()).sqrt();
            let p = &projected[i];
            let ex = r * p.cov[0].sqrt();
            let ey = r * p.cov[2].sqrt();
            let x0 = (p.mean[0] - ex).ceil().max(0.0);
            let x1 = (p.mean[0] + ex).floor().min(w as f64 - 1.0);
            let y0 = (p.mean[1] - ey).ceil().max(0.0);
            let y1 = (p.mean[1] + ey).floor().min(h as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let (tx0, tx1) = (x0 as usize / tile, x1 as usize / tile);
            let (ty0, ty1) = (y0 as usize / tile, y1 as usize / tile);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    lists[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
        Frame {
            width: w,
            height: h,
            tile,
            tiles_x,
            projected,
            conics,
            opacity,
            lists,
            culled,
            skipped,
        }
    }

    /// Pixel rectangle `(x0, x1, y0, y1)` (exclusive ends) of tile `t`.
    pub fn tile_rect(&self, t: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        (
            x0,
            (x0 + self.tile).min(self.width),
            y0,
            (y0 + self.tile).min(self.height),
        )
    }

    /// Falloff `exp(-q/2)` of primitive `i` at pixel `(x, y)`, with the offsets.
    #[inline]
    pub fn falloff(&self, i: usize, x: usize, y: usize) -> (f64, f64, f64) {
        let p = &self.projected[i];
        let dx = x as f64 - p.mean[0];
        let dy = y as f64 - p.mean[1];
        let [a, b, c] = self.conics[i];
        let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        ((-0.5 * q).exp(), dx, dy)
    }
}

struct PixelResult<const F: usize> {
    value: [f64; F],
    transmittance: f64,
    walked: u32,
    contributors: u32,
}

fn composite_pixel<const F: usize>(
    frame: &Frame,
    list: &[u32],
    features: &[[f64; F]],
    bg: &[f64; F],
    cfg: &RenderConfig,
    x: usize,
    y: usize,
) -> PixelResult<F> {
    let mut value = [0.0; F];
    let mut t = 1.0;
    let mut walked = 0;
    let mut contributors = 0;
    for (pos, &i) in list.iter().enumerate() {
        let i = i as usize;
        let (g, _, _) = frame.falloff(i, x, y);
        let alpha = frame.opacity[i] * g;
        if alpha < cfg.min_alpha {
            continue;
        }
        let next_t = t * (1.0 - alpha);
        if next_t < cfg.min_transmittance {
            break;
        }
        let wgt = alpha * t;
        for (v, f) in value.iter_mut().zip(&features[i]) {
            *v += f * wgt;
        }
        t = next_t;
        walked = pos as u32 + 1;
        contributors += 1;
    }
    for (v, b) in value.iter_mut().zip(bg) {
        *v += t * b;
    }
    PixelResult {
        value,
        transmittance: t,
        walked,
        contributors,
    }
}

struct Raster<const F: usize> {
    values: Vec<[f64; F]>,
    transmittance: Vec<f64>,
    walked: Vec<u32>,
    contributors: Vec<u32>,
}

fn rasterize<const F: usize>(
    frame: &Frame,
    features: &[[f64; F]],
    bg: &[f64; F],
    cfg: &RenderConfig,
) -> Raster<F> {
    let (w, h) = (frame.width, frame.height);
    let tiles: Vec<Vec<(usize, PixelResult<F>)>> = (0..frame.lists.len())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = frame.tile_rect(t);
            let list = &frame.lists[t];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    out.push((
                        y * w + x,
                        composite_pixel(frame, list, features, bg, cfg, x, y),
                    ));
                }
            }
            out
        })
        .collect();
    let mut r = Raster {
        values: vec![[0.0; F]; w * h],
        transmittance: vec![1.0; w * h],
        walked: vec![0; w * h],
        contributors: vec![0; w * h],
    };
    for (px, res) in tiles.into_iter().flatten() {
        r.values[px] = res.value;
        r.transmittance[px] = res.transmittance;
        r.walked[px] = res.walked;
        r.contributors[px] = res.contributors;
    }
    r
}

/// Unit vector from the camera center to each primitive.
pub(crate) fn view_direction(
    cloud: &GaussianCloud,
    i: usize,
    center: &[f64; 3],
) -> ([f64; 3], f64) {
    let p = cloud.positions[i];
    let v = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    ([v[0] / n, v[1] / n, v[2] / n], n)
}

/// View-dependent color before clamping.
pub(crate) fn raw_color(cloud: &GaussianCloud, i: usize, dir: [f64; 3]) -> [f64; 3] {
    let (basis, _) = sh::basis(cloud.sh_degree, dir);
    let mut c = [0.5; 3];
    for (k, b) in basis.iter().enumerate().take(cloud.active_sh_coeffs()) {
        for ch in 0..3 {
            c[ch] += b * cloud.sh[i][k][ch];
        }
    }
    c
}

fn primitive_features(
    cloud: &GaussianCloud,
    cam: &Camera,
) -> (Vec<[f64; NUM_CHANNELS]>, Vec<[bool; 3]>) {
    let center = cam.center();
    (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let (dir, _) = view_direction(cloud, i, &center);
            let raw = raw_color(cloud, i, dir);
            let mut f = [0.0; NUM_CHANNELS];
            let mut clamped = [false; 3];
            for ch in 0..3 {
                clamped[ch] = raw[ch] < 0.0;
                f[CH_RGB + ch] = raw[ch].max(0.0);
            }
            f[CH_P] = cloud.structure(i);
            f[CH_D] = cloud.depth_attr(i);
            let l = cloud.illumination(i);
            f[CH_L..CH_L + 3].copy_from_slice(&l);
            f[CH_N..CH_N + 3].copy_from_slice(&cloud.noise[i]);
            (f, clamped)
        })
        .unzip()
}

fn check_inputs(cloud: &GaussianCloud, cam: &Camera, cfg: &RenderConfig) -> Result<()> {
    cam.validate()?;
    cfg.validate()?;
    cloud.check_consistent()
}

pub fn render(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: [f64; 3],
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    check_inputs(cloud, cam, cfg)?;
    let frame = Frame::build(cloud, cam, cfg);
    let (features, color_clamped) = primitive_features(cloud, cam);
    let mut bg = [0.0; NUM_CHANNELS];
    bg[..3].copy_from_slice(&background);
    let raster = rasterize(&frame, &features, &bg, cfg);

    let (w, h) = (cam.width, cam.height);
    let pick = |from: usize, n: usize| {
        let data: Vec<f64> = raster
            .values
            .iter()
            .flat_map(|v| v[from..from + n].iter().copied())
            .collect();
        Image::from_vec(w, h, n, data).expect("shape")
    };
    let n_px = (w * h) as f64;
    let stats = RenderStats {
        contributors_mean: raster.contributors.iter().map(|&c| c as f64).sum::<f64>() / n_px,
        contributors_max: raster.contributors.iter().copied().max().unwrap_or(0) as usize,
        culled: frame.culled,
        skipped: frame.skipped,
    };
    Ok(RenderOutput {
        r0: pick(CH_RGB, 3),
        pr: pick(CH_P, 1),
        dr: pick(CH_D, 1),
        lr: pick(CH_L, 3),
        ngs: pick(CH_N, 3),
        transmittance: Image::from_vec(w, h, 1, raster.transmittance).expect("shape"),
        contributors: raster.contributors,
        stats,
        aux: RenderAux {
            camera: cam.clone(),
            config: *cfg,
            n_primitives: cloud.len(),
            frame,
            features,
            color_clamped,
            background: bg,
            walked: raster.walked,
        },
    })
}

/// Composites one scalar per primitive with zero background. Returns the value and
/// the accumulated alpha weight.
pub fn render_scalar(
    cloud: &GaussianCloud,
    cam: &Camera,
    values: &[f64],
    cfg: &RenderConfig,
) -> Result<(Image, Image)> {
    check_inputs(cloud, cam, cfg)?;
    if values.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "{} values for {} primitives",
            values.len(),
            cloud.len()
        )));
    }
    let frame = Frame::build(cloud, cam, cfg);
    let feats: Vec<[f64; 1]> = values.iter().map(|&v| [v]).collect();
    let raster = rasterize(&frame, &feats, &[0.0], cfg);
    let (w, h) = (cam.width, cam.height);
    let value =
        Image::from_vec(w, h, 1, raster.values.iter().map(|v| v[0]).collect()).expect("shape");
    let weight = Image::from_vec(
        w,
        h,
        1,
        raster.transmittance.iter().map(|t| 1.0 - t).collect(),
    )
    .expect("shape");
    Ok((value, weight))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::logit;

    pub(crate) fn wide_primitive(opacity: f64) -> GaussianCloud {
        let mut c = GaussianCloud::from_points(&[[0.0, 0.0, 2.0]], &[[0.3, 0.6, 0.9]]).unwrap();
        c.log_scales[0] = [3.0f64.ln(); 3];
        c.opacity_logits[0] = logit(opacity);
        c.structure_logits[0] = logit(0.7);
        c
    }

    #[test]
    fn empty_cloud_renders_background() {
        let cam = Camera::identity(20, 18, 20.0);
        let out = render(
            &GaussianCloud::default(),
            &cam,
            [0.0; 3],
            &RenderConfig::default(),
        )
        .unwrap();
        for img in [&out.r0, &out.pr, &out.dr, &out.lr, &out.ngs] {
            assert!(img.data().iter().all(|&v| v == 0.0));
        }
        assert!(out.transmittance.data().iter().all(|&t| t == 1.0));
        assert_eq!(out.stats, RenderStats::default());
        let out = render(
            &GaussianCloud::default(),
            &cam,
            [0.2, 0.4, 0.6],
            &RenderConfig::default(),
        )
        .unwrap();
        assert_eq!(out.r0.get(3, 7, 2), 0.6);
        assert_eq!(out.pr.get(3, 7, 0), 0.0);
    }

    #[test]
    fn single_wide_primitive_structure_value() {
        let cam = Camera::identity(16, 16, 10.0);
        let out = render(
            &wide_primitive(0.99),
            &cam,
            [0.0; 3],
            &RenderConfig::default(),
        )
        .unwrap();
        let v = out.pr.get(8, 8, 0);
        assert!((v - 0.99 * 0.7).abs() < 1e-3, "{v}");
        assert!((out.stats.contributors_mean - 1.0).abs() < 1e-12);
        assert_eq!(out.stats.contributors_max, 1);
    }

    #[test]
    fn opaque_occluder_hides_background() {
        let cam = Camera::identity(8, 8, 10.0);
        let mut c = wide_primitive(0.99);
        c.push_copy(0);
        c.positions[1][2] = 3.0;
        let cfg = RenderConfig::exact();
        for k in 0..2 {
            c.opacity_logits[k] = 40.0;
        }
        let out = render(&c, &cam, [1.0; 3], &cfg).unwrap();
        assert!(out.transmittance.get(4, 4, 0) < 1e-12);
    }

    #[test]
    fn weights_are_bounded() {
        let cam = Camera::identity(16, 12, 12.0);
        let pts: Vec<[f64; 3]> = (0..12)
            .map(|i| {
                [
                    0.1 * i as f64 - 0.5,
                    0.05 * i as f64 - 0.3,
                    2.0 + 0.1 * i as f64,
                ]
            })
            .collect();
        let mut c = GaussianCloud::from_points(&pts, &vec![[0.5; 3]; 12]).unwrap();
        c.opacity_logits.iter_mut().for_each(|o| *o = 3.0);
        let out = render(&c, &cam, [0.0; 3], &RenderConfig::default()).unwrap();
        for v in out.pr.data().iter().chain(out.dr.data()) {
            assert!((0.0..=1.0).contains(v));
        }
        for t in out.transmittance.data() {
            assert!((0.0..=1.0).contains(t));
        }
        assert!(out.lr.data().iter().all(|&v| v >= 0.0));
        assert!(out.r0.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn culled_and_degenerate_primitives_are_counted() {
        let cam = Camera::identity(8, 8, 10.0);
        let mut c = GaussianCloud::from_points(
            &[
                [0.0, 0.0, 2.0],
                [0.0, 0.0, -1.0],
                [0.0, 0.0, 500.0],
                [0.1, 0.0, 2.0],
            ],
            &[[0.5; 3]; 4],
        )
        .unwrap();
        let out = render(&c, &cam, [0.0; 3], &RenderConfig::default()).unwrap();
        assert_eq!((out.stats.culled, out.stats.skipped), (2, 0));
        c.rotations[3] = [0.0; 4];
        let out = render(&c, &cam, [0.0; 3], &RenderConfig::default()).unwrap();
        assert_eq!((out.stats.culled, out.stats.skipped), (2, 1));
        assert!(out.r0.is_finite());
    }

    #[test]
    fn deterministic() {
        let cam = Camera::identity(40, 24, 30.0);
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|i| {
                [
                    (i as f64 * 0.37).sin(),
                    (i as f64 * 0.91).cos() * 0.6,
                    2.0 + (i % 7) as f64 * 0.2,
                ]
            })
            .collect();
        let c = GaussianCloud::from_points(&pts, &vec![[0.4; 3]; 50]).unwrap();
        let a = render(&c, &cam, [0.1; 3], &RenderConfig::default()).unwrap();
        let b = render(&c, &cam, [0.1; 3], &RenderConfig::default()).unwrap();
        assert_eq!(a.r0, b.r0);
        assert_eq!(a.ngs, b.ngs);
    }

    #[test]
    fn render_scalar_matches_channel() {
        let cam = Camera::identity(16, 16, 10.0);
        let c = wide_primitive(0.8);
        let vals = vec![0.7];
        let (v, w) = render_scalar(&c, &cam, &vals, &RenderConfig::default()).unwrap();
        let out = render(&c, &cam, [0.0; 3], &RenderConfig::default()).unwrap();
        assert!(v.max_abs_diff(&out.pr) < 1e-15);
        assert!((w.get(8, 8, 0) - (1.0 - out.transmittance.get(8, 8, 0))).abs() < 1e-15);
        assert!(render_scalar(&c, &cam, &[], &RenderConfig::default()).is_err());
    }
}
