use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, save_pfm, save_png, Image};
use crate::prior::{extract_prior, synthesize_depth_target, PriorConfig};
use crate::render::{render, RenderConfig};
use crate::scene::{
    logit, save_checkpoint, write_ply, Camera, Checkpoint, GaussianCloud, Manifest, SH_C0,
};

/// Parameters of a procedurally generated low-light scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_gaussians: usize,
    pub n_views: usize,
    /// Width and height of every view.
    pub resolution: usize,
    /// Darkening exponent applied to the clean views.
    pub gamma: f64,
    /// Standard deviation of the additive sensor noise.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Colors are drawn uniformly from `0.5 +- contrast`.
    pub contrast: f64,
    /// Fraction of ground-truth centers kept in the initial point cloud.
    pub init_fraction: f64,
    pub init_jitter: f64,
    /// Settings for the stored priors. The default smooths at a coarser scale than
    /// [`PriorConfig::default`] because the darkened inputs are dominated by noise.
    pub prior: PriorConfig,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_gaussians: 300,
            n_views: 8,
            resolution: 64,
            gamma: 2.5,
            noise_sigma: 0.02,
            seed: 0,
            contrast: 0.1,
            init_fraction: 0.5,
            init_jitter: 0.02,
            prior: PriorConfig {
                sigma: 4.0,
                ..PriorConfig::default()
            },
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.n_views < 2 {
            return bad("a scene needs at least 2 views");
        }
        if self.n_gaussians < 8 {
            return bad("a scene needs at least 8 primitives");
        }
        if self.resolution < 8 {
            return bad("resolution must be at least 8");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be non-negative");
        }
        if !(0.0..=0.5).contains(&self.contrast) {
            return bad("contrast must lie in [0, 0.5]");
        }
        if !(self.init_fraction > 0.0 && self.init_fraction <= 1.0) {
            return bad("init_fraction must lie in (0, 1]");
        }
        if !(self.init_jitter >= 0.0) {
            return bad("init_jitter must be non-negative");
        }
        self.prior.validate()
    }
}

const CAMERA_DISTANCE: f64 = 4.0;
const ARC: f64 = 0.3;
const FOCAL: f64 = 1.2;
const BACKDROP_Z: f64 = 1.5;
const BACKDROP_HALF: [f64; 2] = [6.0, 2.6];

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn color(rng: &mut ChaCha8Rng, contrast: f64) -> [f64; 3] {
    std::array::from_fn(|_| 0.5 + contrast * rng.random_range(-1.0..=1.0))
}

fn ground_truth(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> GaussianCloud {
    let n_back = spec.n_gaussians / 3;
    let aspect = BACKDROP_HALF[0] / BACKDROP_HALF[1];
    let nx = ((n_back as f64 * aspect).sqrt().round() as usize).max(1);
    let ny = (n_back / nx).max(1);
    let (dx, dy) = (
        2.0 * BACKDROP_HALF[0] / nx as f64,
        2.0 * BACKDROP_HALF[1] / ny as f64,
    );
    let mut points = Vec::with_capacity(spec.n_gaussians);
    let mut colors = Vec::with_capacity(spec.n_gaussians);
    let mut scales = Vec::with_capacity(spec.n_gaussians);
    let mut rotations = Vec::with_capacity(spec.n_gaussians);
    let mut opacities = Vec::with_capacity(spec.n_gaussians);
    for j in 0..ny {
        for i in 0..nx {
            points.push([
                -BACKDROP_HALF[0] + (i as f64 + 0.5) * dx,
                -BACKDROP_HALF[1] + (j as f64 + 0.5) * dy,
                BACKDROP_Z,
            ]);
            colors.push(color(rng, spec.contrast));
            scales.push([0.6 * dx, 0.6 * dy, 0.02]);
            rotations.push([1.0, 0.0, 0.0, 0.0]);
            opacities.push(0.98);
        }
    }
    while points.len() < spec.n_gaussians {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        if p.iter().map(|v| v * v).sum::<f64>() > 1.0 {
            continue;
        }
        points.push(p);
        colors.push(color(rng, spec.contrast));
        scales.push(std::array::from_fn(|_| {
            (rng.random_range(0.06f64.ln()..0.2f64.ln())).exp()
        }));
        let q: [f64; 4] = std::array::from_fn(|_| normal(rng));
        rotations.push(q);
        opacities.push(rng.random_range(0.5..0.95));
    }
    let mut cloud = GaussianCloud::from_points(&points, &colors).expect("non-empty");
    cloud.rotations = rotations;
    cloud.renormalize_rotations();
    cloud.log_scales = scales.iter().map(|s| s.map(f64::ln)).collect();
    cloud.opacity_logits = opacities.into_iter().map(logit).collect();
    cloud
}

/// Camera at arc position `k` of `n_views - 1` steps.
fn arc_camera(spec: &SynthSpec, k: f64) -> Result<Camera> {
    let r = spec.resolution;
    let a = -ARC + 2.0 * ARC * k / (spec.n_views - 1) as f64;
    let eye = [CAMERA_DISTANCE * a.sin(), 0.0, -CAMERA_DISTANCE * a.cos()];
    Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], r, r, FOCAL * r as f64)
}

fn cameras(spec: &SynthSpec) -> Result<Vec<Camera>> {
    (0..spec.n_views)
        .map(|i| arc_camera(spec, i as f64))
        .collect()
}

/// Cameras halfway between consecutive training views, for novel-view
/// evaluation against `ground_truth.ckpt`.
pub fn held_out_cameras(spec: &SynthSpec) -> Result<Vec<Camera>> {
    spec.validate()?;
    (0..spec.n_views - 1)
        .map(|i| arc_camera(spec, i as f64 + 0.5))
        .collect()
}

/// Darkens a clean view: `clean^gamma` plus Gaussian noise, clamped to `[0, 1]`.
pub fn degrade(clean: &Image, gamma: f64, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    let mut out = clean.map(|v| v.powf(gamma));
    for v in out.data_mut() {
        *v = (*v + noise_sigma * normal(rng)).clamp(0.0, 1.0);
    }
    out
}

fn write_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes a complete scene under `dir`: degraded inputs, clean references,
/// priors, depth targets, an initial point cloud, the ground-truth cloud and
/// `scene.json`. Returns the manifest.
pub fn synth_dataset(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let dir = dir.as_ref();
    for sub in ["images", "references", "priors", "depths"] {
        write_dir(&dir.join(sub))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gt = ground_truth(spec, &mut rng);
    let cams = cameras(spec)?;
    let mut manifest = Manifest {
        cameras: cams.iter().map(Camera::to_json).collect(),
        images: Vec::new(),
        priors: Some(Vec::new()),
        depths: Some(Vec::new()),
        points: "points.ply".into(),
        references: Some(Vec::new()),
        background: [0.0; 3],
    };
    for (i, cam) in cams.iter().enumerate() {
        let clean = render(&gt, cam, [0.0; 3], &RenderConfig::default())?
            .r0
            .clamped(0.0, 1.0);
        let degraded = degrade(&clean, spec.gamma, spec.noise_sigma, &mut rng);
        let names = [
            format!("images/input_{i:03}.png"),
            format!("references/reference_{i:03}.png"),
            format!("priors/prior_{i:03}.pfm"),
            format!("depths/depth_{i:03}.pfm"),
        ];
        save_png(&degraded, dir.join(&names[0]))?;
        save_png(&clean, dir.join(&names[1]))?;
        // the prior must see exactly what a loader will read back
        let stored: Image = load_image(dir.join(&names[0]))?;
        save_pfm(&extract_prior(&stored, &spec.prior)?, dir.join(&names[2]))?;
        save_pfm(&synthesize_depth_target(&gt, cam)?, dir.join(&names[3]))?;
        let [img, reference, prior, depth] = names;
        manifest.images.push(img);
        manifest.references.as_mut().unwrap().push(reference);
        manifest.priors.as_mut().unwrap().push(prior);
        manifest.depths.as_mut().unwrap().push(depth);
    }
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for i in 0..gt.len() {
        if rng.random::<f64>() >= spec.init_fraction {
            continue;
        }
        let p = gt.positions[i];
        points.push(std::array::from_fn(|k| {
            p[k] + spec.init_jitter * normal(&mut rng)
        }));
        let c: [f64; 3] = std::array::from_fn(|k| (0.5 + SH_C0 * gt.sh[i][0][k]).clamp(0.0, 1.0));
        colors.push(c.map(|v| v.powf(spec.gamma)));
    }
    if points.is_empty() {
        points.push(gt.positions[0]);
        colors.push([0.5f64.powf(spec.gamma); 3]);
    }
    write_ply(dir.join(&manifest.points), &points, &colors)?;
    save_checkpoint(
        &Checkpoint {
            step: 0,
            cloud: gt,
            pdm: None,
        },
        dir.join("ground_truth.ckpt"),
    )?;
    let spec_path = dir.join("synth.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(spec)?)
        .map_err(|e| Error::io(&spec_path, e))?;
    let manifest_path = dir.join("scene.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}
