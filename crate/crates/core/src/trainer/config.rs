use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::render::RenderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the scene extent.
    pub position: f64,
    pub position_final: f64,
    pub sh: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub structure: f64,
    pub depth: f64,
    pub illumination: f64,
    pub noise: f64,
    pub pdm: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_final: 1.6e-6,
            sh: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
            structure: 5e-3,
            depth: 5e-3,
            illumination: 5e-3,
            noise: 1e-3,
            pdm: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        LearningRates {
            position: 0.0,
            position_final: 0.0,
            sh: 0.0,
            opacity: 0.0,
            scale: 0.0,
            rotation: 0.0,
            structure: 0.0,
            depth: 0.0,
            illumination: 0.0,
            noise: 0.0,
            pdm: 0.0,
        }
    }

    fn all(&self) -> [f64; 11] {
        [
            self.position,
            self.position_final,
            self.sh,
            self.opacity,
            self.scale,
            self.rotation,
            self.structure,
            self.depth,
            self.illumination,
            self.noise,
            self.pdm,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub seed: u64,
    pub lr: LearningRates,
    pub loss: LossConfig,
    /// Run the progressive denoiser; without it the raw render is the output.
    pub use_pdm: bool,
    /// Steps during which the denoiser runs with frozen weights.
    pub pdm_warmup: u64,
    pub pdm_stages: usize,
    pub sh_degree_start: usize,
    pub sh_degree_interval: u64,
    pub densify_until: u64,
    pub densify_interval: u64,
    /// Mean world-space position gradient norm that triggers densification.
    pub densify_grad_threshold: f64,
    /// Clone below this fraction of the scene extent, split above it.
    pub densify_scale_fraction: f64,
    pub split_scale_divisor: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
    pub checkpoint_interval: u64,
    pub tile_size: usize,
    pub min_alpha: f64,
    pub min_transmittance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let r = RenderConfig::default();
        TrainConfig {
            iterations: 15_000,
            seed: 0,
            lr: LearningRates::default(),
            loss: LossConfig::default(),
            use_pdm: true,
            pdm_warmup: 0,
            pdm_stages: crate::pdm::STAGES,
            sh_degree_start: 1,
            sh_degree_interval: 1000,
            densify_until: 5000,
            densify_interval: 100,
            densify_grad_threshold: 1.6e-4,
            densify_scale_fraction: 0.01,
            split_scale_divisor: 1.6,
            prune_opacity: 0.005,
            max_gaussians: 100_000,
            checkpoint_interval: 1000,
            tile_size: r.tile_size,
            min_alpha: r.min_alpha,
            min_transmittance: r.min_transmittance,
        }
    }
}

impl TrainConfig {
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            tile_size: self.tile_size,
            min_alpha: self.min_alpha,
            min_transmittance: self.min_transmittance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.lr.all().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if self.densify_until > self.iterations {
            return bad(format!(
                "densify_until ({}) exceeds iterations ({})",
                self.densify_until, self.iterations
            ));
        }
        if self.densify_interval == 0
            || self.sh_degree_interval == 0
            || self.checkpoint_interval == 0
        {
            return bad("intervals must be positive".into());
        }
        if self.sh_degree_start > crate::scene::MAX_SH_DEGREE {
            return bad(format!(
                "sh_degree_start {} is above 3",
                self.sh_degree_start
            ));
        }
        if !(self.split_scale_divisor > 1.0) {
            return bad("split_scale_divisor must exceed 1".into());
        }
        if !(0.0..1.0).contains(&self.prune_opacity) {
            return bad("prune_opacity must lie in [0, 1)".into());
        }
        if !(self.loss.theta > 0.0 && self.loss.theta <= 1.0) {
            return bad("theta must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.loss.lambda) {
            return bad("lambda must lie in [0, 1]".into());
        }
        if self.loss.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        if self.use_pdm && self.pdm_stages < 2 {
            return bad("the denoiser needs at least 2 stages".into());
        }
        self.render_config().validate()
    }

    /// Active SH degree at `step`.
    pub fn sh_degree_at(&self, step: u64) -> usize {
        (self.sh_degree_start + (step / self.sh_degree_interval) as usize)
            .min(crate::scene::MAX_SH_DEGREE)
    }

    /// Log-linear decay of the position rate over the run.
    pub fn position_lr_at(&self, step: u64, extent: f64) -> f64 {
        let (a, b) = (self.lr.position * extent, self.lr.position_final * extent);
        if a <= 0.0 || b <= 0.0 {
            return a.max(0.0);
        }
        let t = if self.iterations == 0 {
            0.0
        } else {
            (step as f64 / self.iterations as f64).clamp(0.0, 1.0)
        };
        ((1.0 - t) * a.ln() + t * b.ln()).exp()
    }
}
