//! Joint optimization of the primitive cloud and the denoiser.

mod adam;
mod config;
mod density;
mod synth;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{AdamState, Moments, BETA1, BETA2, EPSILON};
pub use config::{LearningRates, TrainConfig};
pub use density::{densify_and_prune, DensifyParams, DensifyReport, DensifyStats};
pub use synth::{degrade, held_out_cameras, synth_dataset, SynthSpec};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{evaluate, LossBundle, LossInputs};
use crate::pdm::{pdm_backward, pdm_forward_stages, PdmWeights};
use crate::prior::{extract_prior, synthesize_depth_target, PriorConfig};
use crate::render::{render, render_backward, ChannelAdjoints};
use crate::scene::{
    save_checkpoint, Camera, Checkpoint, Dataset, GaussianCloud, GradientBundle, ParamGroup,
};

/// One training view with its supervision targets.
#[derive(Debug, Clone)]
pub struct View {
    pub camera: Camera,
    pub input: Image,
    pub prior: Image,
    pub depth: Image,
}

/// Every image a trained model produces for one camera.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub r0: Image,
    /// Enhanced output; equal to `r0` without the denoiser.
    pub r: Image,
    pub pr: Image,
    pub dr: Image,
    pub lr: Image,
    pub ngs: Image,
    /// Re-degraded reconstruction `r * lr`.
    pub i_out: Image,
}

pub fn render_view(
    cloud: &GaussianCloud,
    pdm: Option<&PdmWeights>,
    cam: &Camera,
    background: [f64; 3],
    cfg: &TrainConfig,
) -> Result<RenderedView> {
    let out = render(cloud, cam, background, &cfg.render_config())?;
    let r = match pdm {
        Some(w) => pdm_forward_stages(&out.r0, &out.ngs, w, cfg.pdm_stages)?
            .output()
            .clone(),
        None => out.r0.clone(),
    };
    let i_out = r.zip_map(&out.lr, |a, b| a * b);
    Ok(RenderedView {
        r0: out.r0,
        r,
        pr: out.pr,
        dr: out.dr,
        lr: out.lr,
        ngs: out.ngs,
        i_out,
    })
}

/// Loss values and gradients for one view, without touching any state.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub losses: LossBundle,
    pub cloud: GradientBundle,
    pub pdm: Option<PdmWeights>,
    pub visible: Vec<bool>,
}

pub fn compute_gradients(
    cloud: &GaussianCloud,
    pdm: Option<&PdmWeights>,
    view: &View,
    background: [f64; 3],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Gradients> {
    let out = render(cloud, &view.camera, background, &cfg.render_config())?;
    let trace = match pdm {
        Some(w) => Some(pdm_forward_stages(&out.r0, &out.ngs, w, cfg.pdm_stages)?),
        None => None,
    };
    let (r, r_prev) = match &trace {
        Some(t) => (t.output(), Some(t.stage_output(t.stages.len() - 1))),
        None => (&out.r0, None),
    };
    let inputs = LossInputs {
        r,
        r_prev,
        pr: &out.pr,
        dr: &out.dr,
        lr: &out.lr,
        input: &view.input,
        prior: &view.prior,
        depth: &view.depth,
    };
    let (losses, adj) = evaluate(&inputs, &cfg.loss, rng)?;
    let (w, h) = (out.r0.width(), out.r0.height());
    let mut ch = ChannelAdjoints::zeros(w, h);
    let mut pdm_grad = None;
    match (&trace, pdm) {
        (Some(t), Some(weights)) => {
            let inter: Vec<(usize, &Image)> = match &adj.r_prev {
                Some(g) => vec![(t.stages.len() - 1, g)],
                None => Vec::new(),
            };
            let g = pdm_backward(t, weights, &adj.r, &inter)?;
            ch.r0 = g.r0;
            ch.ngs = g.ngs;
            pdm_grad = Some(g.weights);
        }
        _ => ch.r0 = adj.r,
    }
    ch.pr = adj.pr;
    ch.dr = adj.dr;
    ch.lr = adj.lr;
    let grads = render_backward(cloud, &view.camera, &out, &ch)?;
    Ok(Gradients {
        losses,
        cloud: grads,
        pdm: pdm_grad,
        visible: out.visible(),
    })
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub step: u64,
    pub losses: LossBundle,
    pub n_gaussians: usize,
    pub densify: Option<DensifyReport>,
}

fn group_rate(lr: &LearningRates, position: f64, g: ParamGroup) -> f64 {
    match g {
        ParamGroup::Position => position,
        ParamGroup::Rotation => lr.rotation,
        ParamGroup::Scale => lr.scale,
        ParamGroup::Opacity => lr.opacity,
        ParamGroup::Sh => lr.sh,
        ParamGroup::Structure => lr.structure,
        ParamGroup::Illumination => lr.illumination,
        ParamGroup::Depth => lr.depth,
        ParamGroup::Noise => lr.noise,
    }
}

/// Optimizer state for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cloud: GaussianCloud,
    pub pdm: Option<PdmWeights>,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub extent: f64,
    pub background: [f64; 3],
    step: u64,
    rng: ChaCha8Rng,
    stats: DensifyStats,
}

impl Trainer {
    pub fn new(
        cloud: GaussianCloud,
        config: TrainConfig,
        extent: f64,
        background: [f64; 3],
    ) -> Result<Self> {
        let pdm = config
            .use_pdm
            .then(|| PdmWeights::he_normal(config.seed.wrapping_add(2)));
        Self::with_pdm(cloud, pdm, config, extent, background)
    }

    pub fn with_pdm(
        cloud: GaussianCloud,
        pdm: Option<PdmWeights>,
        config: TrainConfig,
        extent: f64,
        background: [f64; 3],
    ) -> Result<Self> {
        config.validate()?;
        cloud.check_consistent()?;
        if config.use_pdm != pdm.is_some() {
            return Err(Error::InvalidArgument(
                "denoiser weights must be given exactly when use_pdm is set".into(),
            ));
        }
        if let Some(w) = &pdm {
            w.validate()?;
        }
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scene extent must be positive, got {extent}"
            )));
        }
        let adam = AdamState::new(&cloud, pdm.as_ref());
        let stats = DensifyStats::new(cloud.len());
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            stats,
            cloud,
            pdm,
            adam,
            config,
            extent,
            background,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One forward, backward and Adam update on `view`.
    pub fn train_step(&mut self, view: &View) -> Result<StepOutcome> {
        self.cloud.sh_degree = self.config.sh_degree_at(self.step);
        let g = compute_gradients(
            &self.cloud,
            self.pdm.as_ref(),
            view,
            self.background,
            &self.config,
            &mut self.rng,
        )?;
        if let Some(term) = g.losses.non_finite_term() {
            return Err(Error::NonFinite {
                step: self.step,
                term: term.into(),
            });
        }
        if !g.cloud.is_finite() || g.pdm.as_ref().is_some_and(|w| !w.is_finite()) {
            return Err(Error::NonFinite {
                step: self.step,
                term: "gradient".into(),
            });
        }
        let lr = self.config.lr;
        let position = self.config.position_lr_at(self.step, self.extent);
        self.adam.begin_step();
        self.adam
            .apply_cloud(&mut self.cloud, &g.cloud, |p| group_rate(&lr, position, p));
        if let (Some(w), Some(gw)) = (self.pdm.as_mut(), g.pdm.as_ref()) {
            if self.step >= self.config.pdm_warmup {
                self.adam.apply_pdm(w, gw, self.config.lr.pdm);
            }
        }
        self.cloud.renormalize_rotations();
        self.stats.accumulate(&g.cloud.positions, &g.visible);
        self.step += 1;

        let mut densify = None;
        if self.step % self.config.densify_interval == 0 && self.step < self.config.densify_until {
            let params = DensifyParams {
                grad_threshold: self.config.densify_grad_threshold,
                clone_max_scale: self.config.densify_scale_fraction * self.extent,
                split_divisor: self.config.split_scale_divisor,
                prune_opacity: self.config.prune_opacity,
                max_gaussians: self.config.max_gaussians,
            };
            let r = densify_and_prune(
                &mut self.cloud,
                &mut self.adam,
                &self.stats,
                &params,
                &mut self.rng,
            );
            log::debug!(
                "step {}: densify {:?}, {} primitives",
                self.step,
                r,
                self.cloud.len()
            );
            self.stats = DensifyStats::new(self.cloud.len());
            densify = Some(r);
        }
        Ok(StepOutcome {
            step: self.step,
            losses: g.losses,
            n_gaussians: self.cloud.len(),
            densify,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            cloud: self.cloud.clone(),
            pdm: self.pdm.clone(),
        }
    }

    pub fn render_view(&self, cam: &Camera) -> Result<RenderedView> {
        render_view(
            &self.cloud,
            self.pdm.as_ref(),
            cam,
            self.background,
            &self.config,
        )
    }
}

/// Pairs every image with its prior and depth target, computing any that are missing.
pub fn prepare_views(ds: &Dataset, prior: &PriorConfig) -> Result<Vec<View>> {
    ds.validate()?;
    let priors = match &ds.priors {
        Some(p) => p.clone(),
        None => ds
            .images
            .iter()
            .map(|img| extract_prior(img, prior))
            .collect::<Result<_>>()?,
    };
    let depths = match &ds.depths {
        Some(d) => d.clone(),
        None => {
            let init = GaussianCloud::from_points(&ds.points, &ds.colors)?;
            ds.cameras
                .iter()
                .map(|c| synthesize_depth_target(&init, c))
                .collect::<Result<_>>()?
        }
    };
    Ok(ds
        .cameras
        .iter()
        .zip(&ds.images)
        .zip(priors.into_iter().zip(depths))
        .map(|((camera, input), (prior, depth))| View {
            camera: camera.clone(),
            input: input.clone(),
            prior,
            depth,
        })
        .collect())
}

#[derive(Debug, Clone, serde::Serialize)]
struct LogLine {
    step: u64,
    exp: f64,
    prior: f64,
    depth: f64,
    de: f64,
    rec: f64,
    total: f64,
    n_gaussians: usize,
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("checkpoint_{step:06}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn config_path(&self) -> PathBuf {
        self.dir.join("config.json")
    }
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

/// Runs `cfg.iterations` steps over the dataset, visiting views in a seeded
/// shuffle per epoch. With `out` set, writes the resolved config, a JSON-lines
/// log and checkpoints.
pub fn train(
    ds: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut on_step: impl FnMut(&StepOutcome),
) -> Result<Trainer> {
    cfg.validate()?;
    let views = prepare_views(ds, &PriorConfig::default())?;
    train_views(ds, &views, cfg, out, &mut on_step)
}

pub fn train_views(
    ds: &Dataset,
    views: &[View],
    cfg: &TrainConfig,
    out: Option<&Path>,
    on_step: &mut dyn FnMut(&StepOutcome),
) -> Result<Trainer> {
    let cloud = GaussianCloud::from_points(&ds.points, &ds.colors)?;
    let mut trainer = Trainer::new(cloud, cfg.clone(), ds.camera_extent(), ds.background)?;
    let run = out.map(|d| RunOutput {
        dir: d.to_path_buf(),
    });
    let mut log = None;
    if let Some(run) = &run {
        std::fs::create_dir_all(&run.dir).map_err(|e| Error::io(&run.dir, e))?;
        let cfg_path = run.config_path();
        std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?)
            .map_err(|e| Error::io(&cfg_path, e))?;
        log = Some(create_file(&run.log_path())?);
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    while trainer.step() < cfg.iterations {
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let v = order.pop().expect("refilled above");
        let outcome = trainer.train_step(&views[v])?;
        if let Some(f) = log.as_mut() {
            let l = &outcome.losses;
            let line = LogLine {
                step: outcome.step,
                exp: l.exp,
                prior: l.prior,
                depth: l.depth(),
                de: l.de,
                rec: l.rec,
                total: l.total,
                n_gaussians: outcome.n_gaussians,
            };
            let path = run.as_ref().unwrap().log_path();
            writeln!(f, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(&path, e))?;
        }
        if let Some(run) = &run {
            if outcome.step % cfg.checkpoint_interval == 0 {
                save_checkpoint(&trainer.checkpoint(), run.checkpoint_path(outcome.step))?;
            }
        }
        on_step(&outcome);
    }
    if let Some(run) = &run {
        if let Some(mut f) = log {
            f.flush().map_err(|e| Error::io(run.log_path(), e))?;
        }
        save_checkpoint(&trainer.checkpoint(), run.final_checkpoint())?;
    }
    Ok(trainer)
}
