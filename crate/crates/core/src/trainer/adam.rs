use crate::pdm::PdmWeights;
use crate::scene::{GaussianCloud, GradientBundle, ParamArrays, ParamGroup};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// Moments for one flat parameter array.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, bc1: f64, bc2: f64) {
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + EPSILON);
        }
    }
}

/// Adam state mirroring a cloud's columns and the denoiser tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub groups: Vec<Moments>,
    pub pdm: Vec<Moments>,
}

impl AdamState {
    pub fn new(cloud: &GaussianCloud, pdm: Option<&PdmWeights>) -> Self {
        AdamState {
            step: 0,
            groups: ParamGroup::ALL
                .iter()
                .map(|&g| Moments::zeros(cloud.group(g).len()))
                .collect(),
            pdm: pdm
                .map(|w| {
                    w.tensors()
                        .iter()
                        .map(|t| Moments::zeros(t.len()))
                        .collect()
                })
                .unwrap_or_default(),
        }
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.step as i32;
        (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t))
    }

    /// Advances the step counter; must precede the `apply_*` calls of one update.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn apply_cloud(
        &mut self,
        cloud: &mut GaussianCloud,
        grads: &GradientBundle,
        lr: impl Fn(ParamGroup) -> f64,
    ) {
        let (bc1, bc2) = self.corrections();
        for (k, &g) in ParamGroup::ALL.iter().enumerate() {
            let rate = lr(g);
            if rate == 0.0 {
                continue;
            }
            let mut params = cloud.group(g).to_vec();
            self.groups[k].update(&mut params, grads.group(g), rate, bc1, bc2);
            cloud.group_mut(g).copy_from_slice(&params);
        }
    }

    pub fn apply_pdm(&mut self, w: &mut PdmWeights, grads: &PdmWeights, lr: f64) {
        if lr == 0.0 {
            return;
        }
        let (bc1, bc2) = self.corrections();
        let gt = grads.tensors();
        for ((p, g), m) in w.tensors_mut().into_iter().zip(gt).zip(&mut self.pdm) {
            m.update(p, g, lr, bc1, bc2);
        }
    }

    /// Appends zero moments for `k` new primitives.
    pub fn push_rows(&mut self, k: usize) {
        for (m, g) in self.groups.iter_mut().zip(ParamGroup::ALL) {
            let n = k * g.width();
            m.m.extend(std::iter::repeat_n(0.0, n));
            m.v.extend(std::iter::repeat_n(0.0, n));
        }
    }

    /// Keeps the rows of primitives whose flag is set.
    pub fn retain_rows(&mut self, keep: &[bool]) {
        for (m, g) in self.groups.iter_mut().zip(ParamGroup::ALL) {
            let w = g.width();
            let filter = |v: &mut Vec<f64>| {
                let mut out = Vec::with_capacity(v.len());
                for (row, &k) in v.chunks_exact(w).zip(keep) {
                    if k {
                        out.extend_from_slice(row);
                    }
                }
                *v = out;
            };
            filter(&mut m.m);
            filter(&mut m.v);
        }
    }

    /// Every moment array matches the cloud's column sizes.
    pub fn consistent_with(&self, cloud: &GaussianCloud) -> bool {
        ParamGroup::ALL.iter().zip(&self.groups).all(|(&g, m)| {
            let n = cloud.group(g).len();
            m.m.len() == n && m.v.len() == n
        })
    }
}
