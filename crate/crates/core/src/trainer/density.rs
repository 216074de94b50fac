use rand::Rng;
use rand_distr::StandardNormal;

use super::adam::AdamState;
use crate::scene::project::rotation_matrix;
use crate::scene::GaussianCloud;

/// Running per-primitive position-gradient statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        DensifyStats {
            grad_sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn accumulate(&mut self, position_grads: &[[f64; 3]], visible: &[bool]) {
        for ((s, c), (g, &v)) in self
            .grad_sum
            .iter_mut()
            .zip(&mut self.count)
            .zip(position_grads.iter().zip(visible))
        {
            if v {
                *s += (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                *c += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DensifyParams {
    pub grad_threshold: f64,
    /// Absolute scale separating clones from splits.
    pub clone_max_scale: f64,
    pub split_divisor: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
}

fn sample_offset(cloud: &GaussianCloud, i: usize, rng: &mut impl Rng) -> [f64; 3] {
    let r = rotation_matrix(&cloud.rotations[i]);
    let s = cloud.scale(i);
    let z: [f64; 3] = std::array::from_fn(|k| s[k] * rng.sample::<f64, _>(StandardNormal));
    std::array::from_fn(|row| (0..3).map(|k| r[(row, k)] * z[k]).sum())
}

/// Clones small high-gradient primitives, splits large ones, then prunes
/// transparent ones. Adam moments follow the cloud; new rows start at zero.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    adam: &mut AdamState,
    stats: &DensifyStats,
    p: &DensifyParams,
    rng: &mut impl Rng,
) -> DensifyReport {
    let n = cloud.len();
    let mut report = DensifyReport::default();
    let mut remove = vec![false; n];
    let mut budget = p.max_gaussians.saturating_sub(n);
    for i in 0..n {
        if stats.mean(i) <= p.grad_threshold || budget == 0 {
            continue;
        }
        if cloud.max_scale(i) <= p.clone_max_scale {
            let off = sample_offset(cloud, i, rng);
            cloud.push_copy(i);
            let j = cloud.len() - 1;
            for k in 0..3 {
                cloud.positions[j][k] += off[k];
            }
            report.cloned += 1;
            budget -= 1;
        } else {
            let shrink = p.split_divisor.ln();
            for _ in 0..2 {
                let off = sample_offset(cloud, i, rng);
                cloud.push_copy(i);
                let j = cloud.len() - 1;
                for k in 0..3 {
                    cloud.positions[j][k] += off[k];
                    cloud.log_scales[j][k] -= shrink;
                }
            }
            remove[i] = true;
            report.split += 1;
            budget = budget.saturating_sub(1);
        }
    }
    let added = cloud.len() - n;
    adam.push_rows(added);
    remove.resize(cloud.len(), false);
    let keep: Vec<bool> = (0..cloud.len())
        .map(|i| !remove[i] && cloud.opacity(i) >= p.prune_opacity)
        .collect();
    report.pruned = keep.iter().filter(|k| !**k).count() - report.split;
    cloud.retain_mask(&keep);
    adam.retain_rows(&keep);
    if cloud.is_empty() {
        log::warn!("densification pruned every primitive; the cloud is empty");
    }
    report
}
