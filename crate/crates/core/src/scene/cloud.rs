use crate::error::{Error, Result};

pub const MAX_SH_DEGREE: usize = 3;
/// Coefficients per color channel at the maximum degree.
pub const SH_COEFFS: usize = (MAX_SH_DEGREE + 1) * (MAX_SH_DEGREE + 1);
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

pub const INIT_OPACITY: f64 = 0.1;
/// Scale used when a point has no neighbours to measure against.
pub const FALLBACK_SCALE: f64 = 0.1;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Column store of Gaussian primitives. Every array holds raw (pre-activation) values:
/// opacity, structure and depth through a sigmoid, scale and illumination through exp,
/// noise as-is.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    /// (w, x, y, z)
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    /// Stored at full capacity; only the first `(sh_degree + 1)^2` are active.
    pub sh: Vec<[[f64; 3]; SH_COEFFS]>,
    pub sh_degree: usize,
    pub structure_logits: Vec<f64>,
    pub illum: Vec<[f64; 3]>,
    pub depth_logits: Vec<f64>,
    pub noise: Vec<[f64; 3]>,
}

/// One parameter array of a [`GaussianCloud`] (and of its gradient).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Position,
    Rotation,
    Scale,
    Opacity,
    Sh,
    Structure,
    Illumination,
    Depth,
    Noise,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Position,
        ParamGroup::Rotation,
        ParamGroup::Scale,
        ParamGroup::Opacity,
        ParamGroup::Sh,
        ParamGroup::Structure,
        ParamGroup::Illumination,
        ParamGroup::Depth,
        ParamGroup::Noise,
    ];

    /// Scalars per primitive.
    pub fn width(self) -> usize {
        match self {
            ParamGroup::Position
            | ParamGroup::Scale
            | ParamGroup::Illumination
            | ParamGroup::Noise => 3,
            ParamGroup::Rotation => 4,
            ParamGroup::Opacity | ParamGroup::Structure | ParamGroup::Depth => 1,
            ParamGroup::Sh => SH_COEFFS * 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Scale => "scale",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Sh => "sh",
            ParamGroup::Structure => "structure",
            ParamGroup::Illumination => "illumination",
            ParamGroup::Depth => "depth",
            ParamGroup::Noise => "noise",
        }
    }
}

/// Uniform access to the per-primitive arrays, shared by the cloud and its gradients.
pub trait ParamArrays {
    fn group(&self, g: ParamGroup) -> &[f64];
    fn group_mut(&mut self, g: ParamGroup) -> &mut [f64];
}

macro_rules! impl_param_arrays {
    ($t:ty) => {
        impl ParamArrays for $t {
            fn group(&self, g: ParamGroup) -> &[f64] {
                match g {
                    ParamGroup::Position => self.positions.as_flattened(),
                    ParamGroup::Rotation => self.rotations.as_flattened(),
                    ParamGroup::Scale => self.log_scales.as_flattened(),
                    ParamGroup::Opacity => &self.opacity_logits,
                    ParamGroup::Sh => self.sh.as_flattened().as_flattened(),
                    ParamGroup::Structure => &self.structure_logits,
                    ParamGroup::Illumination => self.illum.as_flattened(),
                    ParamGroup::Depth => &self.depth_logits,
                    ParamGroup::Noise => self.noise.as_flattened(),
                }
            }

            fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
                match g {
                    ParamGroup::Position => self.positions.as_flattened_mut(),
                    ParamGroup::Rotation => self.rotations.as_flattened_mut(),
                    ParamGroup::Scale => self.log_scales.as_flattened_mut(),
                    ParamGroup::Opacity => &mut self.opacity_logits,
                    ParamGroup::Sh => self.sh.as_flattened_mut().as_flattened_mut(),
                    ParamGroup::Structure => &mut self.structure_logits,
                    ParamGroup::Illumination => self.illum.as_flattened_mut(),
                    ParamGroup::Depth => &mut self.depth_logits,
                    ParamGroup::Noise => self.noise.as_flattened_mut(),
                }
            }
        }
    };
}

/// Gradients with the exact layout of a [`GaussianCloud`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientBundle {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<[[f64; 3]; SH_COEFFS]>,
    pub structure_logits: Vec<f64>,
    pub illum: Vec<[f64; 3]>,
    pub depth_logits: Vec<f64>,
    pub noise: Vec<[f64; 3]>,
}

impl_param_arrays!(GaussianCloud);
impl_param_arrays!(GradientBundle);

impl GradientBundle {
    pub fn zeros(n: usize) -> Self {
        GradientBundle {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            sh: vec![[[0.0; 3]; SH_COEFFS]; n],
            structure_logits: vec![0.0; n],
            illum: vec![[0.0; 3]; n],
            depth_logits: vec![0.0; n],
            noise: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        ParamGroup::ALL
            .iter()
            .all(|&g| self.group(g).iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        for g in ParamGroup::ALL {
            for (a, b) in self.group_mut(g).iter_mut().zip(other.group(g)) {
                *a += b;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        ParamGroup::ALL
            .iter()
            .flat_map(|&g| self.group(g).iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Builds a cloud from a point set with per-point RGB in `[0, 1]`.
    ///
    /// Each primitive starts isotropic with scale equal to the mean distance to its
    /// three nearest neighbours (fewer when the set is smaller).
    pub fn from_points(points: &[[f64; 3]], colors: &[[f64; 3]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot initialize from an empty point set".into(),
            ));
        }
        if points.len() != colors.len() {
            return Err(Error::Shape(format!(
                "{} points but {} colors",
                points.len(),
                colors.len()
            )));
        }
        let scales = knn_mean_distance(points, 3);
        let n = points.len();
        let mut cloud = GaussianCloud {
            positions: points.to_vec(),
            rotations: vec![[1.0, 0.0, 0.0, 0.0]; n],
            log_scales: scales.iter().map(|s| [s.ln(); 3]).collect(),
            opacity_logits: vec![logit(INIT_OPACITY); n],
            sh: vec![[[0.0; 3]; SH_COEFFS]; n],
            sh_degree: 0,
            structure_logits: vec![logit(0.5); n],
            illum: vec![[0.0; 3]; n],
            depth_logits: vec![logit(0.5); n],
            noise: vec![[0.0; 3]; n],
        };
        for (sh, c) in cloud.sh.iter_mut().zip(colors) {
            for ch in 0..3 {
                sh[0][ch] = (c[ch] - 0.5) / SH_C0;
            }
        }
        Ok(cloud)
    }

    pub fn active_sh_coeffs(&self) -> usize {
        (self.sh_degree + 1) * (self.sh_degree + 1)
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn scale(&self, i: usize) -> [f64; 3] {
        self.log_scales[i].map(f64::exp)
    }

    pub fn structure(&self, i: usize) -> f64 {
        sigmoid(self.structure_logits[i])
    }

    pub fn depth_attr(&self, i: usize) -> f64 {
        sigmoid(self.depth_logits[i])
    }

    pub fn illumination(&self, i: usize) -> [f64; 3] {
        self.illum[i].map(f64::exp)
    }

    pub fn max_scale(&self, i: usize) -> f64 {
        self.scale(i).into_iter().fold(f64::MIN, f64::max)
    }

    /// Rescales every quaternion to unit length; degenerate ones reset to identity.
    pub fn renormalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 1e-12 && n.is_finite() {
                for v in q.iter_mut() {
                    *v /= n;
                }
            } else {
                *q = [1.0, 0.0, 0.0, 0.0];
            }
        }
    }

    /// Appends a copy of primitive `i`.
    pub fn push_copy(&mut self, i: usize) {
        self.positions.push(self.positions[i]);
        self.rotations.push(self.rotations[i]);
        self.log_scales.push(self.log_scales[i]);
        self.opacity_logits.push(self.opacity_logits[i]);
        self.sh.push(self.sh[i]);
        self.structure_logits.push(self.structure_logits[i]);
        self.illum.push(self.illum[i]);
        self.depth_logits.push(self.depth_logits[i]);
        self.noise.push(self.noise[i]);
    }

    /// Keeps the primitives whose flag is `true`, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        fn filter<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        }
        filter(&mut self.positions, keep);
        filter(&mut self.rotations, keep);
        filter(&mut self.log_scales, keep);
        filter(&mut self.opacity_logits, keep);
        filter(&mut self.sh, keep);
        filter(&mut self.structure_logits, keep);
        filter(&mut self.illum, keep);
        filter(&mut self.depth_logits, keep);
        filter(&mut self.noise, keep);
    }

    pub fn is_finite(&self) -> bool {
        ParamGroup::ALL
            .iter()
            .all(|&g| self.group(g).iter().all(|v| v.is_finite()))
    }

    /// Checks that every column has the same length.
    pub fn check_consistent(&self) -> Result<()> {
        let n = self.len();
        for g in ParamGroup::ALL {
            if self.group(g).len() != n * g.width() {
                return Err(Error::Shape(format!(
                    "{} column has {} scalars for {n} primitives",
                    g.name(),
                    self.group(g).len()
                )));
            }
        }
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::InvalidArgument(format!(
                "sh degree {} too high",
                self.sh_degree
            )));
        }
        Ok(())
    }
}

/// Mean distance from each point to its `k` nearest neighbours (brute force).
fn knn_mean_distance(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    let n = points.len();
    if n == 1 {
        return vec![FALLBACK_SCALE];
    }
    (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let (a, b) = (points[i], points[j]);
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                })
                .collect();
            d.sort_by(|a, b| a.total_cmp(b));
            let m = k.min(d.len());
            let mean = d[..m].iter().sum::<f64>() / m as f64;
            if mean > 1e-9 {
                mean
            } else {
                FALLBACK_SCALE
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_uses_fallback_scale() {
        let c = GaussianCloud::from_points(&[[0.0; 3]], &[[0.5; 3]]).unwrap();
        assert!((c.scale(0)[0] - FALLBACK_SCALE).abs() < 1e-15);
    }

    #[test]
    fn tetrahedron_scale_is_edge_length() {
        let reg = [
            [1.0, 1.0, 1.0],
            [1.0, -1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
        ];
        let edge = 8f64.sqrt();
        let c = GaussianCloud::from_points(&reg, &[[0.5; 3]; 4]).unwrap();
        for i in 0..4 {
            for s in c.scale(i) {
                assert!((s - edge).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corner_point_scale_is_mean_of_three_neighbours() {
        let pts = [
            [1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [0.0, 0.0, 3.0],
            [0.0, 0.0, 0.0],
        ];
        let c = GaussianCloud::from_points(&pts, &[[0.5; 3]; 4]).unwrap();
        assert!((c.scale(3)[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn init_defaults() {
        let c =
            GaussianCloud::from_points(&[[0.0; 3], [1.0, 0.0, 0.0]], &[[0.5; 3], [1.0, 0.0, 0.25]])
                .unwrap();
        assert_eq!(c.sh[0][0], [0.0; 3]);
        assert!((c.sh[1][0][0] - 0.5 / SH_C0).abs() < 1e-12);
        assert!((c.opacity(0) - 0.1).abs() < 1e-12);
        assert!((c.structure(0) - 0.5).abs() < 1e-12);
        assert!((c.depth_attr(1) - 0.5).abs() < 1e-12);
        assert_eq!(c.illumination(0), [1.0; 3]);
        assert_eq!(c.noise[1], [0.0; 3]);
        assert_eq!(c.rotations[0], [1.0, 0.0, 0.0, 0.0]);
        assert!(c.sh[0][1..].iter().all(|v| *v == [0.0; 3]));
        c.check_consistent().unwrap();
    }

    #[test]
    fn empty_points_rejected() {
        assert!(GaussianCloud::from_points(&[], &[]).is_err());
    }

    #[test]
    fn retain_and_copy_keep_columns_aligned() {
        let mut c = GaussianCloud::from_points(
            &[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]],
            &[[0.2; 3]; 3],
        )
        .unwrap();
        c.push_copy(1);
        c.retain_mask(&[true, false, true, true]);
        assert_eq!(c.len(), 3);
        assert_eq!(c.positions[2], [1.0, 0.0, 0.0]);
        c.check_consistent().unwrap();
    }

    #[test]
    fn decoded_ranges() {
        let mut c = GaussianCloud::from_points(&[[0.0; 3]], &[[0.5; 3]]).unwrap();
        for v in [-800.0, -20.0, 0.0, 20.0, 800.0] {
            c.opacity_logits[0] = v;
            c.structure_logits[0] = v;
            let o = c.opacity(0);
            assert!((0.0..=1.0).contains(&o) && o.is_finite());
            assert!((0.0..=1.0).contains(&c.structure(0)));
        }
    }
}
