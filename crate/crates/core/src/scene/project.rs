//! EWA projection of 3D Gaussians to screen-space ellipses, plus its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use super::camera::Camera;
use super::cloud::GaussianCloud;

/// Added to both diagonal entries of every screen-space covariance (px^2).
pub const COV2D_DILATION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    /// Pixel-space center.
    pub mean: [f64; 2],
    /// Camera-space z.
    pub depth: f64,
    /// Screen covariance `(xx, xy, yy)`, dilation included.
    pub cov: [f64; 3],
    /// Outside the near/far range.
    pub culled: bool,
}

impl Projected {
    pub fn det(&self) -> f64 {
        self.cov[0] * self.cov[2] - self.cov[1] * self.cov[1]
    }

    /// Inverse covariance `(a, b, c)` for `a dx^2 + 2 b dx dy + c dy^2`.
    pub fn conic(&self) -> [f64; 3] {
        let det = self.det();
        [self.cov[2] / det, -self.cov[1] / det, self.cov[0] / det]
    }
}

pub fn rotation_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// World-space covariance `R S S^T R^T`.
pub fn covariance3d(q: &[f64; 4], log_scale: &[f64; 3]) -> Matrix3<f64> {
    let m = rotation_matrix(q) * Matrix3::from_diagonal(&Vector3::from(log_scale.map(f64::exp)));
    m * m.transpose()
}

pub(crate) fn world_rotation(cam: &Camera) -> Matrix3<f64> {
    let r = &cam.rotation;
    Matrix3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    )
}

fn jacobian(cam: &Camera, t: &[f64; 3]) -> Matrix2x3<f64> {
    let z = t[2];
    Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * t[0] / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * t[1] / (z * z),
    )
}

pub fn project_one(cloud: &GaussianCloud, cam: &Camera, i: usize) -> Projected {
    let t = cam.world_to_camera(&cloud.positions[i]);
    let z = t[2];
    let culled = !(z >= cam.near && z <= cam.far);
    if culled {
        return Projected {
            mean: [0.0; 2],
            depth: z,
            cov: [1.0, 0.0, 1.0],
            culled,
        };
    }
    let mean = [cam.fx * t[0] / z + cam.cx, cam.fy * t[1] / z + cam.cy];
    let tm = jacobian(cam, &t) * world_rotation(cam);
    let sigma = covariance3d(&cloud.rotations[i], &cloud.log_scales[i]);
    let s2: Matrix2<f64> = tm * sigma * tm.transpose();
    Projected {
        mean,
        depth: z,
        cov: [
            s2[(0, 0)] + COV2D_DILATION,
            0.5 * (s2[(0, 1)] + s2[(1, 0)]),
            s2[(1, 1)] + COV2D_DILATION,
        ],
        culled,
    }
}

pub fn project(cloud: &GaussianCloud, cam: &Camera) -> Vec<Projected> {
    (0..cloud.len())
        .map(|i| project_one(cloud, cam, i))
        .collect()
}

/// Parameter gradients of one primitive's projection.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProjectionGrad {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
}

/// Pulls adjoints on the screen mean and on the covariance entries `(xx, xy, yy)`
/// (`xy` counted once) back to position, quaternion and log-scale.
pub fn project_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    i: usize,
    d_mean: [f64; 2],
    d_cov: [f64; 3],
) -> ProjectionGrad {
    let t = cam.world_to_camera(&cloud.positions[i]);
    let (x, y, z) = (t[0], t[1], t[2]);
    let w = world_rotation(cam);
    let j = jacobian(cam, &t);
    let tm = j * w;
    let q = &cloud.rotations[i];
    let r = rotation_matrix(q);
    let s = Vector3::from(cloud.log_scales[i].map(f64::exp));
    let m = r * Matrix3::from_diagonal(&s);
    let sigma = m * m.transpose();

    let g2 = Matrix2::new(d_cov[0], 0.5 * d_cov[1], 0.5 * d_cov[1], d_cov[2]);
    let d_sigma: Matrix3<f64> = tm.transpose() * g2 * tm;
    let d_tm: Matrix2x3<f64> = 2.0 * g2 * tm * sigma;
    let d_j: Matrix2x3<f64> = d_tm * w.transpose();

    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut dt = [
        d_j[(0, 2)] * (-fx / z2),
        d_j[(1, 2)] * (-fy / z2),
        d_j[(0, 0)] * (-fx / z2)
            + d_j[(0, 2)] * (2.0 * fx * x / z3)
            + d_j[(1, 1)] * (-fy / z2)
            + d_j[(1, 2)] * (2.0 * fy * y / z3),
    ];
    dt[0] += d_mean[0] * fx / z;
    dt[1] += d_mean[1] * fy / z;
    dt[2] += -d_mean[0] * fx * x / z2 - d_mean[1] * fy * y / z2;
    let d_pos = w.transpose() * Vector3::from(dt);

    let d_m: Matrix3<f64> = 2.0 * d_sigma * m;
    let mut d_log_scale = [0.0; 3];
    let mut d_r = Matrix3::zeros();
    for k in 0..3 {
        let mut ds = 0.0;
        for row in 0..3 {
            ds += d_m[(row, k)] * r[(row, k)];
            d_r[(row, k)] = d_m[(row, k)] * s[k];
        }
        d_log_scale[k] = ds * s[k];
    }

    ProjectionGrad {
        position: [d_pos[0], d_pos[1], d_pos[2]],
        rotation: quaternion_backward(q, &d_r),
        log_scale: d_log_scale,
    }
}

/// Adjoint of [`rotation_matrix`] including the normalization of `q`.
pub(crate) fn quaternion_backward(q: &[f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = |a: usize, b: usize| d_r[(a, b)];
    let dw =
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let dn = [dw, dx, dy, dz];
    let qn = [w, x, y, z];
    let proj: f64 = (0..4).map(|k| qn[k] * dn[k]).sum();
    [
        (dn[0] - qn[0] * proj) / n,
        (dn[1] - qn[1] * proj) / n,
        (dn[2] - qn[2] * proj) / n,
        (dn[3] - qn[3] * proj) / n,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_point(pos: [f64; 3], sigma: f64) -> GaussianCloud {
        let mut c = GaussianCloud::from_points(&[pos], &[[0.5; 3]]).unwrap();
        c.log_scales[0] = [sigma.ln(); 3];
        c
    }

    #[test]
    fn on_axis_point_projects_to_principal_point() {
        let cam = Camera::identity(64, 48, 100.0);
        let p = project_one(&one_point([0.0, 0.0, 1.0], 0.1), &cam, 0);
        assert_eq!(p.mean, [cam.cx, cam.cy]);
        assert!(!p.culled);
    }

    #[test]
    fn isotropic_on_axis_covariance() {
        let cam = Camera::identity(64, 48, 100.0);
        let (sigma, z) = (0.05, 2.0);
        let p = project_one(&one_point([0.0, 0.0, z], sigma), &cam, 0);
        let expect = 100.0 * 100.0 * sigma * sigma / (z * z) + 0.3;
        assert!((p.cov[0] - expect).abs() < 1e-12);
        assert!((p.cov[2] - expect).abs() < 1e-12);
        assert!(p.cov[1].abs() < 1e-12);
    }

    #[test]
    fn near_plane_culls() {
        let mut cam = Camera::identity(8, 8, 10.0);
        cam.near = 0.5;
        let p = project_one(&one_point([0.0, 0.0, 0.25], 0.1), &cam, 0);
        assert!(p.culled);
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(2.0..5.0),
                ]
            })
            .collect();
        let mut c = GaussianCloud::from_points(&pts, &vec![[0.5; 3]; n]).unwrap();
        for i in 0..n {
            c.rotations[i] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            c.log_scales[i] = [
                rng.random_range(-3.0..-1.0),
                rng.random_range(-3.0..-1.0),
                rng.random_range(-3.0..-1.0),
            ];
        }
        c
    }

    #[test]
    fn covariance_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(&mut rng, 50);
        for i in 0..c.len() {
            let s = covariance3d(&c.rotations[i], &c.log_scales[i]);
            assert!((s - s.transpose()).abs().max() < 1e-15);
            let eig = s.symmetric_eigenvalues();
            assert!(eig.iter().all(|&e| e >= -1e-9));
        }
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_cloud(&mut rng, 20);
        let cam = Camera::look_at(
            [0.5, -0.3, -1.0],
            [0.0, 0.0, 3.0],
            [0.0, 1.0, 0.0],
            40,
            30,
            35.0,
        )
        .unwrap();
        let offset = [3.5, -2.0, 7.25];
        let mut moved = c.clone();
        for p in &mut moved.positions {
            for k in 0..3 {
                p[k] += offset[k];
            }
        }
        let a = project(&c, &cam);
        let b = project(&moved, &cam.translated(offset));
        for (pa, pb) in a.iter().zip(&b) {
            assert!(
                (pa.mean[0] - pb.mean[0]).abs() < 1e-6 && (pa.mean[1] - pb.mean[1]).abs() < 1e-6
            );
            assert!((pa.depth - pb.depth).abs() < 1e-6);
            for k in 0..3 {
                assert!((pa.cov[k] - pb.cov[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = Camera::look_at(
            [0.2, 0.1, -0.5],
            [0.0, 0.0, 3.0],
            [0.0, 1.0, 0.0],
            32,
            32,
            30.0,
        )
        .unwrap();
        for _ in 0..20 {
            let c = random_cloud(&mut rng, 1);
            let wm: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let wc: [f64; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let f = |c: &GaussianCloud| {
                let p = project_one(c, &cam, 0);
                wm[0] * p.mean[0]
                    + wm[1] * p.mean[1]
                    + wc[0] * p.cov[0]
                    + wc[1] * p.cov[1]
                    + wc[2] * p.cov[2]
            };
            let g = project_backward(&c, &cam, 0, wm, wc);
            let h = 1e-6;
            let check = |analytic: f64, perturb: &dyn Fn(&mut GaussianCloud, f64)| {
                let mut a = c.clone();
                let mut b = c.clone();
                perturb(&mut a, h);
                perturb(&mut b, -h);
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                let tol = 1e-5 * fd.abs().max(analytic.abs()).max(1.0);
                assert!(
                    (fd - analytic).abs() <= tol,
                    "fd {fd} vs analytic {analytic}"
                );
            };
            for k in 0..3 {
                check(g.position[k], &|c, d| c.positions[0][k] += d);
                check(g.log_scale[k], &|c, d| c.log_scales[0][k] += d);
            }
            for k in 0..4 {
                check(g.rotation[k], &|c, d| c.rotations[0][k] += d);
            }
        }
    }
}
