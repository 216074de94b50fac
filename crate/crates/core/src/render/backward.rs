use rayon::prelude::*;

use super::{view_direction, RenderOutput, CH_D, CH_L, CH_N, CH_P, CH_RGB, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::project::project_backward;
use crate::scene::{sh, Camera, GaussianCloud, GradientBundle};

/// Loss adjoints on each rendered image.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAdjoints {
    pub r0: Image,
    pub pr: Image,
    pub dr: Image,
    pub lr: Image,
    pub ngs: Image,
}

impl ChannelAdjoints {
    pub fn zeros(width: usize, height: usize) -> Self {
        ChannelAdjoints {
            r0: Image::new(width, height, 3),
            pr: Image::new(width, height, 1),
            dr: Image::new(width, height, 1),
            lr: Image::new(width, height, 3),
            ngs: Image::new(width, height, 3),
        }
    }

    fn check(&self, w: usize, h: usize) -> Result<()> {
        for (img, c, name) in [
            (&self.r0, 3, "R0"),
            (&self.pr, 1, "Pr"),
            (&self.dr, 1, "Dr"),
            (&self.lr, 3, "Lr"),
            (&self.ngs, 3, "Ngs"),
        ] {
            if img.width() != w || img.height() != h || img.channels() != c {
                return Err(Error::Shape(format!(
                    "{name} adjoint does not match the frame"
                )));
            }
        }
        Ok(())
    }

    fn at(&self, px: usize) -> [f64; NUM_CHANNELS] {
        let mut g = [0.0; NUM_CHANNELS];
        g[CH_RGB..CH_RGB + 3].copy_from_slice(&self.r0.data()[px * 3..px * 3 + 3]);
        g[CH_P] = self.pr.data()[px];
        g[CH_D] = self.dr.data()[px];
        g[CH_L..CH_L + 3].copy_from_slice(&self.lr.data()[px * 3..px * 3 + 3]);
        g[CH_N..CH_N + 3].copy_from_slice(&self.ngs.data()[px * 3..px * 3 + 3]);
        g
    }
}

/// Screen-space gradients of one primitive.
#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    features: [f64; NUM_CHANNELS],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        for k in 0..NUM_CHANNELS {
            self.features[k] += o.features[k];
        }
    }
}

/// Gradients of `sum(adjoint * output)` with respect to every raw cloud parameter.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    out: &RenderOutput,
    adjoints: &ChannelAdjoints,
) -> Result<GradientBundle> {
    let aux = &out.aux;
    if aux.n_primitives != cloud.len() || &aux.camera != cam {
        return Err(Error::InvalidArgument(
            "render output does not belong to this cloud and camera".into(),
        ));
    }
    let frame = &aux.frame;
    let (w, h) = (frame.width, frame.height);
    adjoints.check(w, h)?;
    let cfg = &aux.config;

    // per tile: screen gradients for each list entry
    let per_tile: Vec<Vec<ScreenGrad>> = (0..frame.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &frame.lists[t];
            let mut acc = vec![ScreenGrad::default(); list.len()];
            if list.is_empty() {
                return acc;
            }
            let (x0, x1, y0, y1) = frame.tile_rect(t);
            let mut hits: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = y * w + x;
                    let walked = aux.walked[px] as usize;
                    if walked == 0 {
                        continue;
                    }
                    let g_out = adjoints.at(px);
                    if g_out.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    hits.clear();
                    let mut tr = 1.0;
                    for (pos, &i) in list[..walked].iter().enumerate() {
                        let i = i as usize;
                        let (g, dx, dy) = frame.falloff(i, x, y);
                        let alpha = frame.opacity[i] * g;
                        if alpha < cfg.min_alpha {
                            continue;
                        }
                        hits.push((pos, alpha, g, dx, dy, tr));
                        tr *= 1.0 - alpha;
                    }
                    // value of everything behind the current entry
                    let mut behind = aux.background;
                    for &(pos, alpha, g, dx, dy, tr) in hits.iter().rev() {
                        let i = list[pos] as usize;
                        let f = &aux.features[i];
                        let sg = &mut acc[pos];
                        let mut d_alpha = 0.0;
                        for c in 0..NUM_CHANNELS {
                            sg.features[c] += g_out[c] * alpha * tr;
                            d_alpha += g_out[c] * tr * (f[c] - behind[c]);
                            behind[c] = f[c] * alpha + (1.0 - alpha) * behind[c];
                        }
                        sg.opacity += d_alpha * g;
                        let d_g = d_alpha * frame.opacity[i];
                        let [a, b, c] = frame.conics[i];
                        sg.mean[0] += d_g * g * (a * dx + b * dy);
                        sg.mean[1] += d_g * g * (b * dx + c * dy);
                        sg.conic[0] += d_g * g * (-0.5 * dx * dx);
                        sg.conic[1] += d_g * g * (-dx * dy);
                        sg.conic[2] += d_g * g * (-0.5 * dy * dy);
                    }
                }
            }
            acc
        })
        .collect();

    // fixed-order reduction over tiles
    let mut screen = vec![ScreenGrad::default(); cloud.len()];
    for (list, acc) in frame.lists.iter().zip(&per_tile) {
        for (&i, g) in list.iter().zip(acc) {
            screen[i as usize].add(g);
        }
    }

    let center = cam.center();
    let per_prim: Vec<Option<PrimGrad>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let p = &frame.projected[i];
            if p.culled || frame.conics[i] == [0.0; 3] {
                return None;
            }
            Some(primitive_backward(cloud, cam, aux, &center, i, &screen[i]))
        })
        .collect();

    let mut grads = GradientBundle::zeros(cloud.len());
    for (i, g) in per_prim.into_iter().enumerate() {
        let Some(g) = g else { continue };
        grads.positions[i] = g.position;
        grads.rotations[i] = g.rotation;
        grads.log_scales[i] = g.log_scale;
        grads.opacity_logits[i] = g.opacity_logit;
        grads.sh[i] = g.sh;
        grads.structure_logits[i] = g.structure_logit;
        grads.illum[i] = g.illum;
        grads.depth_logits[i] = g.depth_logit;
        grads.noise[i] = g.noise;
    }
    Ok(grads)
}

struct PrimGrad {
    position: [f64; 3],
    rotation: [f64; 4],
    log_scale: [f64; 3],
    opacity_logit: f64,
    sh: [[f64; 3]; crate::scene::SH_COEFFS],
    structure_logit: f64,
    illum: [f64; 3],
    depth_logit: f64,
    noise: [f64; 3],
}

fn primitive_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    aux: &super::RenderAux,
    center: &[f64; 3],
    i: usize,
    sg: &ScreenGrad,
) -> PrimGrad {
    let frame = &aux.frame;
    // conic -> covariance: dS = -Q dQ Q with the off-diagonal adjoint split in half
    let [a, b, c] = frame.conics[i];
    let gq = [
        [sg.conic[0], 0.5 * sg.conic[1]],
        [0.5 * sg.conic[1], sg.conic[2]],
    ];
    let q = [[a, b], [b, c]];
    let mut gs = [[0.0; 2]; 2];
    for r in 0..2 {
        for s in 0..2 {
            let mut v = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    v -= q[r][k] * gq[k][l] * q[l][s];
                }
            }
            gs[r][s] = v;
        }
    }
    let d_cov = [gs[0][0], gs[0][1] + gs[1][0], gs[1][1]];
    let pg = project_backward(cloud, cam, i, sg.mean, d_cov);
    let mut position = pg.position;

    // color through SH, including the view direction
    let (dir, dist) = view_direction(cloud, i, center);
    let (basis, dbasis) = sh::basis(cloud.sh_degree, dir);
    let mut d_color = [0.0; 3];
    for ch in 0..3 {
        if !aux.color_clamped[i][ch] {
            d_color[ch] = sg.features[CH_RGB + ch];
        }
    }
    let mut sh_grad = [[0.0; 3]; crate::scene::SH_COEFFS];
    let mut d_dir = [0.0; 3];
    for k in 0..cloud.active_sh_coeffs() {
        for ch in 0..3 {
            sh_grad[k][ch] = d_color[ch] * basis[k];
            for ax in 0..3 {
                d_dir[ax] += d_color[ch] * cloud.sh[i][k][ch] * dbasis[k][ax];
            }
        }
    }
    let proj: f64 = (0..3).map(|k| dir[k] * d_dir[k]).sum();
    for k in 0..3 {
        position[k] += (d_dir[k] - dir[k] * proj) / dist;
    }

    let o = frame.opacity[i];
    let p = aux.features[i][CH_P];
    let d = aux.features[i][CH_D];
    let l = &aux.features[i][CH_L..CH_L + 3];
    PrimGrad {
        position,
        rotation: pg.rotation,
        log_scale: pg.log_scale,
        opacity_logit: sg.opacity * o * (1.0 - o),
        sh: sh_grad,
        structure_logit: sg.features[CH_P] * p * (1.0 - p),
        illum: [0, 1, 2].map(|k| sg.features[CH_L + k] * l[k]),
        depth_logit: sg.features[CH_D] * d * (1.0 - d),
        noise: [0, 1, 2].map(|k| sg.features[CH_N + k]),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{render, RenderConfig};
    use super::*;
    use crate::scene::{logit, sigmoid, ParamArrays, ParamGroup};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_scene(rng: &mut ChaCha8Rng, n: usize, sh_degree: usize) -> GaussianCloud {
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(2.0..4.0),
                ]
            })
            .collect();
        let cols: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(0.3..0.9),
                    rng.random_range(0.3..0.9),
                    rng.random_range(0.3..0.9),
                ]
            })
            .collect();
        let mut c = GaussianCloud::from_points(&pts, &cols).unwrap();
        c.sh_degree = sh_degree;
        for i in 0..n {
            c.rotations[i] = [
                rng.random_range(0.5..1.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            c.log_scales[i] = [
                rng.random_range(-2.5..-1.2),
                rng.random_range(-2.5..-1.2),
                rng.random_range(-2.5..-1.2),
            ];
            c.opacity_logits[i] = rng.random_range(-1.0..2.0);
            for k in 1..c.active_sh_coeffs() {
                for ch in 0..3 {
                    c.sh[i][k][ch] = rng.random_range(-0.1..0.1);
                }
            }
            c.structure_logits[i] = rng.random_range(-2.0..2.0);
            c.depth_logits[i] = rng.random_range(-2.0..2.0);
            c.illum[i] = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            c.noise[i] = [
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            ];
        }
        c
    }

    fn random_adjoints(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ChannelAdjoints {
        let mut a = ChannelAdjoints::zeros(w, h);
        for img in [&mut a.r0, &mut a.pr, &mut a.dr, &mut a.lr, &mut a.ngs] {
            for v in img.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        a
    }

    fn objective(c: &GaussianCloud, cam: &Camera, adj: &ChannelAdjoints, bg: [f64; 3]) -> f64 {
        let out = render(c, cam, bg, &RenderConfig::exact()).unwrap();
        [
            (&out.r0, &adj.r0),
            (&out.pr, &adj.pr),
            (&out.dr, &adj.dr),
            (&out.lr, &adj.lr),
            (&out.ngs, &adj.ngs),
        ]
        .iter()
        .map(|(o, a)| {
            o.data()
                .iter()
                .zip(a.data())
                .map(|(x, y)| x * y)
                .sum::<f64>()
        })
        .sum()
    }

    #[test]
    fn zero_adjoint_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_scene(&mut rng, 5, 1);
        let cam = Camera::identity(8, 8, 8.0);
        let out = render(&c, &cam, [0.2; 3], &RenderConfig::default()).unwrap();
        let g = render_backward(&c, &cam, &out, &ChannelAdjoints::zeros(8, 8)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn mismatched_aux_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_scene(&mut rng, 5, 0);
        let cam = Camera::identity(8, 8, 8.0);
        let out = render(&c, &cam, [0.0; 3], &RenderConfig::default()).unwrap();
        let other = Camera::identity(8, 8, 9.0);
        assert!(render_backward(&c, &other, &out, &ChannelAdjoints::zeros(8, 8)).is_err());
        assert!(render_backward(&c, &cam, &out, &ChannelAdjoints::zeros(4, 8)).is_err());
    }

    #[test]
    fn single_primitive_structure_gradient_closed_form() {
        let mut c = GaussianCloud::from_points(&[[0.05, -0.02, 2.0]], &[[0.5; 3]]).unwrap();
        c.log_scales[0] = [-1.5; 3];
        c.opacity_logits[0] = logit(0.6);
        c.structure_logits[0] = 0.4;
        let cam = Camera::identity(8, 8, 8.0);
        let cfg = RenderConfig::exact();
        let out = render(&c, &cam, [0.0; 3], &cfg).unwrap();
        let mut adj = ChannelAdjoints::zeros(8, 8);
        adj.pr = Image::filled(8, 8, 1, 1.0);
        let g = render_backward(&c, &cam, &out, &adj).unwrap();
        let p = crate::scene::project_one(&c, &cam, 0);
        let [qa, qb, qc] = p.conic();
        let s = sigmoid(0.4);
        let mut expect = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let dx = x as f64 - p.mean[0];
                let dy = y as f64 - p.mean[1];
                let gv = (-0.5 * (qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy)).exp();
                expect += 0.6 * gv * s * (1.0 - s);
            }
        }
        assert!((g.structure_logits[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cam = Camera::look_at(
            [0.1, -0.1, -0.2],
            [0.0, 0.0, 3.0],
            [0.0, 1.0, 0.0],
            8,
            8,
            7.0,
        )
        .unwrap();
        let h = 1e-4;
        for trial in 0..6 {
            let c = random_scene(&mut rng, 5, trial % 4);
            let adj = random_adjoints(&mut rng, 8, 8);
            let bg = [0.1, 0.5, 0.9];
            let out = render(&c, &cam, bg, &RenderConfig::exact()).unwrap();
            let g = render_backward(&c, &cam, &out, &adj).unwrap();
            for group in ParamGroup::ALL {
                let width = group.width();
                for idx in 0..c.group(group).len() {
                    if group == ParamGroup::Sh && idx % width >= 3 * c.active_sh_coeffs() {
                        continue;
                    }
                    let mut a = c.clone();
                    a.group_mut(group)[idx] += h;
                    let mut b = c.clone();
                    b.group_mut(group)[idx] -= h;
                    let fd =
                        (objective(&a, &cam, &adj, bg) - objective(&b, &cam, &adj, bg)) / (2.0 * h);
                    let an = g.group(group)[idx];
                    let err = (fd - an).abs();
                    assert!(
                        err <= 1e-6 || err <= 1e-3 * fd.abs().max(an.abs()),
                        "trial {trial} {} [{idx}]: fd {fd} analytic {an}",
                        group.name()
                    );
                }
            }
        }
    }
}
