//! Real spherical harmonics up to degree 3 (the usual splatting sign convention).

use super::cloud::SH_COEFFS;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values and their gradients with respect to the (unit) direction components.
/// Entries past the active degree are zero.
pub fn basis(degree: usize, dir: [f64; 3]) -> ([f64; SH_COEFFS], [[f64; 3]; SH_COEFFS]) {
    let mut y = [0.0; SH_COEFFS];
    let mut g = [[0.0; 3]; SH_COEFFS];
    let [x, yv, z] = dir;
    y[0] = C0;
    if degree >= 1 {
        y[1] = -C1 * yv;
        g[1] = [0.0, -C1, 0.0];
        y[2] = C1 * z;
        g[2] = [0.0, 0.0, C1];
        y[3] = -C1 * x;
        g[3] = [-C1, 0.0, 0.0];
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, yv * yv, z * z);
        y[4] = C2[0] * x * yv;
        g[4] = [C2[0] * yv, C2[0] * x, 0.0];
        y[5] = C2[1] * yv * z;
        g[5] = [0.0, C2[1] * z, C2[1] * yv];
        y[6] = C2[2] * (2.0 * zz - xx - yy);
        g[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * yv, 4.0 * C2[2] * z];
        y[7] = C2[3] * x * z;
        g[7] = [C2[3] * z, 0.0, C2[3] * x];
        y[8] = C2[4] * (xx - yy);
        g[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * yv, 0.0];
        if degree >= 3 {
            let c = C3;
            y[9] = c[0] * yv * (3.0 * xx - yy);
            g[9] = [6.0 * c[0] * x * yv, c[0] * (3.0 * xx - 3.0 * yy), 0.0];
            y[10] = c[1] * x * yv * z;
            g[10] = [c[1] * yv * z, c[1] * x * z, c[1] * x * yv];
            y[11] = c[2] * yv * (4.0 * zz - xx - yy);
            g[11] = [
                -2.0 * c[2] * x * yv,
                c[2] * (4.0 * zz - xx - 3.0 * yy),
                8.0 * c[2] * yv * z,
            ];
            y[12] = c[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            g[12] = [
                -6.0 * c[3] * x * z,
                -6.0 * c[3] * yv * z,
                c[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            y[13] = c[4] * x * (4.0 * zz - xx - yy);
            g[13] = [
                c[4] * (4.0 * zz - 3.0 * xx - yy),
                -2.0 * c[4] * x * yv,
                8.0 * c[4] * x * z,
            ];
            y[14] = c[5] * z * (xx - yy);
            g[14] = [2.0 * c[5] * x * z, -2.0 * c[5] * yv * z, c[5] * (xx - yy)];
            y[15] = c[6] * x * (xx - 3.0 * yy);
            g[15] = [c[6] * (3.0 * xx - 3.0 * yy), -6.0 * c[6] * x * yv, 0.0];
        }
    }
    (y, g)
}
