//! 2×2 complex matrices and the closed-form SU(2) step propagator with its
//! parameter derivatives.

use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

pub type Spinor = [Complex64; 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2(pub [[Complex64; 2]; 2]);

impl Mat2 {
    pub const ZERO: Mat2 = Mat2([[ZERO, ZERO], [ZERO, ZERO]]);
    pub const IDENTITY: Mat2 = Mat2([[ONE, ZERO], [ZERO, ONE]]);
    pub const SIGMA_X: Mat2 = Mat2([[ZERO, ONE], [ONE, ZERO]]);
    pub const SIGMA_Y: Mat2 = Mat2([[ZERO, Complex64::new(0.0, -1.0)], [I, ZERO]]);
    pub const SIGMA_Z: Mat2 = Mat2([[ONE, ZERO], [ZERO, Complex64::new(-1.0, 0.0)]]);

    pub fn pauli(axis: usize) -> Mat2 {
        [Self::SIGMA_X, Self::SIGMA_Y, Self::SIGMA_Z][axis]
    }

    /// `a·I + Σ_i b_i σ_i`.
    pub fn from_pauli(a: Complex64, b: [Complex64; 3]) -> Mat2 {
        Mat2([[a + b[2], b[0] - I * b[1]], [b[0] + I * b[1], a - b[2]]])
    }

    pub fn adjoint(&self) -> Mat2 {
        let m = &self.0;
        Mat2([[m[0][0].conj(), m[1][0].conj()], [m[0][1].conj(), m[1][1].conj()]])
    }

    pub fn trace(&self) -> Complex64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn scale(&self, s: Complex64) -> Mat2 {
        let m = &self.0;
        Mat2([[m[0][0] * s, m[0][1] * s], [m[1][0] * s, m[1][1] * s]])
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn apply(&self, v: &Spinor) -> Spinor {
        let m = &self.0;
        [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
    }

    /// `M† v` without forming the adjoint.
    pub fn apply_adjoint(&self, v: &Spinor) -> Spinor {
        let m = &self.0;
        [
            m[0][0].conj() * v[0] + m[1][0].conj() * v[1],
            m[0][1].conj() * v[0] + m[1][1].conj() * v[1],
        ]
    }

    /// `Tr(σ M)` for the Pauli matrix on `axis`.
    pub fn pauli_component(&self, axis: usize) -> Complex64 {
        (Self::pauli(axis) * *self).trace()
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, rhs: Mat2) -> Mat2 {
        let (a, b) = (&self.0, &rhs.0);
        let mut out = [[ZERO; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Mat2(out)
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    fn add(self, rhs: Mat2) -> Mat2 {
        let (a, b) = (&self.0, &rhs.0);
        Mat2([[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]])
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, rhs: Mat2) -> Mat2 {
        self + rhs.scale(-ONE)
    }
}

pub fn inner(a: &Spinor, b: &Spinor) -> Complex64 {
    a[0].conj() * b[0] + a[1].conj() * b[1]
}

/// Radial functions of `U(v) = cos(r/2) I - i f(r) (v·σ)`:
/// `f = sin(r/2)/r`, `h = f'/r`, `k = h'/r`.
fn radial(r: f64) -> (f64, f64, f64) {
    if r < 1.0 {
        // Taylor series in r²; 12 terms are exact to rounding for r < 1
        let r2 = r * r;
        let (mut f, mut h, mut k) = (0.0, 0.0, 0.0);
        let mut coeff = 0.5; // (-1)^n / (2^{2n+1} (2n+1)!)
        let mut pow = 1.0; // r^{2n}
        let mut pow_h = 0.0; // r^{2n-2}
        let mut pow_k = 0.0; // r^{2n-4}
        for n in 0..12 {
            let nf = n as f64;
            f += coeff * pow;
            if n >= 1 {
                h += coeff * 2.0 * nf * pow_h;
            }
            if n >= 2 {
                k += coeff * 2.0 * nf * (2.0 * nf - 2.0) * pow_k;
            }
            coeff *= -1.0 / (4.0 * (2.0 * nf + 2.0) * (2.0 * nf + 3.0));
            pow_k = pow_h;
            pow_h = pow;
            pow *= r2;
        }
        (f, h, k)
    } else {
        let (s, c) = (0.5 * r).sin_cos();
        let f = s / r;
        let h = (0.5 * r * c - s) / r.powi(3);
        let k = (3.0 * s - 1.5 * r * c - 0.25 * r * r * s) / r.powi(5);
        (f, h, k)
    }
}

/// `exp(-i (v·σ)/2)`, a rotation by `|v|` about `v`.
pub fn rotation(v: [f64; 3]) -> Mat2 {
    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let (f, _, _) = radial(r);
    let c = (0.5 * r).cos();
    Mat2::from_pauli(Complex64::new(c, 0.0), v.map(|x| -I * f * x))
}

/// Rotation `exp(-i (v·σ)/2)` with first derivatives in every component of `v`
/// and the mixed second derivatives `∂_z ∂_x`, `∂_z ∂_y`.
#[derive(Debug, Clone, Copy)]
pub struct RotationJet {
    pub u: Mat2,
    pub d: [Mat2; 3],
    pub dz_dx: Mat2,
    pub dz_dy: Mat2,
}

impl RotationJet {
    pub fn new(v: [f64; 3]) -> Self {
        let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let (f, h, k) = radial(r);
        let c = (0.5 * r).cos();
        let vs = |s: f64| v.map(|x| -I * s * x);
        let u = Mat2::from_pauli(Complex64::new(c, 0.0), vs(f));
        let d = [0, 1, 2].map(|i| {
            let mut b = vs(h * v[i]);
            b[i] += -I * f;
            Mat2::from_pauli(Complex64::new(-0.5 * f * v[i], 0.0), b)
        });
        let mixed = |i: usize| {
            let mut b = vs(k * v[2] * v[i]);
            b[i] += -I * h * v[2];
            b[2] += -I * h * v[i];
            Mat2::from_pauli(Complex64::new(-0.5 * h * v[2] * v[i], 0.0), b)
        };
        Self { u, d, dz_dx: mixed(0), dz_dy: mixed(1) }
    }
}
