//! Rotation and quaternion primitives on SO(3).
//!
//! Rotations are stored as 3×3 matrices whose columns `c1, c2, c3` form a
//! right-handed orthonormal frame. Unit quaternions use `(w, x, y, z)` order
//! and double-cover SO(3): `q` and `-q` map to the same matrix.
//!
//! Densities throughout the crate are expressed relative to the Haar
//! probability measure, so the uniform distribution has log-density 0.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Tolerance for accepting an externally supplied matrix as a rotation.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// Quaternions whose norm deviates from 1 by less than this are renormalized.
pub const RENORMALIZE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: Matrix3<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    /// Validates `m` (‖mᵀm − I‖∞ ≤ 1e-6 and det > 0) and wraps it.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let defect = orthonormality_defect(&m);
        let det = m.determinant();
        if !(defect <= ORTHONORMAL_TOL) || det <= 0.0 {
            return Err(Error::NotRotation { defect, det });
        }
        Ok(Self { m })
    }

    /// Wraps a matrix the caller already knows to be a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self { m }
    }

    /// Builds a rotation from its first two columns; the third is `c1 × c2`.
    pub fn from_two_columns(c1: Vector3<f64>, c2: Vector3<f64>) -> Self {
        let c3 = c1.cross(&c2);
        Self {
            m: Matrix3::from_columns(&[c1, c2, c3]),
        }
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let a = axis / n * s;
        quat_to_matrix(&UnitQuaternion::from_vector_unchecked(Vector4::new(
            c, a.x, a.y, a.z,
        )))
    }

    /// Exponential map from the Lie algebra (rotation vector) to SO(3).
    pub fn exp(v: &Vector3<f64>) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    /// Rotation vector of this rotation, with angle in [0, π].
    pub fn log(&self) -> Vector3<f64> {
        let q = matrix_to_quat(self);
        let v = Vector3::new(q.x(), q.y(), q.z());
        let s = v.norm();
        if s < 1e-300 {
            return Vector3::zeros();
        }
        // q is canonicalized, but w may still be negative when w is not the
        // first nonzero coordinate; fold to the short way round.
        let (w, v) = if q.w() < 0.0 { (-q.w(), -v) } else { (q.w(), v) };
        let angle = 2.0 * s.atan2(w);
        v * (angle / s)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Column `i` (0-based) of the matrix.
    pub fn column(&self, i: usize) -> Vector3<f64> {
        self.m.column(i).into_owned()
    }

    pub fn transpose(&self) -> Self {
        Self {
            m: self.m.transpose(),
        }
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self { m: self.m * other.m }
    }

    /// Rotation angle in [0, π].
    pub fn angle(&self) -> f64 {
        let m = &self.m;
        let cos = (m.trace() - 1.0) / 2.0;
        let sin = 0.5
            * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
                .norm();
        sin.atan2(cos)
    }

    pub fn to_quaternion(&self) -> UnitQuaternion {
        matrix_to_quat(self)
    }

    /// Row-major copy of the matrix entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Columns `c1, c2, c3` concatenated; the layout used by the batched tape.
    pub fn to_column_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        out.copy_from_slice(self.m.as_slice());
        out
    }

    pub fn from_column_major(v: &[f64]) -> Self {
        Self {
            m: Matrix3::from_column_slice(&v[..9]),
        }
    }
}

fn orthonormality_defect(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).amax()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    v: Vector4<f64>,
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        Self {
            v: Vector4::new(1.0, 0.0, 0.0, 0.0),
        }
    }

    /// Accepts `(w, x, y, z)` within 1e-6 of unit norm and renormalizes it.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        Self::from_vector(Vector4::new(w, x, y, z))
    }

    pub fn from_vector(v: Vector4<f64>) -> Result<Self> {
        let n = v.norm();
        if !((n - 1.0).abs() < RENORMALIZE_TOL) {
            return Err(Error::NotUnitQuaternion(n));
        }
        Ok(Self { v: v / n })
    }

    /// Normalizes an arbitrary nonzero 4-vector.
    pub fn normalize(v: Vector4<f64>) -> Result<Self> {
        let n = v.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::DegenerateInput {
                op: "quaternion normalize",
                norm: n,
            });
        }
        Ok(Self { v: v / n })
    }

    pub(crate) fn from_vector_unchecked(v: Vector4<f64>) -> Self {
        Self { v }
    }

    pub fn as_vector(&self) -> &Vector4<f64> {
        &self.v
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.v[0], self.v[1], self.v[2], self.v[3]]
    }

    pub fn w(&self) -> f64 {
        self.v[0]
    }
    pub fn x(&self) -> f64 {
        self.v[1]
    }
    pub fn y(&self) -> f64 {
        self.v[2]
    }
    pub fn z(&self) -> f64 {
        self.v[3]
    }

    pub fn dot(&self, other: &UnitQuaternion) -> f64 {
        self.v.dot(&other.v)
    }

    /// Sign representative whose first nonzero coordinate is positive.
    pub fn canonical(&self) -> Self {
        match self.v.iter().find(|c| **c != 0.0) {
            Some(c) if *c < 0.0 => -*self,
            _ => *self,
        }
    }

    /// Hamilton product `self ⊗ other`.
    pub fn mul(&self, other: &UnitQuaternion) -> Self {
        let (a, b) = (&self.v, &other.v);
        Self {
            v: Vector4::new(
                a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
            ),
        }
    }

    pub fn to_rotation(&self) -> Rotation {
        quat_to_matrix(self)
    }
}

impl std::ops::Neg for UnitQuaternion {
    type Output = Self;
    fn neg(self) -> Self {
        Self { v: -self.v }
    }
}

/// Rotation matrix of a quaternion.
///
/// Every entry is quadratic in `q` (scaled by `2/‖q‖²`), so the result is
/// exactly even under `q → −q`.
pub fn quat_to_matrix(q: &UnitQuaternion) -> Rotation {
    Rotation {
        m: quat_to_matrix_raw(q.to_array()),
    }
}

pub(crate) fn quat_to_matrix_raw([w, x, y, z]: [f64; 4]) -> Matrix3<f64> {
    let s = 2.0 / (w * w + x * x + y * y + z * z);
    Matrix3::new(
        1.0 - s * (y * y + z * z),
        s * (x * y - z * w),
        s * (x * z + y * w),
        s * (x * y + z * w),
        1.0 - s * (x * x + z * z),
        s * (y * z - x * w),
        s * (x * z - y * w),
        s * (y * z + x * w),
        1.0 - s * (x * x + y * y),
    )
}

/// Which coordinate the largest-pivot extraction solves for first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuatBranch {
    W,
    X,
    Y,
    Z,
}

/// Picks the extraction branch with the largest squared pivot among
/// `1 + tr`, `1 + 2R₀₀ − tr`, `1 + 2R₁₁ − tr`, `1 + 2R₂₂ − tr`.
pub fn quat_branch(m: &Matrix3<f64>) -> (QuatBranch, f64) {
    let tr = m.trace();
    let candidates = [
        (QuatBranch::W, 1.0 + tr),
        (QuatBranch::X, 1.0 + 2.0 * m[(0, 0)] - tr),
        (QuatBranch::Y, 1.0 + 2.0 * m[(1, 1)] - tr),
        (QuatBranch::Z, 1.0 + 2.0 * m[(2, 2)] - tr),
    ];
    let mut best = candidates[0];
    for c in &candidates[1..] {
        if c.1 > best.1 {
            best = *c;
        }
    }
    best
}

/// Branch extraction without sign canonicalization.
pub(crate) fn matrix_to_quat_raw(m: &Matrix3<f64>) -> [f64; 4] {
    let (branch, pivot) = quat_branch(m);
    let r = pivot.max(0.0).sqrt();
    let h = 0.5 / r;
    match branch {
        QuatBranch::W => [
            0.5 * r,
            (m[(2, 1)] - m[(1, 2)]) * h,
            (m[(0, 2)] - m[(2, 0)]) * h,
            (m[(1, 0)] - m[(0, 1)]) * h,
        ],
        QuatBranch::X => [
            (m[(2, 1)] - m[(1, 2)]) * h,
            0.5 * r,
            (m[(0, 1)] + m[(1, 0)]) * h,
            (m[(0, 2)] + m[(2, 0)]) * h,
        ],
        QuatBranch::Y => [
            (m[(0, 2)] - m[(2, 0)]) * h,
            (m[(0, 1)] + m[(1, 0)]) * h,
            0.5 * r,
            (m[(1, 2)] + m[(2, 1)]) * h,
        ],
        QuatBranch::Z => [
            (m[(1, 0)] - m[(0, 1)]) * h,
            (m[(0, 2)] + m[(2, 0)]) * h,
            (m[(1, 2)] + m[(2, 1)]) * h,
            0.5 * r,
        ],
    }
}

/// Sign that makes the first nonzero coordinate positive.
pub(crate) fn canonical_sign(q: &[f64; 4]) -> f64 {
    match q.iter().find(|c| **c != 0.0) {
        Some(c) if *c < 0.0 => -1.0,
        _ => 1.0,
    }
}

/// Quaternion of a rotation via largest-pivot extraction, canonicalized so
/// the first nonzero coordinate is positive.
pub fn matrix_to_quat(r: &Rotation) -> UnitQuaternion {
    let q = matrix_to_quat_raw(&r.m);
    let s = canonical_sign(&q);
    UnitQuaternion {
        v: Vector4::new(s * q[0], s * q[1], s * q[2], s * q[3]),
    }
}

/// Validating variant for matrices of unknown provenance.
pub fn matrix_to_quat_checked(m: &Matrix3<f64>) -> Result<UnitQuaternion> {
    Rotation::from_matrix(*m).map(|r| matrix_to_quat(&r))
}

/// Geodesic distance in radians, `arccos((tr(R1ᵀR2) − 1)/2)` ∈ [0, π].
///
/// Evaluated through `atan2(sin, cos)` of the relative rotation, which is
/// the same angle but keeps full precision near 0.
pub fn geodesic_distance(r1: &Rotation, r2: &Rotation) -> f64 {
    r1.transpose().compose(r2).angle()
}

/// Haar-uniform rotation: four standard normals, normalized and converted.
pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    quat_to_matrix(&sample_uniform_quat(rng))
}

pub fn sample_uniform_quat<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion {
    loop {
        let v = Vector4::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return UnitQuaternion { v: v / n };
        }
    }
}

/// Quaternion of the shortest-arc rotation taking `e_z` to `dir`.
///
/// At the south pole the arc is undefined; the π rotation about `e_x` is used.
pub fn hopf_section(dir: &Vector3<f64>) -> UnitQuaternion {
    let d = dir.normalize();
    let w = 1.0 + d.z;
    if w < 1e-12 {
        return UnitQuaternion {
            v: Vector4::new(0.0, 1.0, 0.0, 0.0),
        };
    }
    let v = Vector4::new(w, -d.y, d.x, 0.0);
    UnitQuaternion { v: v / v.norm() }
}

/// Hopf coordinates of a rotation: the image of the canonical z-axis and
/// the tilt angle about it, so that `R = section(dir) · Rz(tilt)`.
pub fn hopf_coordinates(r: &Rotation) -> (Vector3<f64>, f64) {
    let dir = r.column(2);
    let base = quat_to_matrix(&hopf_section(&dir));
    let rel = base.transpose().compose(r);
    let tilt = rel.m[(1, 0)].atan2(rel.m[(0, 0)]);
    (dir, tilt)
}

/// Inverse of [`hopf_coordinates`].
pub fn from_hopf_coordinates(dir: &Vector3<f64>, tilt: f64) -> Rotation {
    let (s, c) = (tilt / 2.0).sin_cos();
    let fiber = UnitQuaternion {
        v: Vector4::new(c, 0.0, 0.0, s),
    };
    quat_to_matrix(&hopf_section(dir).mul(&fiber))
}

/// Jacobian determinant of `f` at `x` by central differences, measured in
/// right-trivialized exponential coordinates on both sides. For a map that
/// transports Haar densities this is the density ratio.
pub fn numerical_jacobian_det<F: FnMut(&Rotation) -> Rotation>(mut f: F, x: &Rotation, h: f64) -> f64 {
    let y0t = f(x).transpose();
    let mut j = Matrix3::zeros();
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = h;
        let yp = f(&x.compose(&Rotation::exp(&e)));
        let ym = f(&x.compose(&Rotation::exp(&-e)));
        let dp = y0t.compose(&yp).log();
        let dm = y0t.compose(&ym).log();
        j.set_column(k, &((dp - dm) / (2.0 * h)));
    }
    j.determinant()
}

/// Equal-weight quadrature grid on SO(3).
#[derive(Debug, Clone)]
pub struct SO3Grid {
    points: Vec<Rotation>,
    weight: f64,
}

impl SO3Grid {
    pub fn points(&self) -> &[Rotation] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Probability-measure weight of each point, `1/N`.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Haar integral of `f` approximated as `Σ f(Rᵢ)/N`.
    pub fn quadrature<F: Fn(&Rotation) -> f64>(&self, f: F) -> f64 {
        self.points.iter().map(f).sum::<f64>() / self.points.len() as f64
    }

    /// Quadrature of precomputed values, one per grid point.
    pub fn quadrature_values(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.points.len());
        values.iter().sum::<f64>() / values.len() as f64
    }

    /// Grid with roughly `n_total` points, balancing base and fiber spacing
    /// (`n_fiber ≈ √(π·n_base)`).
    pub fn with_size(n_total: usize) -> Result<Self> {
        let n_base = ((n_total as f64).powf(2.0 / 3.0) / PI.powf(1.0 / 3.0)).round() as usize;
        let n_base = n_base.max(16);
        let n_fiber = ((n_total as f64 / n_base as f64).round() as usize).max(8);
        fibonacci_hopf_grid(n_base, n_fiber)
    }

    /// Typical spacing between neighbouring points, in radians.
    pub fn spacing(&self) -> f64 {
        // Haar volume of SO(3) under the bi-invariant metric is 8π².
        (8.0 * PI * PI / self.points.len() as f64).cbrt()
    }
}

const GOLDEN: f64 = 1.618_033_988_749_895;

/// Spherical-Fibonacci base points lifted along Hopf fibers.
///
/// Base point `i` is `z = 1 − (2i+1)/n_base` at longitude `2π·i/φ`; each
/// carries `n_fiber` equally spaced tilt angles, shifted per base point by a
/// low-discrepancy offset so neighbouring fibers do not align.
pub fn fibonacci_hopf_grid(n_base: usize, n_fiber: usize) -> Result<SO3Grid> {
    if n_base < 16 || n_fiber < 8 {
        return Err(Error::GridTooCoarse { n_base, n_fiber });
    }
    let n = n_base * n_fiber;
    let mut points = Vec::with_capacity(n);
    let fiber_step = 2.0 * PI / n_fiber as f64;
    for i in 0..n_base {
        let z = 1.0 - (2.0 * i as f64 + 1.0) / n_base as f64;
        let rho = (1.0 - z * z).max(0.0).sqrt();
        let lon = 2.0 * PI * (i as f64 / GOLDEN).fract();
        let dir = Vector3::new(rho * lon.cos(), rho * lon.sin(), z);
        let section = hopf_section(&dir);
        let shift = (i as f64 * (GOLDEN - 1.0) * (GOLDEN - 1.0)).fract();
        for j in 0..n_fiber {
            let psi = (j as f64 + shift) * fiber_step;
            let (s, c) = (psi / 2.0).sin_cos();
            let fiber = UnitQuaternion {
                v: Vector4::new(c, 0.0, 0.0, s),
            };
            points.push(quat_to_matrix(&section.mul(&fiber)));
        }
    }
    Ok(SO3Grid {
        points,
        weight: 1.0 / n as f64,
    })
}
