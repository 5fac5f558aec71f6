//! Synthetic target densities on SO(3), with normalizers, samplers and
//! entropy oracles. Densities are relative to the Haar probability measure,
//! so the uniform distribution has log-density 0.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{sample_uniform, Rotation, SO3Grid, UnitQuaternion};

/// Rejection sampling is abandoned below this acceptance rate.
pub const MIN_ACCEPTANCE: f64 = 1e-3;
/// Safety factor on the grid estimate of the density maximum.
pub const ENVELOPE_FACTOR: f64 = 1.05;

const ANGLE_STEPS: usize = 20_000;
const CDF_POINTS: usize = 1 << 14;

/// Matrix Fisher density `exp(tr(FᵀR)) / Z`.
#[derive(Debug, Clone)]
pub struct MatrixFisher {
    f: Matrix3<f64>,
    log_norm: Option<f64>,
    /// `(κ, Q)` when `F = κQ`; enables the 1-D normalizer and exact sampler.
    isotropic: Option<(f64, Rotation)>,
}

impl MatrixFisher {
    /// Unnormalized; call [`MatrixFisher::normalize`] before evaluating.
    pub fn new(f: Matrix3<f64>) -> Self {
        Self {
            f,
            log_norm: None,
            isotropic: None,
        }
    }

    /// `F = κ·mode`, normalized by 1-D quadrature over the rotation angle.
    pub fn isotropic(kappa: f64, mode: Rotation) -> Self {
        Self {
            f: mode.matrix() * kappa,
            log_norm: Some(isotropic_log_norm(kappa)),
            isotropic: Some((kappa, mode)),
        }
    }

    pub fn normalize(&mut self, grid: &SO3Grid) {
        self.log_norm = Some(compute_log_norm(&self.f, grid));
    }

    pub fn f(&self) -> &Matrix3<f64> {
        &self.f
    }

    pub fn log_norm(&self) -> Option<f64> {
        self.log_norm
    }

    pub fn log_prob(&self, r: &Rotation) -> Result<f64> {
        let z = self.log_norm.ok_or(Error::LogNormUnset)?;
        Ok(self.f.dot(r.matrix()) - z)
    }

    /// Mode of the density, known only for the isotropic form.
    pub fn mode(&self) -> Option<Rotation> {
        self.isotropic.map(|(_, q)| q)
    }

    pub fn sample_exact<R: Rng + ?Sized>(&self, table: &AngleTable, rng: &mut R) -> Option<Rotation> {
        let (_, q) = self.isotropic?;
        let angle = table.sample(rng);
        let axis = uniform_direction(rng);
        Some(q.compose(&Rotation::from_axis_angle(&axis, angle)))
    }
}

/// `tr(FᵀR) − log_norm`; fails if the normalizer has not been computed.
pub fn fisher_log_prob(f: &MatrixFisher, r: &Rotation) -> Result<f64> {
    f.log_prob(r)
}

/// Log of the grid average of `exp(tr(FᵀR))`.
pub fn compute_log_norm(f: &Matrix3<f64>, grid: &SO3Grid) -> f64 {
    let e: Vec<f64> = grid.points().par_iter().map(|r| f.dot(r.matrix())).collect();
    log_mean_exp(&e)
}

/// Max-subtracted `log(Σ exp(xᵢ) / n)`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + (s / xs.len() as f64).ln()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Haar density of the rotation angle is `(1 − cos θ)/π` on `[0, π]`. For
/// `F = κQ` the integrand is `exp(κ(1 + 2cos θ))`; this returns the angle
/// range carrying all but ~e⁻¹⁰⁰ of the mass and the unnormalized weights
/// `exp(2κ(cos θ − 1))(1 − cos θ)/π` on a uniform grid.
fn angle_weights(kappa: f64, steps: usize) -> (f64, Vec<f64>) {
    let top = if kappa > 0.0 { (10.0 / kappa.sqrt()).min(PI) } else { PI };
    let h = top / steps as f64;
    let w = (0..=steps)
        .map(|i| {
            let c = (i as f64 * h).cos();
            (2.0 * kappa * (c - 1.0)).exp() * (1.0 - c) / PI
        })
        .collect();
    (top, w)
}

fn simpson(w: &[f64], h: f64) -> f64 {
    let n = w.len() - 1;
    debug_assert!(n.is_multiple_of(2));
    let mut s = w[0] + w[n];
    for (i, v) in w.iter().enumerate().take(n).skip(1) {
        s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    s * h / 3.0
}

/// Log normalizer of the isotropic matrix Fisher density `F = κQ`.
pub fn isotropic_log_norm(kappa: f64) -> f64 {
    let (top, w) = angle_weights(kappa, ANGLE_STEPS);
    3.0 * kappa + simpson(&w, top / ANGLE_STEPS as f64).ln()
}

/// `E[log p]` under the isotropic matrix Fisher density `F = κQ`.
pub fn isotropic_expected_log_prob(kappa: f64) -> f64 {
    let (top, w) = angle_weights(kappa, ANGLE_STEPS);
    let h = top / ANGLE_STEPS as f64;
    let z = simpson(&w, h);
    let tw: Vec<f64> = w
        .iter()
        .enumerate()
        .map(|(i, v)| v * kappa * (1.0 + 2.0 * (i as f64 * h).cos()))
        .collect();
    simpson(&tw, h) / z - isotropic_log_norm(kappa)
}

/// Inverse-CDF table for the rotation angle of an isotropic matrix Fisher.
#[derive(Debug, Clone)]
pub struct AngleTable {
    top: f64,
    cdf: Vec<f64>,
}

impl AngleTable {
    pub fn new(kappa: f64) -> Self {
        let (top, w) = angle_weights(kappa, CDF_POINTS);
        let mut cdf = Vec::with_capacity(w.len());
        let mut acc = 0.0;
        cdf.push(0.0);
        for pair in w.windows(2) {
            acc += 0.5 * (pair[0] + pair[1]);
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        Self { top, cdf }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let i = self.cdf.partition_point(|c| *c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        let h = self.top / (self.cdf.len() - 1) as f64;
        ((i - 1) as f64 + t) * h
    }
}

fn uniform_direction<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let rho = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(rho * phi.cos(), rho * phi.sin(), z)
}

/// Some unit vector orthogonal to `a`.
fn perpendicular(a: &Vector3<f64>) -> Vector3<f64> {
    let e = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    a.cross(&e).normalize()
}

/// Density `exp(κ(c1·a − 1))/Z`, uniform along the fiber of rotations about
/// the first column. `Z = (1 − e^{−2κ})/(2κ)` is the Haar average.
#[derive(Debug, Clone)]
pub struct ConeDensity {
    pub axis: Vector3<f64>,
    pub kappa: f64,
    log_norm: f64,
}

impl ConeDensity {
    pub fn new(axis: Vector3<f64>, kappa: f64) -> Self {
        let log_norm = (-(-2.0 * kappa).exp_m1()).ln() - (2.0 * kappa).ln();
        Self {
            axis: axis.normalize(),
            kappa,
            log_norm,
        }
    }

    pub fn log_prob(&self, r: &Rotation) -> f64 {
        self.kappa * (r.column(0).dot(&self.axis) - 1.0) - self.log_norm
    }

    /// A rotation at the density maximum.
    pub fn mode(&self) -> Rotation {
        Rotation::from_two_columns(self.axis, perpendicular(&self.axis))
    }

    /// `c1` from the von Mises–Fisher law on S², then a uniform fiber angle.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Rotation {
        let u: f64 = rng.random();
        let k = self.kappa;
        let w = (1.0 + (u + (1.0 - u) * (-2.0 * k).exp()).ln() / k).clamp(-1.0, 1.0);
        let phi: f64 = rng.random_range(0.0..2.0 * PI);
        let e1 = perpendicular(&self.axis);
        let e2 = self.axis.cross(&e1);
        let s = (1.0 - w * w).max(0.0).sqrt();
        let c1 = (self.axis * w + (e1 * phi.cos() + e2 * phi.sin()) * s).normalize();
        let v = perpendicular(&c1);
        let psi: f64 = rng.random_range(0.0..2.0 * PI);
        let c2 = v * psi.cos() + c1.cross(&v) * psi.sin();
        Rotation::from_two_columns(c1, c2)
    }
}

#[derive(Debug, Clone)]
pub enum Component {
    Fisher(MatrixFisher),
    Cone(ConeDensity),
}

impl Component {
    pub fn log_prob(&self, r: &Rotation) -> Result<f64> {
        match self {
            Component::Fisher(f) => f.log_prob(r),
            Component::Cone(c) => Ok(c.log_prob(r)),
        }
    }

    fn mode(&self) -> Option<Rotation> {
        match self {
            Component::Fisher(f) => f.mode(),
            Component::Cone(c) => Some(c.mode()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Peak,
    Cube24,
    ConeCyclic,
    Line3,
}

impl TargetKind {
    pub fn name(&self) -> &'static str {
        match self {
            TargetKind::Peak => "peak",
            TargetKind::Cube24 => "cube24",
            TargetKind::ConeCyclic => "cone-cyclic",
            TargetKind::Line3 => "line3",
        }
    }
}

/// Mixture target. Weights sum to one.
#[derive(Debug, Clone)]
pub struct TargetSpec {
    pub kind: TargetKind,
    pub kappa: f64,
    pub mode: Rotation,
    components: Vec<(f64, Component)>,
    log_weights: Vec<f64>,
}

/// The 24 rotations of the chiral octahedral group: signed permutation
/// matrices with determinant +1.
pub fn octahedral_group() -> Vec<Rotation> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for p in PERMS {
        for signs in 0..8u32 {
            let mut m = Matrix3::zeros();
            for (row, &col) in p.iter().enumerate() {
                m[(row, col)] = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(Rotation::from_matrix_unchecked(m));
            }
        }
    }
    out
}

impl TargetSpec {
    pub fn new(kind: TargetKind, kappa: f64, mode: Rotation) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidArgument(format!("concentration must be positive, got {kappa}")));
        }
        let components: Vec<Component> = match kind {
            TargetKind::Peak => vec![Component::Fisher(MatrixFisher::isotropic(kappa, mode))],
            TargetKind::Cube24 => octahedral_group()
                .into_iter()
                .map(|g| Component::Fisher(MatrixFisher::isotropic(kappa, mode.compose(&g))))
                .collect(),
            TargetKind::ConeCyclic => vec![Component::Cone(ConeDensity::new(mode.column(0), kappa))],
            TargetKind::Line3 => (0..3)
                .map(|i| Component::Cone(ConeDensity::new(mode.column(i), kappa)))
                .collect(),
        };
        Ok(Self::mixture(kind, kappa, mode, components))
    }

    /// Equal-weight mixture of the given components.
    pub fn mixture(kind: TargetKind, kappa: f64, mode: Rotation, components: Vec<Component>) -> Self {
        let w = 1.0 / components.len() as f64;
        let components: Vec<(f64, Component)> = components.into_iter().map(|c| (w, c)).collect();
        let log_weights = components.iter().map(|(w, _)| w.ln()).collect();
        Self {
            kind,
            kappa,
            mode,
            components,
            log_weights,
        }
    }

    pub fn components(&self) -> &[(f64, Component)] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|(w, _)| *w).collect()
    }

    pub fn log_prob(&self, r: &Rotation) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.components.len());
        for ((_, c), lw) in self.components.iter().zip(&self.log_weights) {
            terms.push(lw + c.log_prob(r)?);
        }
        Ok(log_sum_exp(&terms))
    }

    /// Log-density at every grid point, in grid order.
    pub fn log_prob_grid(&self, grid: &SO3Grid) -> Result<Vec<f64>> {
        grid.points().par_iter().map(|r| self.log_prob(r)).collect()
    }

    /// True when every component has a closed-form sampler.
    pub fn has_exact_sampler(&self) -> bool {
        self.components.iter().all(|(_, c)| match c {
            Component::Fisher(f) => f.isotropic.is_some(),
            Component::Cone(_) => true,
        })
    }
}

/// Builds one of the four synthetic targets. `mode` is `R₀`.
pub fn make_target(kind: TargetKind, kappa: f64, mode: Rotation) -> Result<TargetSpec> {
    TargetSpec::new(kind, kappa, mode)
}

pub fn target_log_prob(t: &TargetSpec, r: &Rotation) -> Result<f64> {
    t.log_prob(r)
}

/// `−E[log p]` by grid quadrature: `−avg(p log p) / avg(p)`.
pub fn target_entropy(t: &TargetSpec, grid: &SO3Grid) -> Result<f64> {
    Ok(entropy_from_log_probs(&t.log_prob_grid(grid)?))
}

/// Entropy of a density given its log-values on an equal-weight grid.
pub fn entropy_from_log_probs(lp: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &l in lp {
        let p = l.exp();
        if p > 0.0 {
            num += p * l;
            den += p;
        }
    }
    -num / den
}

#[derive(Debug, Clone)]
enum Strategy {
    Rejection { log_envelope: f64 },
    Exact { tables: Vec<Option<AngleTable>> },
    Grid { cdf: Vec<f64>, jitter: f64 },
}

/// Draws rotations from a target. Construction estimates the density
/// maximum on `grid`; the strategy is then fixed, so a seed determines the
/// output.
#[derive(Debug, Clone)]
pub struct TargetSampler<'a> {
    target: &'a TargetSpec,
    grid: &'a SO3Grid,
    strategy: Strategy,
}

impl<'a> TargetSampler<'a> {
    pub fn new(target: &'a TargetSpec, grid: &'a SO3Grid) -> Result<Self> {
        let lp = target.log_prob_grid(grid)?;
        let mut log_max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (_, c) in target.components() {
            if let Some(m) = c.mode() {
                log_max = log_max.max(target.log_prob(&m)?);
            }
        }
        let log_envelope = log_max + ENVELOPE_FACTOR.ln();
        // Uniform proposals are accepted with probability 1/M.
        let strategy = if -log_envelope >= MIN_ACCEPTANCE.ln() {
            Strategy::Rejection { log_envelope }
        } else if target.has_exact_sampler() {
            let tables = target
                .components()
                .iter()
                .map(|(_, c)| match c {
                    Component::Fisher(f) => f.isotropic.map(|(k, _)| AngleTable::new(k)),
                    Component::Cone(_) => None,
                })
                .collect();
            Strategy::Exact { tables }
        } else {
            let m = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut acc = 0.0;
            let cdf = lp
                .iter()
                .map(|l| {
                    acc += (l - m).exp();
                    acc
                })
                .collect();
            Strategy::Grid {
                cdf,
                jitter: 0.5 * grid.spacing(),
            }
        };
        Ok(Self { target, grid, strategy })
    }

    pub fn is_rejection(&self) -> bool {
        matches!(self.strategy, Strategy::Rejection { .. })
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Rotation>> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(n);
        match &self.strategy {
            Strategy::Rejection { log_envelope } => {
                while out.len() < n {
                    let r = sample_uniform(rng);
                    let u: f64 = rng.random();
                    if u.ln() + log_envelope < self.target.log_prob(&r)? {
                        out.push(r);
                    }
                }
            }
            Strategy::Exact { tables } => {
                let comps = self.target.components();
                for _ in 0..n {
                    let i = pick(&self.target.weights(), rng);
                    let r = match &comps[i].1 {
                        Component::Fisher(f) => f
                            .sample_exact(tables[i].as_ref().expect("table built for fisher"), rng)
                            .expect("isotropic component"),
                        Component::Cone(c) => c.sample(rng),
                    };
                    out.push(r);
                }
            }
            Strategy::Grid { cdf, jitter } => {
                let total = *cdf.last().expect("grid is nonempty");
                for _ in 0..n {
                    let u = rng.random::<f64>() * total;
                    let i = cdf.partition_point(|c| *c < u).min(cdf.len() - 1);
                    let eps = Vector3::new(
                        rng.sample::<f64, _>(rand_distr::StandardNormal),
                        rng.sample::<f64, _>(rand_distr::StandardNormal),
                        rng.sample::<f64, _>(rand_distr::StandardNormal),
                    ) * *jitter;
                    out.push(self.grid.points()[i].compose(&Rotation::exp(&eps)));
                }
            }
        }
        Ok(out)
    }
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let mut u: f64 = rng.random();
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Convenience wrapper around [`TargetSampler`].
pub fn target_sample<R: Rng + ?Sized>(t: &TargetSpec, grid: &SO3Grid, n: usize, rng: &mut R) -> Result<Vec<Rotation>> {
    TargetSampler::new(t, grid)?.sample(n, rng)
}

/// Target description as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub kind: TargetKind,
    pub kappa: f64,
    /// Mode rotation `R₀` as a quaternion `[w, x, y, z]`.
    #[serde(default = "identity_quat")]
    pub mode: [f64; 4],
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl TargetConfig {
    pub fn build(&self) -> Result<TargetSpec> {
        let [w, x, y, z] = self.mode;
        let q = UnitQuaternion::normalize(nalgebra::Vector4::new(w, x, y, z))?;
        make_target(self.kind, self.kappa, q.to_rotation())
    }
}
