//! Flow bijections: the Mobius coupling on rotation-matrix columns and the
//! quaternion affine transformation.
//!
//! Each layer's `forward` is the data→base direction used for density
//! evaluation; `inverse` runs base→data for sampling.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix4, Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::so3::{Rotation, UnitQuaternion};
use crate::tensor::Tensor;

/// Radius bound applied to every ω after reparameterization; strictly
/// inside √2/2 so each component angle stays in (−π/2, π/2).
pub const OMEGA_RADIUS: f64 = 0.7;

/// Smallest |det W| accepted by the affine layer.
pub const MIN_ABS_DET: f64 = 1e-8;

/// Default bisection tolerance for the coupling inverse, in radians.
pub const DEFAULT_INVERSE_TOL: f64 = 1e-7;

/// Mobius map of the unit sphere, `(1−‖ω‖²)/‖c−ω‖²·(c−ω) − ω`.
pub fn mobius_point(c: &Vector3<f64>, omega: &Vector3<f64>) -> Result<Vector3<f64>> {
    let d = c - omega;
    let dn = d.norm();
    if dn < 1e-10 {
        return Err(Error::DegenerateInput {
            op: "mobius_point",
            norm: dn,
        });
    }
    let a = (1.0 - omega.norm_squared()) / (dn * dn);
    Ok(d * a - omega)
}

/// Closed-form differential of [`mobius_point`] in `c`:
/// `a·(I − 2ddᵀ/‖d‖²)` with `d = c − ω`, `a = (1−‖ω‖²)/‖d‖²`.
pub fn mobius_jacobian(c: &Vector3<f64>, omega: &Vector3<f64>) -> nalgebra::Matrix3<f64> {
    let d = c - omega;
    let dd = d.norm_squared();
    let a = (1.0 - omega.norm_squared()) / dd;
    (nalgebra::Matrix3::identity() - d * d.transpose() * (2.0 / dd)) * a
}

/// Signed angle of `v` in the orthonormal frame `(e_a, e_b)`, in (−π, π].
pub fn signed_fiber_angle(v: &Vector3<f64>, e_a: &Vector3<f64>, e_b: &Vector3<f64>) -> Result<f64> {
    let (x, y) = (v.dot(e_a), v.dot(e_b));
    let off = (v - e_a * x - e_b * y).norm();
    if off > 1e-8 {
        return Err(Error::OutOfSpan(off));
    }
    Ok(y.atan2(x))
}

/// Projects a raw network output orthogonal to `c1` and squashes it into
/// the open ball of radius [`OMEGA_RADIUS`].
pub fn reparameterize_omega(raw: &Vector3<f64>, c1: &Vector3<f64>) -> Vector3<f64> {
    let p = raw - c1 * raw.dot(c1);
    p * (OMEGA_RADIUS / (1.0 + p.norm()))
}

/// Per-rotation output of the coupling conditioner: `K` reparameterized
/// centres and their mixing weights.
#[derive(Debug, Clone)]
pub struct Components {
    pub omegas: Vec<Vector3<f64>>,
    pub alphas: Vec<f64>,
}

impl Components {
    /// Combined fiber rotation `θ′ = Σ αₖθₖ` of the column `c2` (with
    /// `c3 = c1 × c2`) and its derivative `dθ′/dθ = Σ αₖ aₖ`.
    pub fn fiber_step(&self, c2: &Vector3<f64>, c3: &Vector3<f64>) -> Result<(f64, f64)> {
        let mut theta = 0.0;
        let mut deriv = 0.0;
        let mut total = 0.0;
        for (w, alpha) in self.omegas.iter().zip(&self.alphas) {
            let d = c2 - w;
            // ‖c − ω‖² expanded with ‖c‖ = 1, so ω = 0 gives exactly 1.
            let ww = w.norm_squared();
            let dd = 1.0 - 2.0 * c2.dot(w) + ww;
            if dd < 1e-20 {
                return Err(Error::DegenerateInput {
                    op: "mobius_point",
                    norm: dd.sqrt(),
                });
            }
            let a = (1.0 - ww) / dd;
            let cp = d * a - w;
            theta += alpha * cp.dot(c3).atan2(cp.dot(c2));
            deriv += alpha * a;
            total += alpha;
        }
        // Dividing by Σα (= 1 up to rounding) keeps the identity exact.
        Ok((theta, deriv / total))
    }

    /// Individual component angles `θₖ` for `c2` in the frame `(c2, c3)`.
    pub fn component_angles(&self, c2: &Vector3<f64>, c3: &Vector3<f64>) -> Result<Vec<f64>> {
        self.omegas
            .iter()
            .map(|w| {
                let cp = mobius_point(c2, w)?;
                Ok(cp.dot(c3).atan2(cp.dot(c2)))
            })
            .collect()
    }
}

/// Mobius coupling: keeps the conditioner column, moves the next one along
/// the circle orthogonal to it by a convex combination of `K` Mobius maps,
/// and completes the frame with a cross product.
///
/// With conditioner column `j` the layer sees the cyclically shifted frame
/// `(c_j, c_{j+1}, c_{j+2})` as `(c1, c2, c3)`. The shift is a fixed
/// right-multiplication by a permutation rotation, so it adds no log-det.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobiusCouplingLayer {
    k: usize,
    cond_dim: usize,
    #[serde(default)]
    column: usize,
    omega_net: Mlp,
    weight_net: Mlp,
}

/// Outcome of inverting one rotation through a coupling layer.
#[derive(Debug, Clone)]
pub struct CouplingInverse {
    pub rotation: Rotation,
    /// Forward log-det evaluated at the recovered rotation.
    pub log_det: f64,
    pub iterations: usize,
}

impl MobiusCouplingLayer {
    /// Zero-initialized output layers: the layer starts as the identity.
    pub fn new<R: Rng + ?Sized>(k: usize, hidden: &[usize], cond_dim: usize, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("coupling needs at least one component".into()));
        }
        let input = 3 + cond_dim;
        Ok(Self {
            k,
            cond_dim,
            column: 0,
            omega_net: Mlp::new(input, hidden, 3 * k, rng)?,
            weight_net: Mlp::new(input, hidden, k, rng)?,
        })
    }

    /// Gives both conditioner networks random output layers.
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.omega_net.randomize_output(rng);
        self.weight_net.randomize_output(rng);
    }

    /// Uses column `column` (0-based, taken mod 3) as the conditioner.
    pub fn with_column(mut self, column: usize) -> Self {
        self.column = column % 3;
        self
    }

    pub fn column(&self) -> usize {
        self.column
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.omega_net.params();
        p.extend(self.weight_net.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.omega_net.params_mut();
        p.extend(self.weight_net.params_mut());
        p
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut n = self.omega_net.param_names(&format!("{prefix}.omega_net"));
        n.extend(self.weight_net.param_names(&format!("{prefix}.weight_net")));
        n
    }

    fn net_input(&self, c1: &[Vector3<f64>], cond: Option<&Tensor>) -> Result<Tensor> {
        let b = c1.len();
        let d = self.cond_dim;
        if let Some(c) = cond {
            if c.cols() != d {
                return Err(Error::ConditionMismatch {
                    expected: d,
                    got: c.cols(),
                });
            }
            if c.rows() != b && c.rows() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "{} condition rows for {b} rotations",
                    c.rows()
                )));
            }
        } else if d > 0 {
            return Err(Error::ConditionMismatch { expected: d, got: 0 });
        }
        let mut x = Tensor::zeros(b, 3 + d);
        for (r, v) in c1.iter().enumerate() {
            let row = x.row_mut(r);
            row[..3].copy_from_slice(v.as_slice());
            if let Some(c) = cond {
                row[3..].copy_from_slice(c.row(if c.rows() == 1 { 0 } else { r }));
            }
        }
        Ok(x)
    }

    /// Conditioner outputs for a batch of fixed columns.
    pub fn components(&self, c1: &[Vector3<f64>], cond: Option<&Tensor>) -> Result<Vec<Components>> {
        let x = self.net_input(c1, cond)?;
        let raw = self.omega_net.forward(&x);
        let logits = self.weight_net.forward(&x);
        Ok(c1
            .iter()
            .enumerate()
            .map(|(r, c)| {
                let rr = raw.row(r);
                let omegas = (0..self.k)
                    .map(|j| reparameterize_omega(&Vector3::new(rr[3 * j], rr[3 * j + 1], rr[3 * j + 2]), c))
                    .collect();
                let lr = logits.row(r);
                let max = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = lr.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = e.iter().sum();
                Components {
                    omegas,
                    alphas: e.iter().map(|v| v / total).collect(),
                }
            })
            .collect())
    }

    /// Data→base map of one rotation with its log-det.
    pub fn forward(&self, r: &Rotation, cond: Option<&[f64]>) -> Result<(Rotation, f64)> {
        let cond = cond.map(|c| Tensor::from_vec(1, c.len(), c.to_vec()));
        let out = self.forward_batch(std::slice::from_ref(r), cond.as_ref())?;
        Ok(out.into_iter().next().expect("one output per input"))
    }

    pub fn forward_batch(&self, rs: &[Rotation], cond: Option<&Tensor>) -> Result<Vec<(Rotation, f64)>> {
        let rs: Vec<Rotation> = rs.iter().map(|r| shift_columns(r, self.column)).collect();
        let c1: Vec<_> = rs.iter().map(|r| r.column(0)).collect();
        let comps = self.components(&c1, cond)?;
        rs.iter()
            .zip(comps)
            .map(|(r, comp)| {
                let (c1, c2, c3) = (r.column(0), r.column(1), r.column(2));
                let (theta, deriv) = comp.fiber_step(&c2, &c3)?;
                let c2p = c2 * theta.cos() + c3 * theta.sin();
                let out = Rotation::from_two_columns(c1, c2p);
                Ok((shift_columns(&out, 3 - self.column), deriv.ln()))
            })
            .collect()
    }

    /// Base→data map by bisection on the fiber angle.
    pub fn inverse_batch(&self, rs: &[Rotation], cond: Option<&Tensor>, tol: f64) -> Result<Vec<CouplingInverse>> {
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument(format!("bisection tolerance {tol} must be positive")));
        }
        let rs: Vec<Rotation> = rs.iter().map(|r| shift_columns(r, self.column)).collect();
        let c1: Vec<_> = rs.iter().map(|r| r.column(0)).collect();
        let comps = self.components(&c1, cond)?;
        rs.iter()
            .zip(comps)
            .map(|(r, comp)| {
                let mut inv = invert_fiber(&comp, &r.column(0), &r.column(1), tol)?;
                inv.rotation = shift_columns(&inv.rotation, 3 - self.column);
                Ok(inv)
            })
            .collect()
    }

    pub fn inverse(&self, r: &Rotation, cond: Option<&[f64]>, tol: f64) -> Result<CouplingInverse> {
        let cond = cond.map(|c| Tensor::from_vec(1, c.len(), c.to_vec()));
        let out = self.inverse_batch(std::slice::from_ref(r), cond.as_ref(), tol)?;
        Ok(out.into_iter().next().expect("one output per input"))
    }

    /// Records the data→base map for a batch of column-major rotations
    /// (`b×9`). Returns the transformed rotations and the per-row log-det
    /// (`b×1`). `params` follow [`MobiusCouplingLayer::params`].
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], x: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let k = self.k;
        let b = tape.value(x).rows();
        let (np, _) = params.split_at(self.omega_net.params().len());
        let wp = &params[np.len()..];
        let j = self.column;
        let c1 = tape.slice_cols(x, 3 * j, 3);
        let c2 = tape.slice_cols(x, 3 * ((j + 1) % 3), 3);
        let c3 = tape.slice_cols(x, 3 * ((j + 2) % 3), 3);
        let input = match cond {
            Some(c) => {
                let got = tape.value(c).cols();
                if got != self.cond_dim {
                    return Err(Error::ConditionMismatch {
                        expected: self.cond_dim,
                        got,
                    });
                }
                tape.concat_cols(&[c1, c])
            }
            None if self.cond_dim > 0 => {
                return Err(Error::ConditionMismatch {
                    expected: self.cond_dim,
                    got: 0,
                })
            }
            None => c1,
        };
        let raw = self.omega_net.forward_tape(tape, np, input);
        let logits = self.weight_net.forward_tape(tape, wp, input);

        // ω = 0.7·p/(1+‖p‖) with p the component of the raw output ⊥ c1.
        let c1t = tape.tile(c1, k);
        let along = tape.mul(raw, c1t);
        let along = tape.group_sum(along, 3);
        let along = tape.repeat_each(along, 3);
        let along = tape.mul(along, c1t);
        let p = tape.sub(raw, along);
        let pn = tape.group_norm(p, 3);
        let denom = tape.add_scalar(pn, 1.0);
        let radius = tape.constant(Tensor::full(b, k, OMEGA_RADIUS));
        let factor = tape.div(radius, denom);
        let factor = tape.repeat_each(factor, 3);
        let omega = tape.mul(p, factor);

        // Component maps of c2 and their angles in the (c2, c3) frame.
        let c2t = tape.tile(c2, k);
        let c3t = tape.tile(c3, k);
        let d = tape.sub(c2t, omega);
        let wsq = tape.square(omega);
        let ww = tape.group_sum(wsq, 3);
        let cw = tape.mul(c2t, omega);
        let cw = tape.group_sum(cw, 3);
        let cw = tape.scale(cw, -2.0);
        let dd = tape.add(cw, ww);
        let dd = tape.add_scalar(dd, 1.0);
        let num = tape.neg(ww);
        let num = tape.add_scalar(num, 1.0);
        let a = tape.div(num, dd);
        let ar = tape.repeat_each(a, 3);
        let cp = tape.mul(ar, d);
        let cp = tape.sub(cp, omega);
        let ys = tape.mul(cp, c3t);
        let ys = tape.group_sum(ys, 3);
        let xs = tape.mul(cp, c2t);
        let xs = tape.group_sum(xs, 3);
        let theta = tape.atan2(ys, xs);

        let alpha = tape.softmax(logits);
        let wt = tape.mul(alpha, theta);
        let theta_p = tape.sum_cols(wt);
        let cos = tape.cos(theta_p);
        let sin = tape.sin(theta_p);
        let cos = tape.repeat_each(cos, 3);
        let sin = tape.repeat_each(sin, 3);
        let c2c = tape.mul(cos, c2);
        let c3s = tape.mul(sin, c3);
        let c2p = tape.add(c2c, c3s);
        let c3p = tape.cross3(c1, c2p);
        let mut cols = [c1, c2p, c3p];
        cols.rotate_right(j);
        let out = tape.concat_cols(&cols);

        let wa = tape.mul(alpha, a);
        let deriv = tape.sum_cols(wa);
        let total = tape.sum_cols(alpha);
        let deriv = tape.div(deriv, total);
        let log_det = tape.ln(deriv);
        Ok((out, log_det))
    }
}

/// Frame `(c_s, c_{s+1}, c_{s+2})` (indices mod 3); `shift_columns(_, 3 − s)`
/// undoes it. Pure data movement, so exact.
fn shift_columns(r: &Rotation, s: usize) -> Rotation {
    let s = s % 3;
    if s == 0 {
        return *r;
    }
    let cols = [r.column(s), r.column((s + 1) % 3), r.column((s + 2) % 3)];
    Rotation::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&cols))
}

/// Solves `θ′(φ) = target` for the pre-image of `c2p` on its fiber circle.
///
/// The unknown is the offset `t` of the pre-image from `c2p`; since every
/// `|θ′| < π/2`, `g(t) = θ′(c2p rotated by −t) − t` is strictly decreasing
/// with a root in (−π/2, π/2).
fn invert_fiber(comp: &Components, c1: &Vector3<f64>, c2p: &Vector3<f64>, tol: f64) -> Result<CouplingInverse> {
    let c3p = c1.cross(c2p);
    let column = |t: f64| c2p * t.cos() - c3p * t.sin();
    let g = |t: f64| -> Result<f64> {
        let c2 = column(t);
        let (theta, _) = comp.fiber_step(&c2, &c1.cross(&c2))?;
        Ok(theta - t)
    };
    let (mut lo, mut hi) = (-FRAC_PI_2, FRAC_PI_2);
    let (g_lo, g_hi) = (g(lo)?, g(hi)?);
    if !(g_lo > 0.0 && g_hi < 0.0) {
        return Err(Error::NotBracketed(g_lo.max(-g_hi)));
    }
    let mut iterations = 0;
    while hi - lo >= tol {
        let mid = 0.5 * (lo + hi);
        if g(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    let c2 = column(0.5 * (lo + hi));
    let c3 = c1.cross(&c2);
    let (_, deriv) = comp.fiber_step(&c2, &c3)?;
    Ok(CouplingInverse {
        rotation: Rotation::from_two_columns(*c1, c2),
        log_det: deriv.ln(),
        iterations,
    })
}

/// `W = P·L·(U + S)` from unit-lower `L`, strictly-upper `U`, diagonal `s`
/// and permutation `perm` (`(Px)ᵢ = x_{perm[i]}`). Returns `W` and
/// `log|det W| = Σ log|sᵢ|`.
pub fn lu_compose(l: &Matrix4<f64>, u: &Matrix4<f64>, s: &[f64; 4], perm: &[usize; 4]) -> Result<(Matrix4<f64>, f64)> {
    if let Some(index) = s.iter().position(|v| *v == 0.0) {
        return Err(Error::ZeroDiagonal { index });
    }
    let mut lower = Matrix4::identity();
    let mut upper = Matrix4::from_diagonal(&Vector4::from_column_slice(s));
    for i in 0..4 {
        for j in 0..4 {
            if i > j {
                lower[(i, j)] = l[(i, j)];
            } else if i < j {
                upper[(i, j)] = u[(i, j)];
            }
        }
    }
    let p = permutation_matrix(perm);
    let log_abs_det = s.iter().map(|v| v.abs().ln()).sum();
    Ok((p * lower * upper, log_abs_det))
}

fn permutation_matrix(perm: &[usize; 4]) -> Matrix4<f64> {
    let mut p = Matrix4::zeros();
    for (i, &j) in perm.iter().enumerate() {
        p[(i, j)] = 1.0;
    }
    p
}

/// Parameterization of the 4×4 matrix of a [`QuaternionAffineLayer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AffineParam {
    /// Free matrix, row-major `1×16`.
    Unconstrained { w: Tensor },
    /// `P·L·(U+S)`; only the strict lower/upper parts of `lower`/`upper`
    /// are used and `sᵢ = signᵢ·exp(log_sᵢ)`.
    Lu {
        lower: Tensor,
        upper: Tensor,
        log_s: Tensor,
        sign: [f64; 4],
        perm: [usize; 4],
    },
    /// Matrix produced per condition vector by an MLP.
    Conditional { net: Mlp },
}

/// Which [`AffineParam`] a freshly built layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffineKind {
    Unconstrained,
    Lu,
}

/// `q ↦ Wq/‖Wq‖` on unit quaternions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuaternionAffineLayer {
    param: AffineParam,
}

const IDENTITY16: [f64; 16] = [
    1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
];

impl QuaternionAffineLayer {
    pub fn identity(kind: AffineKind) -> Self {
        let param = match kind {
            AffineKind::Unconstrained => AffineParam::Unconstrained {
                w: Tensor::from_vec(1, 16, IDENTITY16.to_vec()),
            },
            AffineKind::Lu => AffineParam::Lu {
                lower: Tensor::zeros(1, 16),
                upper: Tensor::zeros(1, 16),
                log_s: Tensor::zeros(1, 4),
                sign: [1.0; 4],
                perm: [0, 1, 2, 3],
            },
        };
        Self { param }
    }

    /// Conditional layer whose network initially outputs the identity.
    pub fn conditional<R: Rng + ?Sized>(cond_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if cond_dim == 0 {
            return Err(Error::InvalidArgument("conditional affine needs cond_dim > 0".into()));
        }
        let mut net = Mlp::new(cond_dim, hidden, 16, rng)?;
        net.output_bias_mut().data_mut().copy_from_slice(&IDENTITY16);
        Ok(Self {
            param: AffineParam::Conditional { net },
        })
    }

    pub fn from_matrix(w: &Matrix4<f64>) -> Self {
        let mut data = Vec::with_capacity(16);
        for i in 0..4 {
            for j in 0..4 {
                data.push(w[(i, j)]);
            }
        }
        Self {
            param: AffineParam::Unconstrained {
                w: Tensor::from_vec(1, 16, data),
            },
        }
    }

    pub fn from_lu(lower: &Matrix4<f64>, upper: &Matrix4<f64>, s: &[f64; 4], perm: [usize; 4]) -> Result<Self> {
        if let Some(index) = s.iter().position(|v| *v == 0.0) {
            return Err(Error::ZeroDiagonal { index });
        }
        let flat = |m: &Matrix4<f64>| Tensor::from_vec(1, 16, (0..16).map(|i| m[(i / 4, i % 4)]).collect());
        Ok(Self {
            param: AffineParam::Lu {
                lower: flat(lower),
                upper: flat(upper),
                log_s: Tensor::from_vec(1, 4, s.iter().map(|v| v.abs().ln()).collect()),
                sign: s.map(f64::signum),
                perm,
            },
        })
    }

    /// Random perturbation of the identity, for tests and audits.
    pub fn randomize<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        let mut jitter = |t: &mut Tensor| {
            for v in t.data_mut() {
                *v += scale * rng.random_range(-1.0..1.0);
            }
        };
        match &mut self.param {
            AffineParam::Unconstrained { w } => jitter(w),
            AffineParam::Lu {
                lower, upper, log_s, ..
            } => {
                jitter(lower);
                jitter(upper);
                jitter(log_s);
            }
            AffineParam::Conditional { net } => {
                for p in net.params_mut().into_iter().rev().take(2) {
                    jitter(p);
                }
            }
        }
    }

    pub fn param(&self) -> &AffineParam {
        &self.param
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self.param, AffineParam::Conditional { .. })
    }

    pub fn cond_dim(&self) -> usize {
        match &self.param {
            AffineParam::Conditional { net } => net.input_dim(),
            _ => 0,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match &self.param {
            AffineParam::Unconstrained { w } => vec![w],
            AffineParam::Lu {
                lower, upper, log_s, ..
            } => vec![lower, upper, log_s],
            AffineParam::Conditional { net } => net.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.param {
            AffineParam::Unconstrained { w } => vec![w],
            AffineParam::Lu {
                lower, upper, log_s, ..
            } => vec![lower, upper, log_s],
            AffineParam::Conditional { net } => net.params_mut(),
        }
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        match &self.param {
            AffineParam::Unconstrained { .. } => vec![format!("{prefix}.w")],
            AffineParam::Lu { .. } => vec![
                format!("{prefix}.lower"),
                format!("{prefix}.upper"),
                format!("{prefix}.log_s"),
            ],
            AffineParam::Conditional { net } => net.param_names(&format!("{prefix}.affine_net")),
        }
    }

    /// `W` and `log|det W|` for each condition row (one entry when the
    /// layer is unconditional).
    pub fn matrices(&self, cond: Option<&Tensor>) -> Result<Vec<(Matrix4<f64>, f64)>> {
        let out = match &self.param {
            AffineParam::Unconstrained { w } => {
                let m = Matrix4::from_row_slice(w.data());
                vec![(m, m.determinant().abs().ln())]
            }
            AffineParam::Lu {
                lower,
                upper,
                log_s,
                sign,
                perm,
            } => {
                let s: [f64; 4] = std::array::from_fn(|i| sign[i] * log_s.data()[i].exp());
                vec![lu_compose(
                    &Matrix4::from_row_slice(lower.data()),
                    &Matrix4::from_row_slice(upper.data()),
                    &s,
                    perm,
                )?]
            }
            AffineParam::Conditional { net } => {
                let c = cond.ok_or(Error::ConditionMismatch {
                    expected: net.input_dim(),
                    got: 0,
                })?;
                if c.cols() != net.input_dim() {
                    return Err(Error::ConditionMismatch {
                        expected: net.input_dim(),
                        got: c.cols(),
                    });
                }
                let y = net.forward(c);
                (0..y.rows())
                    .map(|r| {
                        let m = Matrix4::from_row_slice(y.row(r));
                        (m, m.determinant().abs().ln())
                    })
                    .collect()
            }
        };
        for (_, ld) in &out {
            if !(*ld > MIN_ABS_DET.ln()) {
                return Err(Error::NearSingular(ld.exp()));
            }
        }
        Ok(out)
    }

    fn single_matrix(&self, cond: Option<&[f64]>) -> Result<(Matrix4<f64>, f64)> {
        let cond = cond.map(|c| Tensor::from_vec(1, c.len(), c.to_vec()));
        Ok(self.matrices(cond.as_ref())?.remove(0))
    }

    /// Data→base map `q′ = Wq/‖Wq‖` with log-det `log|det W| − 4·log‖Wq‖`.
    pub fn forward(&self, q: &UnitQuaternion, cond: Option<&[f64]>) -> Result<(UnitQuaternion, f64)> {
        let (w, ld) = self.single_matrix(cond)?;
        Ok(affine_apply(&w, ld, q.as_vector()))
    }

    /// Base→data map `W⁻¹q′/‖W⁻¹q′‖`.
    pub fn inverse(&self, q: &UnitQuaternion, cond: Option<&[f64]>) -> Result<UnitQuaternion> {
        let (w, _) = self.single_matrix(cond)?;
        let inv = w.try_inverse().ok_or(Error::NearSingular(0.0))?;
        Ok(affine_inverse_apply(&inv, q.as_vector()).0)
    }

    /// Inverse for a batch; also returns the forward log-det at each result.
    pub fn inverse_batch(&self, qs: &[Vector4<f64>], cond: Option<&Tensor>) -> Result<Vec<(Vector4<f64>, f64)>> {
        let mats = self.matrices(cond)?;
        let invs: Vec<(Matrix4<f64>, f64)> = mats
            .iter()
            .map(|(w, ld)| w.try_inverse().map(|i| (i, *ld)).ok_or(Error::NearSingular(0.0)))
            .collect::<Result<_>>()?;
        if invs.len() != 1 && invs.len() != qs.len() {
            return Err(Error::InvalidArgument(format!("{} condition rows for {} quaternions", invs.len(), qs.len())));
        }
        Ok(qs
            .iter()
            .enumerate()
            .map(|(r, q)| {
                let (inv, ld) = &invs[if invs.len() == 1 { 0 } else { r }];
                let (p, n) = affine_inverse_apply(inv, q);
                // ‖W p‖ = 1/‖W⁻¹q′‖ at the pre-image.
                (*p.as_vector(), ld + 4.0 * (n / q.norm()).ln())
            })
            .collect())
    }

    /// Records the data→base map for a batch of quaternions (`b×4`).
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], q: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let b = tape.value(q).rows();
        let (y, log_abs_det) = match &self.param {
            AffineParam::Unconstrained { .. } => {
                let w = params[0];
                let ld = tape.log_abs_det4(w);
                (tape.matvec(w, q), tape.broadcast_rows(ld, b))
            }
            AffineParam::Lu { sign, perm, .. } => {
                let (lower, upper, log_s) = (params[0], params[1], params[2]);
                let mut mask_lo = vec![0.0; 16];
                let mut mask_up = vec![0.0; 16];
                let mut place = vec![0.0; 64];
                for i in 0..4 {
                    for j in 0..4 {
                        if i > j {
                            mask_lo[i * 4 + j] = 1.0;
                        } else if i < j {
                            mask_up[i * 4 + j] = 1.0;
                        }
                    }
                    place[i * 16 + i * 4 + i] = sign[i];
                }
                let mask_lo = tape.constant(Tensor::from_vec(1, 16, mask_lo));
                let mask_up = tape.constant(Tensor::from_vec(1, 16, mask_up));
                let place = tape.constant(Tensor::from_vec(4, 16, place));
                let eye = tape.constant(Tensor::from_vec(1, 16, IDENTITY16.to_vec()));
                let p = permutation_matrix(perm);
                let pm = tape.constant(Tensor::from_vec(1, 16, (0..16).map(|i| p[(i / 4, i % 4)]).collect()));
                let l = tape.mul(lower, mask_lo);
                let l = tape.add(l, eye);
                let u = tape.mul(upper, mask_up);
                let s = tape.exp(log_s);
                let s = tape.matmul(s, place);
                let us = tape.add(u, s);
                let y = tape.matvec(us, q);
                let y = tape.matvec(l, y);
                let y = tape.matvec(pm, y);
                let ld = tape.sum_all(log_s);
                (y, tape.broadcast_rows(ld, b))
            }
            AffineParam::Conditional { net } => {
                let c = cond.ok_or(Error::ConditionMismatch {
                    expected: net.input_dim(),
                    got: 0,
                })?;
                let got = tape.value(c).cols();
                if got != net.input_dim() {
                    return Err(Error::ConditionMismatch {
                        expected: net.input_dim(),
                        got,
                    });
                }
                let w = net.forward_tape(tape, params, c);
                let ld = tape.log_abs_det4(w);
                let ld = if tape.value(ld).rows() == 1 && b > 1 {
                    tape.broadcast_rows(ld, b)
                } else {
                    ld
                };
                (tape.matvec(w, q), ld)
            }
        };
        if let Some(bad) = tape.value(log_abs_det).data().iter().find(|v| !(**v > MIN_ABS_DET.ln())) {
            return Err(Error::NearSingular(bad.exp()));
        }
        // ‖Wq‖/‖q‖ rather than ‖Wq‖, so W = I gives exactly zero.
        let n = tape.group_norm(y, 4);
        let n0 = tape.group_norm(q, 4);
        let n = tape.div(n, n0);
        let out = tape.normalize(y, 4)?;
        let ln = tape.ln(n);
        let ln4 = tape.scale(ln, 4.0);
        let log_det = tape.sub(log_abs_det, ln4);
        Ok((out, log_det))
    }
}

fn affine_apply(w: &Matrix4<f64>, log_abs_det: f64, q: &Vector4<f64>) -> (UnitQuaternion, f64) {
    let y = w * q;
    let n = y.norm();
    (unit(y / n), log_abs_det - 4.0 * (n / q.norm()).ln())
}

/// Returns the normalized pre-image and `‖W⁻¹q′‖`.
fn affine_inverse_apply(inv: &Matrix4<f64>, q: &Vector4<f64>) -> (UnitQuaternion, f64) {
    let y = inv * q;
    let n = y.norm();
    (unit(y / n), n)
}

fn unit(v: Vector4<f64>) -> UnitQuaternion {
    UnitQuaternion::normalize(v).expect("image of a unit vector under an invertible map is nonzero")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::{geodesic_distance, matrix_to_quat, numerical_jacobian_det, quat_to_matrix, sample_uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(k: usize, cond_dim: usize, seed: u64) -> MobiusCouplingLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = MobiusCouplingLayer::new(k, &[32, 32, 32, 32], cond_dim, &mut rng).unwrap();
        layer.randomize(&mut rng);
        layer
    }

    fn random_ball<R: Rng>(rng: &mut R, radius: f64) -> Vector3<f64> {
        loop {
            let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if v.norm() < 1.0 {
                return v * radius;
            }
        }
    }

    #[test]
    fn mobius_point_identity_and_fixed_points() {
        let c = Vector3::new(0.0, 0.6, 0.8);
        assert_eq!(mobius_point(&c, &Vector3::zeros()).unwrap(), c);
        let w = Vector3::new(0.3, -0.2, 0.1);
        let u = w.normalize();
        assert!((mobius_point(&u, &w).unwrap() - u).norm() < 1e-14);
        assert!((mobius_point(&-u, &w).unwrap() + u).norm() < 1e-14);
    }

    #[test]
    fn mobius_point_matches_line_construction() {
        // Second intersection of the line through c and ω with the sphere,
        // found by root finding on |c + s(ω − c)|² = 1, then negated.
        let c = Vector3::new(0.0, 1.0, 0.0);
        let w = Vector3::new(0.3, 0.0, 0.0);
        let f = |s: f64| (c + (w - c) * s).norm_squared() - 1.0;
        let (mut lo, mut hi) = (1.0, 10.0);
        assert!(f(lo) < 0.0 && f(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let hit = c + (w - c) * lo;
        let out = mobius_point(&c, &w).unwrap();
        assert!((out.norm() - 1.0).abs() < 1e-12);
        assert!((out + hit).norm() < 1e-10, "{out:?} vs {:?}", -hit);
    }

    #[test]
    fn mobius_point_preserves_norm_and_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100_000 {
            let c = random_ball(&mut rng, 1.0).normalize();
            let w = random_ball(&mut rng, 0.7);
            let out = mobius_point(&c, &w).unwrap();
            assert!((out.norm() - 1.0).abs() < 1e-10);
        }
        for _ in 0..1000 {
            let r = sample_uniform(&mut rng);
            let w = reparameterize_omega(&random_ball(&mut rng, 5.0), &r.column(0));
            let out = mobius_point(&r.column(1), &w).unwrap();
            assert!(out.dot(&r.column(0)).abs() < 1e-10);
        }
    }

    #[test]
    fn mobius_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let c = random_ball(&mut rng, 1.0).normalize();
            let w = random_ball(&mut rng, 0.7);
            let j = mobius_jacobian(&c, &w);
            let h = 1e-6;
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                // Formula extended off the sphere; the closed form is its gradient.
                let f = |x: Vector3<f64>| {
                    let d = x - w;
                    d * ((1.0 - w.norm_squared()) / d.norm_squared()) - w
                };
                let fd = (f(c + e) - f(c - e)) / (2.0 * h);
                assert!((fd - j.column(k)).norm() < 1e-7);
            }
        }
    }

    #[test]
    fn signed_angle_examples() {
        let ea = Vector3::new(1.0, 0.0, 0.0);
        let eb = Vector3::new(0.0, 1.0, 0.0);
        assert_eq!(signed_fiber_angle(&ea, &ea, &eb).unwrap(), 0.0);
        assert_eq!(signed_fiber_angle(&eb, &ea, &eb).unwrap(), FRAC_PI_2);
        let v = ea * 0.4f64.cos() + eb * 0.4f64.sin();
        assert!((signed_fiber_angle(&v, &ea, &eb).unwrap() - 0.4).abs() < 1e-12);
        assert!(matches!(
            signed_fiber_angle(&Vector3::new(0.0, 0.6, 0.8), &ea, &eb),
            Err(Error::OutOfSpan(_))
        ));
    }

    #[test]
    fn zero_initialized_coupling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = MobiusCouplingLayer::new(4, &[16, 16, 16, 16], 0, &mut rng).unwrap();
        for _ in 0..20 {
            let r = sample_uniform(&mut rng);
            let (out, ld) = layer.forward(&r, None).unwrap();
            assert_eq!(ld, 0.0);
            assert!((out.matrix() - r.matrix()).amax() < 1e-15);
            let back = layer.inverse(&r, None, DEFAULT_INVERSE_TOL).unwrap();
            assert!(geodesic_distance(&back.rotation, &r) < 1e-7);
        }
    }

    #[test]
    fn component_angles_stay_in_half_circle() {
        let layer = random_layer(8, 0, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let r = sample_uniform(&mut rng);
            let comp = layer.components(&[r.column(0)], None).unwrap().remove(0);
            assert!((comp.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for w in &comp.omegas {
                assert!(w.norm() < OMEGA_RADIUS);
            }
            for t in comp.component_angles(&r.column(1), &r.column(2)).unwrap() {
                assert!(t.abs() < FRAC_PI_2);
            }
        }
    }

    #[test]
    fn single_component_log_det_matches_fiber_derivative() {
        let layer = random_layer(1, 0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let r = sample_uniform(&mut rng);
            let (c1, c2, c3) = (r.column(0), r.column(1), r.column(2));
            let comp = layer.components(&[c1], None).unwrap().remove(0);
            let (_, ld) = layer.forward(&r, None).unwrap();
            // Absolute fiber angle φ′(φ) in the fixed frame (c2, c3).
            let phi_p = |phi: f64| {
                let c = c2 * phi.cos() + c3 * phi.sin();
                let (t, _) = comp.fiber_step(&c, &c1.cross(&c)).unwrap();
                phi + t
            };
            let h = 1e-6;
            let fd = (phi_p(h) - phi_p(-h)) / (2.0 * h);
            assert!((ld.exp() - fd).abs() < 1e-6, "{} vs {fd}", ld.exp());
            let j = mobius_jacobian(&c2, &comp.omegas[0]);
            assert!(((j * c3).norm().ln() - ld).abs() < 1e-12);
        }
    }

    #[test]
    fn fiber_map_is_strictly_increasing() {
        let layer = random_layer(8, 0, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = sample_uniform(&mut rng);
        let (c1, c2, c3) = (r.column(0), r.column(1), r.column(2));
        let comp = layer.components(&[c1], None).unwrap().remove(0);
        let n = 1000;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=n {
            let phi = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let c = c2 * phi.cos() + c3 * phi.sin();
            let (t, d) = comp.fiber_step(&c, &c1.cross(&c)).unwrap();
            assert!(d > 0.0);
            assert!(phi + t > prev);
            prev = phi + t;
        }
    }

    #[test]
    fn coupling_round_trip_and_iteration_bound() {
        let layer = random_layer(16, 0, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tol = 1e-7;
        let bound = (std::f64::consts::PI / tol).log2().ceil() as usize;
        assert_eq!(bound, 25);
        for _ in 0..200 {
            let r = sample_uniform(&mut rng);
            let (z, ld) = layer.forward(&r, None).unwrap();
            let inv = layer.inverse(&z, None, tol).unwrap();
            assert!(inv.iterations <= bound);
            assert!(geodesic_distance(&inv.rotation, &r) < 2.0 * tol);
            assert!((inv.log_det - ld).abs() < 1e-5);
        }
    }

    #[test]
    fn coupling_log_det_matches_tangent_jacobian() {
        let layer = random_layer(8, 0, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let r = sample_uniform(&mut rng);
            let (_, ld) = layer.forward(&r, None).unwrap();
            let det = numerical_jacobian_det(|x| layer.forward(x, None).unwrap().0, &r, 1e-5);
            assert!((ld.exp() - det).abs() / det < 1e-4, "{} vs {det}", ld.exp());
        }
    }

    #[test]
    fn coupling_tape_matches_plain_path() {
        let layer = random_layer(5, 2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rs: Vec<Rotation> = (0..7).map(|_| sample_uniform(&mut rng)).collect();
        let cond = Tensor::from_vec(7, 2, (0..14).map(|i| (i as f64).cos()).collect());
        let plain = layer.forward_batch(&rs, Some(&cond)).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = layer.params().into_iter().map(|p| tape.param(p.clone())).collect();
        let x = tape.constant(Tensor::from_vec(7, 9, rs.iter().flat_map(|r| r.to_column_major()).collect()));
        let c = tape.constant(cond.clone());
        let (out, ld) = layer.forward_tape(&mut tape, &vars, x, Some(c)).unwrap();
        for (i, (r, l)) in plain.iter().enumerate() {
            let tr = Rotation::from_column_major(tape.value(out).row(i));
            assert!((tr.matrix() - r.matrix()).amax() < 1e-12);
            assert!((tape.value(ld).get(i, 0) - l).abs() < 1e-12);
        }
        assert!(matches!(
            layer.forward(&rs[0], None),
            Err(Error::ConditionMismatch { expected: 2, got: 0 })
        ));
    }

    #[test]
    fn shifted_conditioner_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for j in 1..3 {
            let layer = random_layer(6, 0, 41 + j as u64).with_column(j);
            let rs: Vec<Rotation> = (0..20).map(|_| sample_uniform(&mut rng)).collect();
            let plain = layer.forward_batch(&rs, None).unwrap();
            let mut tape = Tape::new();
            let vars: Vec<Var> = layer.params().into_iter().map(|p| tape.param(p.clone())).collect();
            let x = tape.constant(Tensor::from_vec(20, 9, rs.iter().flat_map(|r| r.to_column_major()).collect()));
            let (out, ld) = layer.forward_tape(&mut tape, &vars, x, None).unwrap();
            for (i, (r, (z, l))) in rs.iter().zip(&plain).enumerate() {
                // The conditioner column is untouched.
                assert_eq!(z.column(j), r.column(j));
                let tr = Rotation::from_column_major(tape.value(out).row(i));
                assert!((tr.matrix() - z.matrix()).amax() < 1e-12);
                assert!((tape.value(ld).get(i, 0) - l).abs() < 1e-12);
                let inv = layer.inverse(z, None, 1e-7).unwrap();
                assert!(geodesic_distance(&inv.rotation, r) < 2e-7);
                let det = numerical_jacobian_det(|x| layer.forward(x, None).unwrap().0, r, 1e-5);
                assert!((l.exp() - det).abs() / det < 1e-4);
            }
        }
    }

    #[test]
    fn distinct_conditions_change_the_map() {
        let layer = random_layer(4, 3, 18);
        let r = sample_uniform(&mut ChaCha8Rng::seed_from_u64(19));
        let (_, a) = layer.forward(&r, Some(&[1.0, 0.0, 0.0])).unwrap();
        let (_, b) = layer.forward(&r, Some(&[0.0, 1.0, 0.0])).unwrap();
        assert!((a - b).abs() > 1e-6);
    }

    #[test]
    fn affine_identity_and_orthogonal() {
        let layer = QuaternionAffineLayer::identity(AffineKind::Unconstrained);
        let q = UnitQuaternion::new(0.5, 0.5, 0.5, 0.5).unwrap();
        let (out, ld) = layer.forward(&q, None).unwrap();
        assert_eq!(out, q);
        assert_eq!(ld, 0.0);
        assert_eq!(layer.inverse(&q, None).unwrap(), q);
        let lu = QuaternionAffineLayer::identity(AffineKind::Lu);
        let (out, ld) = lu.forward(&q, None).unwrap();
        assert_eq!((out, ld), (q, 0.0));

        // A signed permutation is orthogonal.
        let mut w = Matrix4::zeros();
        w[(0, 1)] = 1.0;
        w[(1, 0)] = -1.0;
        w[(2, 3)] = 1.0;
        w[(3, 2)] = 1.0;
        let layer = QuaternionAffineLayer::from_matrix(&w);
        let q = UnitQuaternion::new(0.1, 0.7, -0.5, 0.5).unwrap();
        let (out, ld) = layer.forward(&q, None).unwrap();
        assert!((out.as_vector() - w * q.as_vector()).norm() < 1e-15);
        assert!(ld.abs() < 1e-15);
    }

    #[test]
    fn affine_diagonal_scaling() {
        let w = Matrix4::from_diagonal(&Vector4::new(2.0, 1.0, 1.0, 1.0));
        let layer = QuaternionAffineLayer::from_matrix(&w);
        let (out, ld) = layer.forward(&UnitQuaternion::identity(), None).unwrap();
        assert_eq!(out, UnitQuaternion::identity());
        assert!((ld + 8f64.ln()).abs() < 1e-14);
        let r = quat_to_matrix(&UnitQuaternion::identity());
        let det = numerical_jacobian_det(
            |x| quat_to_matrix(&layer.forward(&matrix_to_quat(x), None).unwrap().0),
            &r,
            1e-5,
        );
        assert!((det - 1.0 / 8.0).abs() / (1.0 / 8.0) < 1e-4);

        let q = UnitQuaternion::new(0.5, 3f64.sqrt() / 2.0, 0.0, 0.0).unwrap();
        let (fq, _) = layer.forward(&q, None).unwrap();
        let back = layer.inverse(&fq, None).unwrap();
        assert!((back.as_vector() - q.as_vector()).norm() < 1e-10);
    }

    #[test]
    fn affine_antipodal_equivariance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut layer = QuaternionAffineLayer::identity(AffineKind::Unconstrained);
        layer.randomize(0.5, &mut rng);
        for _ in 0..1000 {
            let q = crate::so3::sample_uniform_quat(&mut rng);
            let (a, la) = layer.forward(&q, None).unwrap();
            let (b, lb) = layer.forward(&-q, None).unwrap();
            assert_eq!(-a, b);
            assert_eq!(la, lb);
            assert_eq!(layer.inverse(&-q, None).unwrap(), -layer.inverse(&q, None).unwrap());
        }
    }

    #[test]
    fn affine_log_det_matches_tangent_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for kind in [AffineKind::Unconstrained, AffineKind::Lu] {
            let mut layer = QuaternionAffineLayer::identity(kind);
            layer.randomize(0.4, &mut rng);
            for _ in 0..20 {
                let r = sample_uniform(&mut rng);
                let (_, ld) = layer.forward(&matrix_to_quat(&r), None).unwrap();
                let det = numerical_jacobian_det(
                    |x| quat_to_matrix(&layer.forward(&matrix_to_quat(x), None).unwrap().0),
                    &r,
                    1e-5,
                );
                assert!((ld.exp() - det).abs() / det < 1e-4, "{} vs {det}", ld.exp());
            }
        }
    }

    #[test]
    fn affine_rejects_singular_matrix() {
        let layer = QuaternionAffineLayer::from_matrix(&Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 1.0, 0.0)));
        assert!(matches!(
            layer.forward(&UnitQuaternion::identity(), None),
            Err(Error::NearSingular(_))
        ));
    }

    #[test]
    fn lu_compose_examples() {
        let eye = Matrix4::identity();
        let zero = Matrix4::zeros();
        let (w, ld) = lu_compose(&eye, &zero, &[1.0; 4], &[0, 1, 2, 3]).unwrap();
        assert_eq!(w, eye);
        assert_eq!(ld, 0.0);
        let (_, ld) = lu_compose(&eye, &zero, &[2.0, 3.0, 1.0, 1.0], &[0, 1, 2, 3]).unwrap();
        assert!((ld - 6f64.ln()).abs() < 1e-15);
        assert!(matches!(
            lu_compose(&eye, &zero, &[1.0, 0.0, 1.0, 1.0], &[0, 1, 2, 3]),
            Err(Error::ZeroDiagonal { index: 1 })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let l = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let u = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let s: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.2..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
            let (w, ld) = lu_compose(&l, &u, &s, &[2, 0, 3, 1]).unwrap();
            let direct = cofactor_det(&w);
            assert!((direct.abs().ln() - ld).abs() < 1e-10);
            // Odd permutation (a 4-cycle) flips the sign.
            let sign: f64 = -s.iter().product::<f64>().signum();
            assert_eq!(direct.signum(), sign);
        }
    }

    fn cofactor_det(m: &Matrix4<f64>) -> f64 {
        fn det3(a: [[f64; 3]; 3]) -> f64 {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        }
        (0..4)
            .map(|j| {
                let minor = std::array::from_fn(|r| {
                    let cols: Vec<usize> = (0..4).filter(|c| *c != j).collect();
                    std::array::from_fn(|c| m[(r + 1, cols[c])])
                });
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * m[(0, j)] * det3(minor)
            })
            .sum()
    }

    #[test]
    fn affine_tape_matches_plain_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let qs: Vec<UnitQuaternion> = (0..5).map(|_| crate::so3::sample_uniform_quat(&mut rng)).collect();
        let cond = Tensor::from_vec(5, 2, (0..10).map(|i| (i as f64 * 0.7).sin()).collect());
        let mut layers = vec![
            QuaternionAffineLayer::identity(AffineKind::Unconstrained),
            QuaternionAffineLayer::identity(AffineKind::Lu),
            QuaternionAffineLayer::conditional(2, &[8, 8], &mut rng).unwrap(),
        ];
        if let AffineParam::Lu { perm, sign, .. } = &mut layers[1].param {
            *perm = [1, 3, 0, 2];
            *sign = [1.0, -1.0, 1.0, -1.0];
        }
        for layer in &mut layers {
            layer.randomize(0.3, &mut rng);
            let mut tape = Tape::new();
            let vars: Vec<Var> = layer.params().into_iter().map(|p| tape.param(p.clone())).collect();
            let q = tape.constant(Tensor::from_vec(5, 4, qs.iter().flat_map(|q| q.to_array()).collect()));
            let c = layer.is_conditional().then(|| tape.constant(cond.clone()));
            let (out, ld) = layer.forward_tape(&mut tape, &vars, q, c).unwrap();
            for (i, q) in qs.iter().enumerate() {
                let row = cond.row(i).to_vec();
                let c = layer.is_conditional().then_some(row.as_slice());
                let (p, l) = layer.forward(q, c).unwrap();
                let t = tape.value(out).row(i);
                assert!(p.to_array().iter().zip(t).all(|(a, b)| (a - b).abs() < 1e-12));
                assert!((tape.value(ld).get(i, 0) - l).abs() < 1e-12);
            }
        }
    }
}
