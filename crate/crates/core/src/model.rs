//! Composition of coupling and affine layers into a flow on SO(3).
//!
//! Block order in the data→base direction: Mobius coupling, matrix →
//! quaternion, quaternion affine, quaternion → matrix. The base is the
//! Haar-uniform distribution with log-density 0, so `log_prob` is the sum
//! of per-layer forward log-dets.

use nalgebra::Vector4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{AffineKind, MobiusCouplingLayer, QuaternionAffineLayer, DEFAULT_INVERSE_TOL};
use crate::so3::{matrix_to_quat, quat_to_matrix, sample_uniform, Rotation, UnitQuaternion};
use crate::tensor::Tensor;

/// Rows evaluated per tape when computing log-densities in bulk.
pub const EVAL_CHUNK: usize = 1024;

/// Which layers each block contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerKinds {
    #[default]
    Both,
    MobiusOnly,
    AffineOnly,
}

/// Which blocks use a condition-dependent affine matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionalAffine {
    /// Affine matrices are free parameters.
    #[default]
    None,
    /// Only the first block on the data side.
    Head,
    Every,
}

/// Which rotation-matrix column each coupling layer holds fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Conditioner {
    /// Always the first column.
    #[default]
    First,
    /// Block `i` uses column `i mod 3`.
    Cycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub blocks: usize,
    /// Mobius components per coupling layer.
    pub k: usize,
    pub hidden: Vec<usize>,
    pub cond_dim: usize,
    pub conditional_affine: ConditionalAffine,
    pub affine: AffineKind,
    pub layers: LayerKinds,
    pub conditioner: Conditioner,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 6 blocks, 16 components.
    pub fn desk() -> Self {
        Self {
            blocks: 6,
            k: 16,
            hidden: vec![64; 4],
            cond_dim: 0,
            conditional_affine: ConditionalAffine::None,
            affine: AffineKind::Unconstrained,
            layers: LayerKinds::Both,
            conditioner: Conditioner::First,
        }
    }

    /// 24 blocks, 64 components.
    pub fn full() -> Self {
        Self {
            blocks: 24,
            k: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::InvalidArgument("model needs at least one block".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.first() != self.hidden.last() {
            return Err(Error::InvalidArgument(
                "hidden widths must be nonempty with equal first and last entries".into(),
            ));
        }
        if self.conditional_affine != ConditionalAffine::None && self.cond_dim == 0 {
            return Err(Error::InvalidArgument("conditional affine requires cond_dim > 0".into()));
        }
        if self.conditional_affine != ConditionalAffine::None && self.layers == LayerKinds::MobiusOnly {
            return Err(Error::InvalidArgument("conditional affine requires affine layers".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub mobius: Option<MobiusCouplingLayer>,
    pub affine: Option<QuaternionAffineLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    config: ModelConfig,
    blocks: Vec<Block>,
}

/// Per-layer log-dets from one data→base pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub z: Rotation,
    pub log_dets: Vec<f64>,
}

impl ForwardTrace {
    pub fn total(&self) -> f64 {
        self.log_dets.iter().sum()
    }
}

impl FlowModel {
    /// Identity-initialized model; hidden layers are drawn from `rng`.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let mobius = match config.layers {
                LayerKinds::AffineOnly => None,
                _ => {
                    let column = match config.conditioner {
                        Conditioner::First => 0,
                        Conditioner::Cycle => i % 3,
                    };
                    Some(MobiusCouplingLayer::new(config.k, &config.hidden, config.cond_dim, rng)?.with_column(column))
                }
            };
            let conditional = match config.conditional_affine {
                ConditionalAffine::None => false,
                ConditionalAffine::Head => i == 0,
                ConditionalAffine::Every => true,
            };
            let affine = match config.layers {
                LayerKinds::MobiusOnly => None,
                _ if conditional => Some(QuaternionAffineLayer::conditional(config.cond_dim, &config.hidden, rng)?),
                _ => Some(QuaternionAffineLayer::identity(config.affine)),
            };
            blocks.push(Block { mobius, affine });
        }
        Ok(Self { config, blocks })
    }

    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Random output layers everywhere and affine matrices jittered by
    /// `affine_scale` around the identity.
    pub fn randomize<R: Rng + ?Sized>(&mut self, affine_scale: f64, rng: &mut R) {
        for b in &mut self.blocks {
            if let Some(m) = &mut b.mobius {
                m.randomize(rng);
            }
            if let Some(a) = &mut b.affine {
                a.randomize(affine_scale, rng);
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            if let Some(m) = &b.mobius {
                out.extend(m.params());
            }
            if let Some(a) = &b.affine {
                out.extend(a.params());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            if let Some(m) = &mut b.mobius {
                out.extend(m.params_mut());
            }
            if let Some(a) = &mut b.affine {
                out.extend(a.params_mut());
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(m) = &b.mobius {
                out.extend(m.param_names(&format!("block{i}.mobius")));
            }
            if let Some(a) = &b.affine {
                out.extend(a.param_names(&format!("block{i}.affine")));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_cond(&self, cond: Option<&[f64]>) -> Result<()> {
        let got = cond.map_or(0, <[f64]>::len);
        if got != self.config.cond_dim {
            return Err(Error::ConditionMismatch {
                expected: self.config.cond_dim,
                got,
            });
        }
        Ok(())
    }

    fn cond_arg(&self, cond: Option<&[f64]>) -> Result<Option<Tensor>> {
        self.check_cond(cond)?;
        Ok(cond.filter(|c| !c.is_empty()).map(|c| Tensor::from_vec(1, c.len(), c.to_vec())))
    }

    /// Data→base pass with every layer's log-det, in application order.
    pub fn forward_trace(&self, x: &Rotation, cond: Option<&[f64]>) -> Result<ForwardTrace> {
        let cond_t = self.cond_arg(cond)?;
        let cond = cond.filter(|c| !c.is_empty());
        let mut r = *x;
        let mut log_dets = Vec::with_capacity(2 * self.blocks.len());
        for b in &self.blocks {
            if let Some(m) = &b.mobius {
                let (out, ld) = m
                    .forward_batch(std::slice::from_ref(&r), cond_t.as_ref())?
                    .remove(0);
                r = out;
                log_dets.push(ld);
            }
            if let Some(a) = &b.affine {
                let c = if a.is_conditional() { cond } else { None };
                let (q, ld) = a.forward(&matrix_to_quat(&r), c)?;
                r = quat_to_matrix(&q);
                log_dets.push(ld);
            }
        }
        Ok(ForwardTrace { z: r, log_dets })
    }

    /// Image in the base space and the summed log-det.
    pub fn forward_to_base(&self, x: &Rotation, cond: Option<&[f64]>) -> Result<(Rotation, f64)> {
        let t = self.forward_trace(x, cond)?;
        let total = t.total();
        Ok((t.z, total))
    }

    /// Registers every parameter on `tape` (in [`FlowModel::params`] order).
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Records `log p(x)` for a batch of column-major rotations (`b×9`);
    /// returns a `b×1` node. `cond` must have one row per rotation.
    pub fn log_prob_tape(&self, tape: &mut Tape, params: &[Var], x: Var, cond: Option<Var>) -> Result<Var> {
        if cond.is_some() != (self.config.cond_dim > 0) {
            return Err(Error::ConditionMismatch {
                expected: self.config.cond_dim,
                got: cond.map_or(0, |c| tape.value(c).cols()),
            });
        }
        let b = tape.value(x).rows();
        let mut total = tape.constant(Tensor::zeros(b, 1));
        let mut r = x;
        let mut offset = 0;
        for block in &self.blocks {
            if let Some(m) = &block.mobius {
                let n = m.params().len();
                let (out, ld) = m.forward_tape(tape, &params[offset..offset + n], r, cond)?;
                offset += n;
                r = out;
                total = tape.add(total, ld);
            }
            if let Some(a) = &block.affine {
                let n = a.params().len();
                let q = tape.mat_to_quat(r);
                let c = if a.is_conditional() { cond } else { None };
                let (q, ld) = a.forward_tape(tape, &params[offset..offset + n], q, c)?;
                offset += n;
                r = tape.quat_to_mat(q);
                total = tape.add(total, ld);
            }
        }
        Ok(total)
    }

    /// Log-density (nats relative to Haar) of each rotation.
    ///
    /// `cond` has one row shared by all rotations or one row per rotation.
    pub fn log_prob_batch(&self, xs: &[Rotation], cond: Option<&Tensor>) -> Result<Vec<f64>> {
        let d = self.config.cond_dim;
        if let Some(c) = cond {
            if c.cols() != d {
                return Err(Error::ConditionMismatch { expected: d, got: c.cols() });
            }
            if c.rows() != 1 && c.rows() != xs.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} condition rows for {} rotations",
                    c.rows(),
                    xs.len()
                )));
            }
        } else if d > 0 {
            return Err(Error::ConditionMismatch { expected: d, got: 0 });
        }
        let chunks: Vec<(usize, &[Rotation])> = xs.chunks(EVAL_CHUNK).enumerate().collect();
        let parts: Vec<Result<Vec<f64>>> = chunks
            .par_iter()
            .map(|(ci, chunk)| {
                let mut tape = Tape::new();
                let params = self.register(&mut tape, false);
                let data: Vec<f64> = chunk.iter().flat_map(|r| r.to_column_major()).collect();
                let x = tape.constant(Tensor::from_vec(chunk.len(), 9, data));
                let c = cond.map(|c| {
                    let rows: Vec<usize> = if c.rows() == 1 {
                        vec![0; chunk.len()]
                    } else {
                        (ci * EVAL_CHUNK..ci * EVAL_CHUNK + chunk.len()).collect()
                    };
                    tape.constant(c.select_rows(&rows))
                });
                let lp = self.log_prob_tape(&mut tape, &params, x, c)?;
                Ok(tape.value(lp).data().to_vec())
            })
            .collect();
        let mut out = Vec::with_capacity(xs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn log_prob(&self, x: &Rotation, cond: Option<&[f64]>) -> Result<f64> {
        let c = self.cond_arg(cond)?;
        Ok(self.log_prob_batch(std::slice::from_ref(x), c.as_ref())?[0])
    }

    /// Base→data map of the given base points; returns each data point and
    /// its log-density.
    pub fn inverse_batch(&self, zs: &[Rotation], cond: Option<&[f64]>, tol: f64) -> Result<Vec<(Rotation, f64)>> {
        let cond_t = self.cond_arg(cond)?;
        let chunks: Vec<&[Rotation]> = zs.chunks(EVAL_CHUNK).collect();
        let parts: Vec<Result<Vec<(Rotation, f64)>>> = chunks
            .par_iter()
            .map(|chunk| {
                let mut rs = chunk.to_vec();
                let mut lp = vec![0.0; rs.len()];
                for block in self.blocks.iter().rev() {
                    if let Some(a) = &block.affine {
                        let qs: Vec<Vector4<f64>> = rs.iter().map(|r| *matrix_to_quat(r).as_vector()).collect();
                        let c = if a.is_conditional() { cond_t.as_ref() } else { None };
                        for (i, (q, ld)) in a.inverse_batch(&qs, c)?.into_iter().enumerate() {
                            rs[i] = quat_to_matrix(&UnitQuaternion::normalize(q)?);
                            lp[i] += ld;
                        }
                    }
                    if let Some(m) = &block.mobius {
                        for (i, inv) in m.inverse_batch(&rs, cond_t.as_ref(), tol)?.into_iter().enumerate() {
                            rs[i] = inv.rotation;
                            lp[i] += inv.log_det;
                        }
                    }
                }
                Ok(rs.into_iter().zip(lp).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(zs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Draws `n` rotations with their log-densities.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, cond: Option<&[f64]>, rng: &mut R) -> Result<Vec<(Rotation, f64)>> {
        self.sample_with_tol(n, cond, rng, DEFAULT_INVERSE_TOL)
    }

    pub fn sample_with_tol<R: Rng + ?Sized>(
        &self,
        n: usize,
        cond: Option<&[f64]>,
        rng: &mut R,
        tol: f64,
    ) -> Result<Vec<(Rotation, f64)>> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let zs: Vec<Rotation> = (0..n).map(|_| sample_uniform(rng)).collect();
        self.inverse_batch(&zs, cond, tol)
    }
}

/// The sample with the highest log-density; ties go to the earliest.
pub fn best_sample(samples: &[(Rotation, f64)]) -> Result<Rotation> {
    let mut best: Option<&(Rotation, f64)> = None;
    for s in samples {
        if best.is_none_or(|b| s.1 > b.1) {
            best = Some(s);
        }
    }
    best.map(|b| b.0).ok_or(Error::Empty("sample list"))
}
