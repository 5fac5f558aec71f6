//! Evaluation: held-out log-likelihood, spread against symmetry sets,
//! Monte-Carlo entropy and normalization audits.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::entropy_from_log_probs;
use crate::error::{Error, Result};
use crate::model::FlowModel;
use crate::so3::{geodesic_distance, Rotation, SO3Grid};
use crate::tensor::Tensor;

/// Angular resolution used to discretize continuous symmetry sets.
pub const FIBER_STEP_DEG: f64 = 1.0;

/// Acceptance band for [`normalization_audit`].
pub const AUDIT_BAND: (f64, f64) = (0.95, 1.05);

/// Mean log-density over a test set.
pub fn avg_log_likelihood(model: &FlowModel, xs: &[Rotation], cond: Option<&Tensor>) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let lp = model.log_prob_batch(xs, cond)?;
    Ok(lp.iter().sum::<f64>() / xs.len() as f64)
}

/// Ground-truth rotations that are indistinguishable under a symmetry.
#[derive(Debug, Clone)]
pub enum SymmetrySet {
    Finite(Vec<Rotation>),
    /// `{ base · exp(t·axis) : t ∈ [0, 2π) }`, queried at 1° steps.
    Fiber { base: Rotation, axis: Vector3<f64> },
}

impl SymmetrySet {
    pub fn finite(rotations: Vec<Rotation>) -> Result<Self> {
        if rotations.is_empty() {
            return Err(Error::Empty("symmetry set"));
        }
        Ok(SymmetrySet::Finite(rotations))
    }

    /// `base · g` for every `g` in `group`.
    pub fn from_group(base: &Rotation, group: &[Rotation]) -> Result<Self> {
        Self::finite(group.iter().map(|g| base.compose(g)).collect())
    }

    pub fn rotations(&self) -> Vec<Rotation> {
        match self {
            SymmetrySet::Finite(r) => r.clone(),
            SymmetrySet::Fiber { base, axis } => {
                let n = (360.0 / FIBER_STEP_DEG).round() as usize;
                (0..n)
                    .map(|i| {
                        let t = (i as f64 * FIBER_STEP_DEG).to_radians();
                        base.compose(&Rotation::from_axis_angle(axis, t))
                    })
                    .collect()
            }
        }
    }

    /// Largest distance from `set·g` to the set over `g` in `group`; zero
    /// for a set closed under right-composition by `group`.
    pub fn closure_defect(&self, group: &[Rotation]) -> f64 {
        let rs = self.rotations();
        let mut worst: f64 = 0.0;
        for r in &rs {
            for g in group {
                let moved = r.compose(g);
                worst = worst.max(nearest(&moved, &rs));
            }
        }
        worst
    }
}

fn nearest(r: &Rotation, set: &[Rotation]) -> f64 {
    set.iter().map(|g| geodesic_distance(r, g)).fold(f64::INFINITY, f64::min)
}

/// Mean over samples of the angle (degrees) to the nearest ground truth.
pub fn spread(samples: &[Rotation], gt: &SymmetrySet) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let set = gt.rotations();
    if set.is_empty() {
        return Err(Error::Empty("symmetry set"));
    }
    let total: f64 = samples.iter().map(|s| nearest(s, &set)).sum();
    Ok((total / samples.len() as f64).to_degrees())
}

/// Estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Mean and standard error of `−x`.
pub fn negative_mean_with_stderr(xs: &[f64]) -> Estimate {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Estimate {
        value: -mean,
        stderr: (var / n as f64).sqrt(),
        n,
    }
}

/// `−E[log p]` from `n` flow samples.
pub fn mc_entropy<R: Rng + ?Sized>(model: &FlowModel, n: usize, cond: Option<&[f64]>, rng: &mut R) -> Result<Estimate> {
    if n < 2 {
        return Err(Error::InvalidArgument("entropy estimate needs at least 2 samples".into()));
    }
    let lp: Vec<f64> = model.sample(n, cond, rng)?.into_iter().map(|(_, l)| l).collect();
    Ok(negative_mean_with_stderr(&lp))
}

/// Entropy of the model density by grid quadrature.
pub fn grid_entropy(model: &FlowModel, grid: &SO3Grid, cond: Option<&Tensor>) -> Result<f64> {
    Ok(entropy_from_log_probs(&model.log_prob_batch(grid.points(), cond)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub mass: f64,
    pub pass: bool,
}

/// Grid average of `exp(log p)`; passes inside [`AUDIT_BAND`].
pub fn normalization_audit(model: &FlowModel, grid: &SO3Grid, cond: Option<&Tensor>) -> Result<Audit> {
    let lp = model.log_prob_batch(grid.points(), cond)?;
    let mass = grid.quadrature_values(&lp.iter().map(|l| l.exp()).collect::<Vec<_>>());
    Ok(Audit {
        mass,
        pass: (AUDIT_BAND.0..=AUDIT_BAND.1).contains(&mass),
    })
}

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub stderr: Option<f64>,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl MetricRecord {
    pub fn new(metric: &str, value: f64, config_hash: &str) -> Self {
        Self {
            metric: metric.into(),
            value,
            stderr: None,
            config_hash: config_hash.into(),
            note: None,
        }
    }

    pub fn with_stderr(mut self, stderr: f64) -> Self {
        self.stderr = Some(stderr);
        self
    }

    pub fn with_note(mut self, note: &str) -> Self {
        self.note = Some(note.into());
        self
    }
}
