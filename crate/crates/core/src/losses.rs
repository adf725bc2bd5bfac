//! Reconstruction, output-level and feature-level distillation losses, and
//! the weighted composition of all terms into one training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Conv};
use crate::tensor::Real;

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_kd: f64,
    pub lambda_feat: f64,
    pub lambda_block: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_kd: 1.0,
            lambda_feat: 1.0,
            lambda_block: 0.1,
        }
    }
}

impl LossWeights {
    pub const fn new(lambda_rec: f64, lambda_kd: f64, lambda_feat: f64, lambda_block: f64) -> Self {
        Self {
            lambda_rec,
            lambda_kd,
            lambda_feat,
            lambda_block,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_kd", self.lambda_kd),
            ("lambda_feat", self.lambda_feat),
            ("lambda_block", self.lambda_block),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// L1 distance of the student output to the ground truth.
pub fn rec_loss<T: Real>(g: &mut Graph<T>, student_sr: Var, hr: Var) -> Result<Var> {
    g.mae(student_sr, hr)
}

/// L1 distance of the student output to the teacher output.
pub fn logits_loss<T: Real>(g: &mut Graph<T>, student_sr: Var, teacher_sr: Var) -> Result<Var> {
    g.mae(student_sr, teacher_sr)
}

pub fn at_loss<T: Real>(g: &mut Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    g.attention_transfer(student, teacher)
}

/// Hint loss: a 1x1 adapter lifts the student feature to teacher width and
/// the result is compared by mean squared error.
pub fn fitnet_loss<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    hint: &Conv,
    student: Var,
    teacher: Var,
) -> Result<Var> {
    let lifted = hint.apply(g, params, student)?;
    g.mse(lifted, teacher)
}

pub fn fakd_affinity_loss<T: Real>(g: &mut Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    g.affinity(student, teacher)
}

/// Per-term scalar values of one iteration's objective.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub rec: f64,
    pub logits: f64,
    /// Feature term per tap (mixer loss for MiPKD, the baseline loss
    /// otherwise).
    pub feat: Vec<f64>,
    /// Auto-encoder term per tap; empty when disabled.
    pub ae: Vec<f64>,
    /// Block term per tap; `None` for dropped positions.
    pub block: Vec<Option<f64>>,
}

#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub logits: f64,
    pub feat_per_tap: Vec<f64>,
    pub ae_per_tap: Vec<f64>,
    pub block_per_tap: Vec<Option<f64>>,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the total from the recorded parts.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        let mut total = w.lambda_kd * self.logits + w.lambda_rec * self.rec;
        for k in 0..self.feat_per_tap.len().max(self.block_per_tap.len()) {
            let feat = self.feat_per_tap.get(k).copied().unwrap_or(0.0)
                + self.ae_per_tap.get(k).copied().unwrap_or(0.0);
            let block = self.block_per_tap.get(k).copied().flatten().unwrap_or(0.0);
            total += w.lambda_feat * feat + w.lambda_block * block;
        }
        total
    }

    pub fn feat_sum(&self) -> f64 {
        self.feat_per_tap.iter().sum()
    }

    pub fn ae_sum(&self) -> f64 {
        self.ae_per_tap.iter().sum()
    }

    pub fn block_sum(&self) -> f64 {
        self.block_per_tap.iter().flatten().sum()
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<String> {
        if !self.rec.is_finite() {
            return Some("rec".into());
        }
        if !self.logits.is_finite() {
            return Some("logits".into());
        }
        for (name, values) in [("feat", &self.feat_per_tap), ("ae", &self.ae_per_tap)] {
            if let Some(k) = values.iter().position(|v| !v.is_finite()) {
                return Some(format!("{name}[{k}]"));
            }
        }
        if let Some(k) = self
            .block_per_tap
            .iter()
            .position(|v| v.is_some_and(|v| !v.is_finite()))
        {
            return Some(format!("block[{k}]"));
        }
        if !self.total.is_finite() {
            return Some("total".into());
        }
        None
    }
}

/// Weighted total: `kd * logits + rec * rec + sum_k (feat * (feat_k + ae_k)
/// + block * block_k)`, dropped block terms contributing nothing.
pub fn total_loss(parts: LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    if !parts.ae.is_empty() && parts.ae.len() != parts.feat.len() {
        return Err(Error::Dimension(format!(
            "{} auto-encoder terms for {} taps",
            parts.ae.len(),
            parts.feat.len()
        )));
    }
    let all_parts = [parts.rec, parts.logits]
        .into_iter()
        .chain(parts.feat.iter().copied())
        .chain(parts.ae.iter().copied())
        .chain(parts.block.iter().flatten().copied());
    if all_parts.clone().any(|v| v < 0.0) {
        return Err(Error::Config("loss parts must be non-negative".into()));
    }
    let mut breakdown = LossBreakdown {
        rec: parts.rec,
        logits: parts.logits,
        feat_per_tap: parts.feat,
        ae_per_tap: parts.ae,
        block_per_tap: parts.block,
        total: 0.0,
    };
    breakdown.total = breakdown.recompose(weights);
    Ok(breakdown)
}

/// Loss terms of one iteration as tape handles.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub rec: Option<Var>,
    pub logits: Option<Var>,
    pub feat: Vec<Var>,
    pub ae: Vec<Var>,
    pub block: Vec<Option<Var>>,
}

/// Builds the differentiable total and the matching [`LossBreakdown`].
pub fn compose<T: Real>(
    g: &mut Graph<T>,
    terms: &LossTerms,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let read = |v: Var| g.value(v).item().as_f64();
    let parts = LossParts {
        rec: terms.rec.map(read).unwrap_or(0.0),
        logits: terms.logits.map(read).unwrap_or(0.0),
        feat: terms.feat.iter().map(|&v| read(v)).collect(),
        ae: terms.ae.iter().map(|&v| read(v)).collect(),
        block: terms.block.iter().map(|v| v.map(read)).collect(),
    };
    let breakdown = total_loss(parts, weights)?;
    let mut weighted = Vec::new();
    if let Some(v) = terms.logits {
        weighted.push((v, weights.lambda_kd));
    }
    if let Some(v) = terms.rec {
        weighted.push((v, weights.lambda_rec));
    }
    for &v in terms.feat.iter().chain(&terms.ae) {
        weighted.push((v, weights.lambda_feat));
    }
    for v in terms.block.iter().flatten() {
        weighted.push((*v, weights.lambda_block));
    }
    let total = g.weighted_sum(&weighted)?;
    Ok((total, breakdown))
}
