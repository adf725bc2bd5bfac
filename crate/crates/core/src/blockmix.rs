//! Block-level prior mixing: an enhanced feature is spliced into the
//! remaining blocks of either network, or the position is dropped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{SrModel, TapSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mixer::MixerBundle;
use crate::params::Bound;
use crate::tensor::Real;

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockMixConfig {
    /// Weight of the teacher-output term against the ground-truth term.
    pub w: f64,
    /// Probability of routing into the student.
    pub route_prob: f64,
    /// Probability of keeping a position.
    pub keep_prob: f64,
}

impl Default for BlockMixConfig {
    fn default() -> Self {
        Self {
            w: 0.5,
            route_prob: 0.5,
            keep_prob: 0.5,
        }
    }
}

impl BlockMixConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w", self.w),
            ("route_prob", self.route_prob),
            ("keep_prob", self.keep_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("blockmix.{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub position: usize,
    /// `true` routes into the student, `false` into the teacher.
    pub to_student: bool,
    /// `false` drops the position entirely.
    pub keep: bool,
}

/// Samples one decision per position, drawing the route bit then the keep bit.
pub fn sample_routing<R: Rng>(cfg: &BlockMixConfig, positions: usize, rng: &mut R) -> Vec<RoutingDecision> {
    (0..positions)
        .map(|position| {
            let to_student = rng.gen_bool(cfg.route_prob);
            let keep = rng.gen_bool(cfg.keep_prob);
            RoutingDecision {
                position,
                to_student,
                keep,
            }
        })
        .collect()
}

/// One network as seen by the block mixer: the model, its parameters on the
/// tape and the head output of its full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Side<'a, T> {
    pub model: &'a SrModel<T>,
    pub params: &'a Bound,
    pub head: Var,
}

/// Everything a mixed forward needs besides the enhanced feature.
#[derive(Clone, Copy, Debug)]
pub struct MixContext<'a, T> {
    pub teacher: Side<'a, T>,
    pub student: Side<'a, T>,
    pub bundle: &'a MixerBundle<T>,
    pub bundle_params: &'a Bound,
    pub taps: &'a TapSet,
}

/// Propagates `enhanced` (teacher width) through the rest of the network
/// chosen by `decision`. Dropped positions return `None` without touching the
/// tape.
pub fn mixed_forward<T: Real>(
    g: &mut Graph<T>,
    ctx: &MixContext<'_, T>,
    enhanced: Var,
    decision: RoutingDecision,
) -> Result<Option<Var>> {
    if !decision.keep {
        return Ok(None);
    }
    let k = decision.position;
    let tap = ctx.taps.positions.get(k).ok_or_else(|| {
        Error::Config(format!("routing position {k} outside {} taps", ctx.taps.len()))
    })?;
    let out = if decision.to_student {
        let adapted = ctx.bundle.adapt_to_student(g, ctx.bundle_params, k, enhanced)?;
        ctx.student
            .model
            .forward_from(g, ctx.student.params, tap.student, adapted, ctx.student.head)?
    } else {
        ctx.teacher
            .model
            .forward_from(g, ctx.teacher.params, tap.teacher, enhanced, ctx.teacher.head)?
    };
    Ok(Some(out))
}

/// `w * MAE(mixed, teacher_sr) + (1 - w) * MAE(mixed, hr)`.
pub fn block_mix_loss<T: Real>(
    g: &mut Graph<T>,
    mixed: Var,
    teacher_sr: Var,
    hr: Var,
    cfg: &BlockMixConfig,
) -> Result<Var> {
    let to_teacher = g.mae(mixed, teacher_sr)?;
    let to_gt = g.mae(mixed, hr)?;
    g.weighted_sum(&[(to_teacher, cfg.w), (to_gt, 1.0 - cfg.w)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = BlockMixConfig {
            route_prob: 1.0,
            keep_prob: 1.0,
            ..Default::default()
        };
        assert!(sample_routing(&all, 6, &mut rng).iter().all(|d| d.to_student && d.keep));
        let none = BlockMixConfig {
            keep_prob: 0.0,
            ..Default::default()
        };
        assert!(sample_routing(&none, 6, &mut rng).iter().all(|d| !d.keep));
    }

    #[test]
    fn routing_is_deterministic_in_rng_state() {
        let cfg = BlockMixConfig::default();
        let a = sample_routing(&cfg, 8, &mut ChaCha8Rng::seed_from_u64(7));
        let b = sample_routing(&cfg, 8, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn loss_weighting() {
        let mut g = Graph::<f64>::new();
        let shape = Shape::new(1, 3, 2, 2);
        let mixed = g.constant(Tensor::full(shape, 0.5));
        let teacher = g.constant(Tensor::full(shape, 0.7));
        let hr = g.constant(Tensor::full(shape, 0.1));
        let l = block_mix_loss(&mut g, mixed, teacher, hr, &BlockMixConfig::default()).unwrap();
        assert!((g.value(l).item() - 0.3).abs() < 1e-12);
        let bad = g.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
        assert!(block_mix_loss(&mut g, mixed, bad, hr, &BlockMixConfig::default()).is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(BlockMixConfig { w: 1.5, ..Default::default() }.validate().is_err());
        assert!(BlockMixConfig::default().validate().is_ok());
    }
}
