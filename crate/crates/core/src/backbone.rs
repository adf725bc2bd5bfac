//! EDSR- and RCAN-style super-resolution networks with feature taps and
//! resumable forward propagation.
//!
//! The trunk of both architectures is a sequence of *units*: residual blocks
//! for EDSR and residual groups for RCAN. Taps and splice points refer to
//! unit boundaries, counted from 1 (the output of the first unit).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Conv, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Edsr,
    Rcan,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Edsr => "edsr",
            Arch::Rcan => "rcan",
        })
    }
}

fn default_groups() -> usize {
    1
}

fn default_reduction() -> usize {
    16
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub arch: Arch,
    /// Feature width.
    pub channels: usize,
    /// Residual blocks (per group for RCAN).
    pub blocks: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    pub scale: usize,
    /// Residual branch scaling. Defaults to 0.1 for widths of 256 and above,
    /// 1.0 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub res_scale: Option<f64>,
    #[serde(default = "default_reduction")]
    pub attention_reduction: usize,
}

impl NetworkSpec {
    pub fn edsr(channels: usize, blocks: usize, scale: usize) -> Self {
        Self {
            arch: Arch::Edsr,
            channels,
            blocks,
            groups: 1,
            scale,
            res_scale: None,
            attention_reduction: default_reduction(),
        }
    }

    pub fn rcan(channels: usize, blocks: usize, groups: usize, scale: usize) -> Self {
        Self {
            arch: Arch::Rcan,
            channels,
            blocks,
            groups,
            scale,
            res_scale: None,
            attention_reduction: default_reduction(),
        }
    }

    pub fn effective_res_scale(&self) -> f64 {
        self.res_scale
            .unwrap_or(if self.channels >= 256 { 0.1 } else { 1.0 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.blocks == 0 || self.groups == 0 {
            return Err(Error::Config(format!(
                "channels, blocks and groups must be positive: {self:?}"
            )));
        }
        if !matches!(self.scale, 2..=4) {
            return Err(Error::Config(format!(
                "unsupported scale x{}; expected 2, 3 or 4",
                self.scale
            )));
        }
        if self.arch == Arch::Edsr && self.groups != 1 {
            return Err(Error::Config("EDSR networks have exactly one group".into()));
        }
        if self.attention_reduction == 0 {
            return Err(Error::Config("attention_reduction must be positive".into()));
        }
        let rs = self.effective_res_scale();
        if !(rs > 0.0 && rs <= 1.0) {
            return Err(Error::Config(format!("res_scale {rs} outside (0, 1]")));
        }
        Ok(())
    }

    /// Number of trunk units (blocks for EDSR, groups for RCAN).
    pub fn units(&self) -> usize {
        match self.arch {
            Arch::Edsr => self.blocks,
            Arch::Rcan => self.groups,
        }
    }

    fn attention_width(&self) -> usize {
        (self.channels / self.attention_reduction).max(1)
    }

    /// `(channel multiplier, pixel-shuffle factor)` for each upsampling stage.
    fn upsample_stages(&self) -> Vec<usize> {
        match self.scale {
            4 => vec![2, 2],
            s => vec![s],
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let conv3 = Conv::param_count(c, c, 3);
        let block = 2 * conv3
            + match self.arch {
                Arch::Edsr => 0,
                Arch::Rcan => {
                    let r = self.attention_width();
                    Conv::param_count(c, r, 1) + Conv::param_count(r, c, 1)
                }
            };
        let trunk = match self.arch {
            Arch::Edsr => self.blocks * block,
            Arch::Rcan => self.groups * (self.blocks * block + conv3),
        };
        let upsampler: usize = self
            .upsample_stages()
            .iter()
            .map(|&r| Conv::param_count(c, c * r * r, 3))
            .sum();
        Conv::param_count(3, c, 3) + trunk + conv3 + upsampler + Conv::param_count(c, 3, 3)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

/// One distillation position: unit boundaries in both networks.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TapPosition {
    pub student: usize,
    pub teacher: usize,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TapSet {
    pub positions: Vec<TapPosition>,
}

impl TapSet {
    /// `count` taps evenly spaced over the student's units, each paired with
    /// the proportionally placed teacher unit.
    pub fn evenly_spaced(student_units: usize, teacher_units: usize, count: usize) -> Result<Self> {
        if count == 0 || count > student_units.min(teacher_units) {
            return Err(Error::Config(format!(
                "tap count {count} must be in 1..={}",
                student_units.min(teacher_units)
            )));
        }
        let positions = (1..=count)
            .map(|k| {
                let student = ((k * student_units) as f64 / count as f64).round() as usize;
                let teacher =
                    ((student * teacher_units) as f64 / student_units as f64).round() as usize;
                TapPosition { student, teacher }
            })
            .collect();
        let taps = Self { positions };
        taps.validate(student_units, teacher_units)?;
        Ok(taps)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self, student_units: usize, teacher_units: usize) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::Config("tap set is empty".into()));
        }
        let check = |idx: Vec<usize>, units: usize, who: &str| -> Result<()> {
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!(
                    "{who} tap indices must be strictly increasing: {idx:?}"
                )));
            }
            if idx.iter().any(|&i| i == 0 || i > units) {
                return Err(Error::Config(format!(
                    "{who} tap indices {idx:?} outside 1..={units}"
                )));
            }
            Ok(())
        };
        check(
            self.positions.iter().map(|p| p.student).collect(),
            student_units,
            "student",
        )?;
        check(
            self.positions.iter().map(|p| p.teacher).collect(),
            teacher_units,
            "teacher",
        )
    }

    pub fn student_indices(&self) -> Vec<usize> {
        self.positions.iter().map(|p| p.student).collect()
    }

    pub fn teacher_indices(&self) -> Vec<usize> {
        self.positions.iter().map(|p| p.teacher).collect()
    }
}

#[derive(Clone, Debug)]
struct ChannelAttention {
    down: Conv,
    up: Conv,
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    attention: Option<ChannelAttention>,
}

#[derive(Clone, Debug)]
enum Unit {
    Block(ResBlock),
    Group { blocks: Vec<ResBlock>, tail: Conv },
}

/// Tape handles produced by a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub sr: Var,
    /// Trunk state at each requested unit boundary, in request order.
    pub taps: Vec<Var>,
    /// Head output, reused as the global-skip input by
    /// [`SrModel::forward_from`].
    pub head: Var,
}

#[derive(Clone, Debug)]
pub struct SrModel<T> {
    spec: NetworkSpec,
    role: Role,
    frozen: bool,
    params: ParamStore<T>,
    head: Conv,
    units: Vec<Unit>,
    body_tail: Conv,
    upsampler: Vec<(Conv, usize)>,
    tail: Conv,
}

impl<T: Real> SrModel<T> {
    /// Builds a freshly initialised network; deterministic in `seed`.
    pub fn build(spec: NetworkSpec, role: Role, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = spec.channels;
        let head = Conv::new(&mut p, &mut rng, "head", 3, c, 3)?;
        let block = |p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str| -> Result<ResBlock> {
            let conv1 = Conv::new(p, rng, &format!("{name}.conv1"), c, c, 3)?;
            let conv2 = Conv::new(p, rng, &format!("{name}.conv2"), c, c, 3)?;
            let attention = match spec.arch {
                Arch::Edsr => None,
                Arch::Rcan => {
                    let r = spec.attention_width();
                    Some(ChannelAttention {
                        down: Conv::new(p, rng, &format!("{name}.ca.down"), c, r, 1)?,
                        up: Conv::new(p, rng, &format!("{name}.ca.up"), r, c, 1)?,
                    })
                }
            };
            Ok(ResBlock {
                conv1,
                conv2,
                attention,
            })
        };
        let mut units = Vec::with_capacity(spec.units());
        match spec.arch {
            Arch::Edsr => {
                for i in 0..spec.blocks {
                    units.push(Unit::Block(block(&mut p, &mut rng, &format!("body.{i}"))?));
                }
            }
            Arch::Rcan => {
                for gi in 0..spec.groups {
                    let blocks = (0..spec.blocks)
                        .map(|i| block(&mut p, &mut rng, &format!("body.{gi}.block.{i}")))
                        .collect::<Result<Vec<_>>>()?;
                    let tail = Conv::new(&mut p, &mut rng, &format!("body.{gi}.tail"), c, c, 3)?;
                    units.push(Unit::Group { blocks, tail });
                }
            }
        }
        let body_tail = Conv::new(&mut p, &mut rng, "body_tail", c, c, 3)?;
        let upsampler = spec
            .upsample_stages()
            .into_iter()
            .enumerate()
            .map(|(i, r)| Ok((Conv::new(&mut p, &mut rng, &format!("upsample.{i}"), c, c * r * r, 3)?, r)))
            .collect::<Result<Vec<_>>>()?;
        let tail = Conv::new(&mut p, &mut rng, "tail", c, 3, 3)?;
        Ok(Self {
            spec,
            role,
            frozen: role == Role::Teacher,
            params: p,
            head,
            units,
            body_tail,
            upsampler,
            tail,
        })
    }

    /// Rebuilds a network around stored arrays, which must match the layout
    /// implied by `spec` exactly.
    pub fn from_params(spec: NetworkSpec, role: Role, params: &ParamStore<T>) -> Result<Self> {
        let mut model = Self::build(spec, role, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Mutable parameter access; `None` for frozen models.
    pub fn params_mut(&mut self) -> Option<&mut ParamStore<T>> {
        (!self.frozen).then_some(&mut self.params)
    }

    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Real>(&self) -> SrModel<U> {
        SrModel {
            spec: self.spec,
            role: self.role,
            frozen: self.frozen,
            params: self.params.cast(),
            head: self.head,
            units: self.units.clone(),
            body_tail: self.body_tail,
            upsampler: self.upsampler.clone(),
            tail: self.tail,
        }
    }

    /// Puts the parameters on the tape; frozen models bind as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g, !self.frozen)
    }

    fn block_forward(&self, g: &mut Graph<T>, p: &Bound, b: &ResBlock, x: Var) -> Result<Var> {
        let h = b.conv1.apply(g, p, x)?;
        let h = g.relu(h);
        let mut h = b.conv2.apply(g, p, h)?;
        if let Some(ca) = &b.attention {
            let s = g.global_avg_pool(h);
            let s = ca.down.apply(g, p, s)?;
            let s = g.relu(s);
            let s = ca.up.apply(g, p, s)?;
            let s = g.sigmoid(s);
            h = g.channel_gate(h, s)?;
        }
        let rs = self.spec.effective_res_scale();
        if rs != 1.0 {
            h = g.scale(h, rs);
        }
        g.add(x, h)
    }

    fn unit_forward(&self, g: &mut Graph<T>, p: &Bound, unit: &Unit, x: Var) -> Result<Var> {
        match unit {
            Unit::Block(b) => self.block_forward(g, p, b, x),
            Unit::Group { blocks, tail } => {
                let mut h = x;
                for b in blocks {
                    h = self.block_forward(g, p, b, h)?;
                }
                let h = tail.apply(g, p, h)?;
                g.add(x, h)
            }
        }
    }

    /// Body tail, global skip, upsampler and output convolution.
    fn reconstruct(&self, g: &mut Graph<T>, p: &Bound, trunk: Var, head: Var) -> Result<Var> {
        let h = self.body_tail.apply(g, p, trunk)?;
        let mut h = g.add(h, head)?;
        for (conv, r) in &self.upsampler {
            h = conv.apply(g, p, h)?;
            h = g.pixel_shuffle(h, *r)?;
        }
        self.tail.apply(g, p, h)
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.c != 3 {
            return Err(Error::Dimension(format!("expected RGB input, got {s}")));
        }
        if s.h < 8 || s.w < 8 {
            return Err(Error::Dimension(format!(
                "input {s} smaller than the 8x8 minimum"
            )));
        }
        Ok(())
    }

    /// Full forward pass. `taps` lists unit boundaries (1-based, strictly
    /// increasing) at which the trunk state is recorded.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var, taps: &[usize]) -> Result<ForwardPass> {
        self.check_input(g, x)?;
        let n_units = self.units.len();
        if taps.windows(2).any(|w| w[0] >= w[1]) || taps.iter().any(|&t| t == 0 || t > n_units) {
            return Err(Error::Config(format!(
                "tap indices {taps:?} invalid for {n_units} units"
            )));
        }
        let head = self.head.apply(g, p, x)?;
        let mut trunk = head;
        let mut recorded = Vec::with_capacity(taps.len());
        let mut next = taps.iter().peekable();
        for (i, unit) in self.units.iter().enumerate() {
            trunk = self.unit_forward(g, p, unit, trunk)?;
            if next.peek().is_some_and(|&&t| t == i + 1) {
                recorded.push(trunk);
                next.next();
            }
        }
        let sr = self.reconstruct(g, p, trunk, head)?;
        Ok(ForwardPass {
            sr,
            taps: recorded,
            head,
        })
    }

    /// Resumes propagation with `feature` substituted for the trunk state
    /// after unit `unit` (1-based). `head` is the head output cached by the
    /// full forward pass of the same input and supplies the global skip.
    pub fn forward_from(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        unit: usize,
        feature: Var,
        head: Var,
    ) -> Result<Var> {
        let n_units = self.units.len();
        if unit == 0 || unit > n_units {
            return Err(Error::Config(format!(
                "resume position {unit} outside 1..={n_units}"
            )));
        }
        let fs = g.shape(feature);
        let hs = g.shape(head);
        if fs.c != self.spec.channels {
            return Err(Error::Dimension(format!(
                "feature width {} does not match network width {}",
                fs.c, self.spec.channels
            )));
        }
        if fs != hs {
            return Err(Error::Dimension(format!(
                "feature {fs} does not match cached head {hs}"
            )));
        }
        let mut trunk = feature;
        for u in &self.units[unit..] {
            trunk = self.unit_forward(g, p, u, trunk)?;
        }
        self.reconstruct(g, p, trunk, head)
    }

    /// Inference on a batch without recording gradients.
    pub fn upscale(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(lr.clone());
        let out = self.forward(&mut g, &p, x, &[])?;
        Ok(g.value(out.sr).clone())
    }

    /// Output shape for an input batch shape.
    pub fn output_shape(&self, input: Shape) -> Shape {
        Shape::new(input.n, 3, input.h * self.spec.scale, input.w * self.spec.scale)
    }
}
