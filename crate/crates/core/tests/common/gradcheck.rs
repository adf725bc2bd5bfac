//! Finite-difference checks of the tape's gradients, in f64.
//!
//! Every objective here is piecewise smooth (ReLU, L1), so a central
//! difference straddling a kink says nothing about the autograd. Each probe
//! therefore also samples `±h/2` and `±h/3`: on a smooth stretch the second
//! differences scale as `1 : 1/4 : 1/9`, and a single kink inside `[-h, h]`
//! breaks at least one ratio. Kinked elements are redrawn.

use mipkd::backbone::{NetworkSpec, Role, SrModel};
use mipkd::blockmix::RoutingDecision;
use mipkd::config::Method;
use mipkd::data::Dataset;
use mipkd::graph::Graph;
use mipkd::mixer::{generate_mask, MixerConfig};
use mipkd::params::ParamStore;
use mipkd::tensor::{Shape, Tensor};
use mipkd::train::{build_objective, IterState, Networks, Objective, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_teacher, tiny_config};

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
/// Largest departure from smooth second-difference scaling, relative to the
/// first-order change `h |f'|`.
const SMOOTH_TOL: f64 = 1e-3;
const DRAWS: usize = 64;
const NEGLIGIBLE: f64 = 1e-9;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Losses with element `index` of `name` shifted by `±d` for each `d`.
fn probe<S>(
    state: &mut S,
    store: impl Fn(&mut S) -> &mut ParamStore<f64>,
    name: &str,
    index: usize,
    steps: &[f64],
    loss: impl Fn(&S, &mut Graph<f64>) -> f64,
) -> Vec<(f64, f64)> {
    let id = store(state).id(name).expect("parameter name");
    let orig = store(state).get(id).data()[index];
    let mut out = Vec::with_capacity(steps.len());
    for &d in steps {
        store(state).get_mut(id).data_mut()[index] = orig + d;
        let up = loss(state, &mut Graph::new());
        store(state).get_mut(id).data_mut()[index] = orig - d;
        let down = loss(state, &mut Graph::new());
        out.push((up, down));
    }
    store(state).get_mut(id).data_mut()[index] = orig;
    out
}

/// Central difference at `h`, or `None` when a kink lies within `[-h, h]`.
fn smooth_central(base: f64, probes: &[(f64, f64)], h: f64) -> Option<f64> {
    let second = |(up, down): (f64, f64)| up - 2.0 * base + down;
    let (full, half, third) = (second(probes[0]), second(probes[1]), second(probes[2]));
    let central = (probes[0].0 - probes[0].1) / (2.0 * h);
    let budget = SMOOTH_TOL * h * central.abs();
    ((full - 4.0 * half).abs() <= budget && (full - 9.0 * third).abs() <= budget).then_some(central)
}

/// One checked element.
#[derive(Clone, Debug)]
pub struct Checked {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Checked {
    pub fn error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

/// Draws elements of `name` until one lies on a smooth stretch and returns
/// its analytic and numeric derivatives.
pub fn check_tensor<S>(
    state: &mut S,
    store: impl Fn(&mut S) -> &mut ParamStore<f64> + Copy,
    name: &str,
    grad: &Tensor<f64>,
    base: f64,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&S, &mut Graph<f64>) -> f64 + Copy,
) -> Result<Checked, String> {
    for _ in 0..DRAWS {
        let index = rng.gen_range(0..grad.data().len());
        let analytic = grad.data()[index];
        if analytic.abs() < NEGLIGIBLE {
            continue;
        }
        let probes = probe(state, store, name, index, &[STEP, STEP / 2.0, STEP / 3.0], loss);
        if let Some(numeric) = smooth_central(base, &probes, STEP) {
            return Ok(Checked {
                name: name.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }
    Err(format!("no smooth element of {name} with a non-negligible gradient in {DRAWS} draws"))
}

#[derive(Clone, Copy, Debug)]
pub enum Group {
    Student,
    Bundle,
    Hints,
}

fn store(nets: &mut Networks<f64>, group: Group) -> &mut ParamStore<f64> {
    match group {
        Group::Student => nets.student.params_mut().expect("trainable student"),
        Group::Bundle => nets.bundle.as_mut().expect("bundle").params_mut(),
        Group::Hints => &mut nets.hints.as_mut().expect("hints").params,
    }
}

/// One objective evaluation point with pinned masks and routing.
pub struct Problem {
    pub objective: Objective,
    pub nets: Networks<f64>,
    pub lr: Tensor<f64>,
    pub hr: Tensor<f64>,
    pub state: IterState,
}

/// A random teacher whose head and tail biases are shifted, so its features
/// and outputs sit away from the untrained student's.
fn offset_teacher(spec: NetworkSpec) -> SrModel<f32> {
    let mut params = random_teacher(spec, 11).params().clone();
    for (name, value) in [("head.bias", 0.4f32), ("tail.bias", 0.3)] {
        let id = params.id(name).unwrap();
        params.get_mut(id).data_mut().fill(value);
    }
    SrModel::from_params(spec, Role::Teacher, &params).unwrap()
}

/// Student EDSR 4/2, teacher EDSR 6/3, two taps, one 8x8 LR patch at x2.
pub fn problem(method: Method) -> Problem {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(method, dir.path());
    cfg.teacher_spec = NetworkSpec::edsr(6, 3, 2);
    cfg.dataset.patch_size_lr = 8;
    cfg.batch = 1;
    let teacher = method.needs_teacher().then(|| offset_teacher(cfg.teacher_spec));
    let dataset = Dataset::load(&cfg.dataset).unwrap();
    let trainer = Trainer::with_parts(cfg, teacher, dataset).unwrap();
    let batch = trainer.batch_for(0).unwrap();
    let mut state = trainer.state_for(0);
    // Tap 0 resumes in the student (through its adapter), tap 1 in the
    // frozen teacher.
    state.routing = (0..state.routing.len())
        .map(|position| RoutingDecision {
            position,
            to_student: position == 0,
            keep: true,
        })
        .collect();
    let nets = trainer.networks().cast::<f64>();
    if let Some(bundle) = &nets.bundle {
        let shape = Shape::new(1, bundle.latent_width(), 8, 8);
        let masks = (0..state.routing.len())
            .map(|k| generate_mask::<f64>(&MixerConfig::default(), shape, None, 100 + k as u64).unwrap())
            .collect();
        state.masks = Some(masks);
    }
    Problem {
        objective: trainer.objective().clone(),
        nets,
        lr: batch.lr.cast(),
        hr: batch.hr.cast(),
        state,
    }
}

fn loss_of(p: &Problem, nets: &Networks<f64>, g: &mut Graph<f64>) -> f64 {
    let built = build_objective(g, &p.objective, nets, &p.lr, &p.hr, &p.state).unwrap();
    g.value(built.loss).item()
}

/// Checks one element of each listed parameter. Fails if a teacher parameter
/// receives a gradient buffer.
pub fn check(p: &Problem, params: &[(Group, &str)]) -> Result<Vec<Checked>, String> {
    let mut g = Graph::new();
    let built = build_objective(&mut g, &p.objective, &p.nets, &p.lr, &p.hr, &p.state).map_err(|e| e.to_string())?;
    let base = g.value(built.loss).item();
    let grads = g.backward(built.loss).map_err(|e| e.to_string())?;
    if let Some(tb) = &built.teacher {
        if tb.vars().iter().any(|&v| grads.get(v).is_some()) {
            return Err("a teacher parameter received a gradient".into());
        }
    }
    let mut nets = p.nets.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut out = Vec::new();
    for &(group, name) in params {
        let bound = match group {
            Group::Student => &built.student,
            Group::Bundle => built.bundle.as_ref().ok_or("no bundle on the tape")?,
            Group::Hints => built.hints.as_ref().ok_or("no hints on the tape")?,
        };
        let id = store(&mut nets, group).id(name).ok_or_else(|| format!("no parameter {name}"))?;
        let grad = grads.get(bound.var(id)).ok_or_else(|| format!("{name} received no gradient"))?;
        out.push(check_tensor(&mut nets, |n| store(n, group), name, grad, base, &mut rng, |n, g| loss_of(p, n, g))?);
    }
    Ok(out)
}

/// Student blocks, both encoders, the decoder and one adapter.
pub const MIPKD_PARAMS: &[(Group, &str)] = &[
    (Group::Student, "head.weight"),
    (Group::Student, "body.0.conv1.weight"),
    (Group::Student, "body.1.conv2.weight"),
    (Group::Student, "body.1.conv1.bias"),
    (Group::Student, "tail.weight"),
    (Group::Bundle, "enc_s.0.weight"),
    (Group::Bundle, "enc_s.1.weight"),
    (Group::Bundle, "enc_t.0.weight"),
    (Group::Bundle, "enc_t.1.weight"),
    (Group::Bundle, "dec.0.weight"),
    (Group::Bundle, "dec.1.weight"),
    (Group::Bundle, "adapter.0.weight"),
    (Group::Bundle, "adapter.0.bias"),
];
