//! The training loop, multi-stage distillation and checkpoint evaluation.
//!
//! Every stochastic draw of iteration `i` (patch batch, masks, routing) comes
//! from its own generator seeded by `(seed, i, stream)`, so any iteration can
//! be regenerated and replayed without running the ones before it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Role, SrModel, TapSet};
use crate::blockmix::{block_mix_loss, mixed_forward, sample_routing, BlockMixConfig, MixContext, RoutingDecision, Side};
use crate::checkpoint::{self, sha256_file};
use crate::config::{Method, TrainConfig};
use crate::data::{sample_batch, Dataset, DatasetSpec, PatchBatch};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    at_loss, compose, fakd_affinity_loss, fitnet_loss, logits_loss, rec_loss, LossBreakdown, LossTerms, LossWeights,
};
use crate::metrics::{evaluate_model, markdown_table, Bicubic, EvalReport};
use crate::mixer::{feature_mixer_loss, generate_mask, Mask3D, MixerBundle, MixerConfig};
use crate::optim::{lr_at, Adam};
use crate::params::{Bound, Conv, ParamStore};
use crate::tensor::{Real, Tensor};

const STREAM_DATA: u64 = 1;
const STREAM_ROUTING: u64 = 2;
const STREAM_MIXER_INIT: u64 = 3;
const STREAM_HINT_INIT: u64 = 4;
const STREAM_MASK: u64 = 1 << 32;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the generator for `stream` at `iteration`.
pub fn stream_seed(seed: u64, iteration: usize, stream: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ iteration as u64) ^ stream)
}

/// FitNet hint adapters, one 1x1 convolution per tap.
#[derive(Clone, Debug)]
pub struct Hints<T> {
    pub params: ParamStore<T>,
    pub convs: Vec<Conv>,
}

impl<T: Real> Hints<T> {
    pub fn build(student_width: usize, teacher_width: usize, taps: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let convs = (0..taps)
            .map(|k| Conv::new(&mut params, &mut rng, &format!("hint.{k}"), student_width, teacher_width, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params, convs })
    }

    pub fn cast<U: Real>(&self) -> Hints<U> {
        Hints {
            params: self.params.cast(),
            convs: self.convs.clone(),
        }
    }
}

/// All networks taking part in one objective.
#[derive(Clone, Debug)]
pub struct Networks<T> {
    pub student: SrModel<T>,
    pub teacher: Option<SrModel<T>>,
    pub bundle: Option<MixerBundle<T>>,
    pub hints: Option<Hints<T>>,
}

impl<T: Real> Networks<T> {
    pub fn cast<U: Real>(&self) -> Networks<U> {
        Networks {
            student: self.student.cast(),
            teacher: self.teacher.as_ref().map(|t| t.cast()),
            bundle: self.bundle.as_ref().map(|b| b.cast()),
            hints: self.hints.as_ref().map(|h| h.cast()),
        }
    }
}

/// The loss-defining part of a run configuration.
#[derive(Clone, Debug)]
pub struct Objective {
    pub method: Method,
    pub weights: LossWeights,
    pub mixer: MixerConfig,
    pub blockmix: BlockMixConfig,
    pub taps: TapSet,
}

impl Objective {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let taps = if cfg.method.uses_taps() {
            cfg.taps.resolve(&cfg.student_spec, &cfg.teacher_spec)?
        } else {
            TapSet { positions: vec![] }
        };
        Ok(Self {
            method: cfg.method,
            weights: cfg.weights,
            mixer: cfg.mixer,
            blockmix: cfg.blockmix,
            taps,
        })
    }
}

/// Stochastic state of one iteration. `masks` pins the masks instead of
/// drawing them from `mask_seeds`.
#[derive(Clone, Debug)]
pub struct IterState {
    pub iteration: usize,
    pub mask_seeds: Vec<u64>,
    pub routing: Vec<RoutingDecision>,
    pub masks: Option<Vec<Mask3D>>,
}

impl IterState {
    pub fn generate(seed: u64, iteration: usize, taps: usize, blockmix: &BlockMixConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, iteration, STREAM_ROUTING));
        Self {
            iteration,
            mask_seeds: (0..taps)
                .map(|k| stream_seed(seed, iteration, STREAM_MASK + k as u64))
                .collect(),
            routing: sample_routing(blockmix, taps, &mut rng),
            masks: None,
        }
    }
}

/// A built objective: the scalar loss, its parts and the tape handles of
/// every parameter group.
pub struct Built {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub student: Bound,
    pub teacher: Option<Bound>,
    pub bundle: Option<Bound>,
    pub hints: Option<Bound>,
    pub masks: Vec<Mask3D>,
}

/// Records the full objective of one iteration on `g`.
pub fn build_objective<T: Real>(
    g: &mut Graph<T>,
    obj: &Objective,
    nets: &Networks<T>,
    lr: &Tensor<T>,
    hr: &Tensor<T>,
    state: &IterState,
) -> Result<Built> {
    let student_b = nets.student.bind(g);
    let x = g.constant(lr.clone());
    let y = g.constant(hr.clone());
    let uses_taps = obj.method.uses_taps();
    let s_taps = if uses_taps { obj.taps.student_indices() } else { vec![] };
    let s = nets.student.forward(g, &student_b, x, &s_taps)?;
    let mut terms = LossTerms {
        rec: Some(rec_loss(g, s.sr, y)?),
        ..LossTerms::default()
    };
    let mut built_teacher = None;
    let mut built_bundle = None;
    let mut built_hints = None;
    let mut masks = Vec::new();

    if obj.method.needs_teacher() {
        let teacher = nets
            .teacher
            .as_ref()
            .ok_or_else(|| Error::Config(format!("method {} needs a teacher", obj.method)))?;
        let teacher_b = teacher.bind(g);
        let t_taps = if uses_taps { obj.taps.teacher_indices() } else { vec![] };
        let t = teacher.forward(g, &teacher_b, x, &t_taps)?;
        let k_taps = obj.taps.len();
        match obj.method {
            Method::Scratch => unreachable!("scratch has no teacher"),
            Method::Logits => terms.logits = Some(logits_loss(g, s.sr, t.sr)?),
            Method::At => {
                for k in 0..k_taps {
                    terms.feat.push(at_loss(g, s.taps[k], t.taps[k])?);
                }
            }
            Method::Fakd => {
                for k in 0..k_taps {
                    terms.feat.push(fakd_affinity_loss(g, s.taps[k], t.taps[k])?);
                }
            }
            Method::Fitnet => {
                let hints = nets
                    .hints
                    .as_ref()
                    .ok_or_else(|| Error::Config("fitnet needs hint adapters".into()))?;
                let hb = hints.params.bind(g, true);
                for k in 0..k_taps {
                    terms.feat.push(fitnet_loss(g, &hb, &hints.convs[k], s.taps[k], t.taps[k])?);
                }
                built_hints = Some(hb);
            }
            Method::Mipkd => {
                let bundle = nets
                    .bundle
                    .as_ref()
                    .ok_or_else(|| Error::Config("mipkd needs a mixer bundle".into()))?;
                if state.routing.len() != k_taps || state.mask_seeds.len() != k_taps {
                    return Err(Error::Config(format!(
                        "iteration state covers {} taps, objective has {k_taps}",
                        state.routing.len()
                    )));
                }
                if let Some(m) = &state.masks {
                    if m.len() != k_taps {
                        return Err(Error::Config(format!("{} pinned masks for {k_taps} taps", m.len())));
                    }
                }
                terms.logits = Some(logits_loss(g, s.sr, t.sr)?);
                let bb = bundle.bind(g);
                for k in 0..k_taps {
                    let lat = bundle.encode_pair(g, &bb, s.taps[k], t.taps[k])?;
                    let mask = match &state.masks {
                        Some(m) => m[k].clone(),
                        None => generate_mask(
                            &obj.mixer,
                            g.shape(lat.z_student),
                            Some((g.value(lat.z_student), g.value(lat.z_teacher))),
                            state.mask_seeds[k],
                        )?,
                    };
                    let enhanced = bundle.fuse_and_decode(g, &bb, lat, &mask)?;
                    terms.feat.push(feature_mixer_loss(g, enhanced, t.taps[k])?);
                    if obj.mixer.ae_loss_enabled {
                        terms
                            .ae
                            .push(bundle.autoencoder_loss_from_latent(g, &bb, &obj.mixer, lat.z_teacher, t.taps[k])?);
                    }
                    let ctx = MixContext {
                        teacher: Side {
                            model: teacher,
                            params: &teacher_b,
                            head: t.head,
                        },
                        student: Side {
                            model: &nets.student,
                            params: &student_b,
                            head: s.head,
                        },
                        bundle,
                        bundle_params: &bb,
                        taps: &obj.taps,
                    };
                    let block = match mixed_forward(g, &ctx, enhanced, state.routing[k])? {
                        Some(mixed) => Some(block_mix_loss(g, mixed, t.sr, y, &obj.blockmix)?),
                        None => None,
                    };
                    terms.block.push(block);
                    masks.push(mask);
                }
                built_bundle = Some(bb);
            }
        }
        built_teacher = Some(teacher_b);
    }

    let (loss, breakdown) = compose(g, &terms, &obj.weights)?;
    Ok(Built {
        loss,
        breakdown,
        student: student_b,
        teacher: built_teacher,
        bundle: built_bundle,
        hints: built_hints,
        masks,
    })
}

/// One logged iteration.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub mask_seeds: Vec<u64>,
    pub mask_ones: Vec<usize>,
    pub routing: Vec<RoutingDecision>,
    /// No teacher parameter received a gradient buffer.
    pub teacher_grads_absent: bool,
}

/// Training state for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    objective: Objective,
    nets: Networks<f32>,
    dataset: Dataset,
    adam_student: Adam<f32>,
    adam_bundle: Option<Adam<f32>>,
    adam_hints: Option<Adam<f32>>,
    iteration: usize,
}

/// Loads a checkpoint as a frozen teacher of the expected spec.
pub fn load_teacher(path: &Path, cfg: &TrainConfig) -> Result<SrModel<f32>> {
    let (manifest, params) = checkpoint::load(path)?;
    let spec = manifest
        .spec
        .ok_or_else(|| Error::Config(format!("{} holds no network", path.display())))?;
    if spec != cfg.teacher_spec {
        return Err(Error::Config(format!(
            "teacher checkpoint {} has spec {spec:?}, config expects {:?}",
            path.display(),
            cfg.teacher_spec
        )));
    }
    SrModel::from_params(spec, Role::Teacher, &params)
}

impl Trainer {
    /// Validates `cfg`, loads the teacher checkpoint and the dataset.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let teacher = match (&cfg.teacher_ckpt, cfg.method.needs_teacher()) {
            (Some(path), true) => Some(load_teacher(path, &cfg)?),
            _ => None,
        };
        let dataset = Dataset::load(&cfg.dataset)?;
        Self::with_parts(cfg, teacher, dataset)
    }

    /// As [`Trainer::new`] with an in-memory teacher and dataset.
    pub fn with_parts(cfg: TrainConfig, teacher: Option<SrModel<f32>>, dataset: Dataset) -> Result<Self> {
        let objective = Objective::from_config(&cfg)?;
        let student = SrModel::build(cfg.student_spec, Role::Student, cfg.seed)?;
        if let Some(t) = &teacher {
            if !t.frozen() {
                return Err(Error::Config("teacher must be frozen".into()));
            }
        }
        let (cs, ct) = (cfg.student_spec.channels, cfg.teacher_spec.channels);
        let k = objective.taps.len();
        let bundle = (cfg.method == Method::Mipkd)
            .then(|| MixerBundle::build(&cfg.mixer, cs, ct, k, stream_seed(cfg.seed, 0, STREAM_MIXER_INIT)))
            .transpose()?;
        let hints = (cfg.method == Method::Fitnet)
            .then(|| Hints::build(cs, ct, k, stream_seed(cfg.seed, 0, STREAM_HINT_INIT)))
            .transpose()?;
        let adam_student = Adam::new(cfg.optimizer, student.params());
        let adam_bundle = bundle.as_ref().map(|b| Adam::new(cfg.optimizer, b.params()));
        let adam_hints = hints.as_ref().map(|h| Adam::new(cfg.optimizer, &h.params));
        Ok(Self {
            objective,
            nets: Networks {
                student,
                teacher,
                bundle,
                hints,
            },
            dataset,
            adam_student,
            adam_bundle,
            adam_hints,
            iteration: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn networks(&self) -> &Networks<f32> {
        &self.nets
    }

    pub fn student(&self) -> &SrModel<f32> {
        &self.nets.student
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn batch_for(&self, iteration: usize) -> Result<PatchBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, iteration, STREAM_DATA));
        sample_batch(&self.dataset, &self.cfg.dataset, self.cfg.batch, &mut rng)
    }

    pub fn state_for(&self, iteration: usize) -> IterState {
        IterState::generate(self.cfg.seed, iteration, self.objective.taps.len(), &self.cfg.blockmix)
    }

    /// Loss of `iteration`'s regenerated batch and state under the current
    /// parameters, without updating anything.
    pub fn replay(&self, iteration: usize) -> Result<LossBreakdown> {
        let batch = self.batch_for(iteration)?;
        let state = self.state_for(iteration);
        let mut g = Graph::new();
        Ok(build_objective(&mut g, &self.objective, &self.nets, &batch.lr, &batch.hr, &state)?.breakdown)
    }

    /// One forward/backward pass and optimizer update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let it = self.iteration;
        let batch = self.batch_for(it)?;
        let state = self.state_for(it);
        let mut g = Graph::new();
        let built = build_objective(&mut g, &self.objective, &self.nets, &batch.lr, &batch.hr, &state)?;
        if let Some(term) = built.breakdown.non_finite_term() {
            return Err(Error::NonFinite { term, iteration: it });
        }
        let grads = g.backward(built.loss)?;
        let trainable = [Some(&built.student), built.bundle.as_ref(), built.hints.as_ref()];
        for b in trainable.into_iter().flatten() {
            if b.vars().iter().any(|&v| grads.get(v).is_some_and(|t| !t.all_finite())) {
                return Err(Error::NonFinite {
                    term: "gradient".into(),
                    iteration: it,
                });
            }
        }
        let teacher_grads_absent = built
            .teacher
            .as_ref()
            .is_none_or(|tb| tb.vars().iter().all(|&v| grads.get(v).is_none()));
        let lr = lr_at(it, self.cfg.lr, self.cfg.lr_decay_every, self.cfg.lr_decay_factor);
        let store = self
            .nets
            .student
            .params_mut()
            .ok_or_else(|| Error::Config("student is frozen".into()))?;
        self.adam_student.step(store, &built.student, &grads, lr);
        if let (Some(bundle), Some(adam), Some(bb)) = (&mut self.nets.bundle, &mut self.adam_bundle, &built.bundle) {
            adam.step(bundle.params_mut(), bb, &grads, lr);
        }
        if let (Some(hints), Some(adam), Some(hb)) = (&mut self.nets.hints, &mut self.adam_hints, &built.hints) {
            adam.step(&mut hints.params, hb, &grads, lr);
        }
        self.iteration += 1;
        Ok(StepRecord {
            iteration: it,
            lr,
            loss: built.breakdown,
            mask_seeds: state.mask_seeds,
            mask_ones: built.masks.iter().map(Mask3D::ones).collect(),
            routing: state.routing,
            teacher_grads_absent,
        })
    }
}

/// Mean of the first and last `window` totals; the window is a tenth of the
/// curve, at most 50 points.
pub fn smoothed_endpoints(totals: &[f64]) -> (f64, f64) {
    if totals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let w = (totals.len() / 10).clamp(1, 50);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&totals[..w]), mean(&totals[totals.len() - w..]))
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub reports: Vec<EvalReport>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub config: TrainConfig,
    pub run_dir: PathBuf,
    pub curve: Vec<StepRecord>,
    pub evals: Vec<EvalPoint>,
    pub final_eval: Vec<EvalReport>,
    /// Bicubic interpolation on the same evaluation sets.
    pub baseline_eval: Vec<EvalReport>,
    pub student_ckpt: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_ckpt: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_sha256_before: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_sha256_after: Option<String>,
    pub teacher_grads_absent: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("iteration,lr,rec,logits,feat,ae,block,total\n");
        for r in &self.curve {
            let l = &r.loss;
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.iteration,
                r.lr,
                l.rec,
                l.logits,
                l.feat_sum(),
                l.ae_sum(),
                l.block_sum(),
                l.total
            );
        }
        out
    }
}

fn evaluate_sets(model: &SrModel<f32>, sets: &[Dataset]) -> Result<Vec<EvalReport>> {
    sets.iter().map(|d| evaluate_model(model, d)).collect()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains one configuration, writing checkpoints and reports under its run
/// directory.
pub fn train(cfg: &TrainConfig) -> Result<RunReport> {
    let started = Instant::now();
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let teacher_sha256_before = match (&cfg.teacher_ckpt, cfg.method.needs_teacher()) {
        (Some(p), true) => Some(sha256_file(p)?),
        _ => None,
    };
    let mut trainer = Trainer::new(cfg.clone())?;
    let eval_sets = cfg
        .eval_datasets
        .iter()
        .map(Dataset::load)
        .collect::<Result<Vec<_>>>()?;
    write_file(&run_dir.join("config.toml"), cfg.to_toml()?)?;

    let log_every = (cfg.iters / 20).max(1);
    let mut curve = Vec::with_capacity(cfg.iters);
    let mut evals = Vec::new();
    let mut checkpoints = Vec::new();
    for _ in 0..cfg.iters {
        let rec = trainer.step()?;
        let done = rec.iteration + 1;
        if done % log_every == 0 || done == cfg.iters {
            info!("{} iter {done}/{}: loss {:.5}", cfg.run_name(), cfg.iters, rec.loss.total);
        }
        curve.push(rec);
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.iters {
            evals.push(EvalPoint {
                iteration: done,
                reports: evaluate_sets(trainer.student(), &eval_sets)?,
            });
        }
        if cfg.ckpt_every > 0 && done % cfg.ckpt_every == 0 && done < cfg.iters {
            let path = run_dir.join(format!("student_{done:07}.ckpt"));
            checkpoint::save_model(&path, trainer.student(), done, cfg.seed)?;
            checkpoints.push(path);
        }
    }
    let student_ckpt = run_dir.join("student.ckpt");
    checkpoint::save_model(&student_ckpt, trainer.student(), cfg.iters, cfg.seed)?;
    checkpoints.push(student_ckpt.clone());
    let final_eval = evaluate_sets(trainer.student(), &eval_sets)?;
    evals.push(EvalPoint {
        iteration: cfg.iters,
        reports: final_eval.clone(),
    });
    let bicubic = Bicubic {
        scale: cfg.student_spec.scale,
    };
    let baseline_eval = eval_sets
        .iter()
        .map(|d| evaluate_model(&bicubic, d))
        .collect::<Result<Vec<_>>>()?;
    let teacher_sha256_after = match (&cfg.teacher_ckpt, &teacher_sha256_before) {
        (Some(p), Some(_)) => Some(sha256_file(p)?),
        _ => None,
    };
    if teacher_sha256_before != teacher_sha256_after {
        warn!("teacher checkpoint changed during {}", cfg.run_name());
    }
    let totals: Vec<f64> = curve.iter().map(|r: &StepRecord| r.loss.total).collect();
    let (initial_loss, final_loss) = smoothed_endpoints(&totals);
    let report = RunReport {
        name: cfg.run_name(),
        config: cfg.clone(),
        run_dir: run_dir.clone(),
        teacher_grads_absent: curve.iter().all(|r| r.teacher_grads_absent),
        curve,
        evals,
        final_eval,
        baseline_eval,
        student_ckpt,
        checkpoints,
        teacher_ckpt: cfg.teacher_ckpt.clone().filter(|_| cfg.method.needs_teacher()),
        teacher_sha256_before,
        teacher_sha256_after,
        initial_loss,
        final_loss,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_file(&run_dir.join("losses.csv"), report.losses_csv())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(format!("report: {e}")))?;
    write_file(&run_dir.join("report.json"), json)?;
    Ok(report)
}

/// Checks stage compatibility and wires each stage's teacher to the previous
/// stage's student checkpoint. Nothing is trained.
pub fn plan_chain(stages: &[TrainConfig]) -> Result<Vec<TrainConfig>> {
    if stages.is_empty() {
        return Err(Error::Config("distillation chain has no stages".into()));
    }
    let mut planned: Vec<TrainConfig> = stages.to_vec();
    for i in 1..planned.len() {
        if !planned[i].method.needs_teacher() {
            return Err(Error::Config(format!(
                "chain stage {i} uses method {}, which takes no teacher",
                planned[i].method
            )));
        }
        if planned[i].teacher_spec != planned[i - 1].student_spec {
            return Err(Error::Config(format!(
                "chain stage {i} teacher_spec {:?} does not match stage {} student_spec {:?}",
                planned[i].teacher_spec,
                i - 1,
                planned[i - 1].student_spec
            )));
        }
    }
    let names: Vec<PathBuf> = planned.iter().map(TrainConfig::run_dir).collect();
    let collide = (0..names.len()).any(|i| names[i + 1..].contains(&names[i]));
    if collide {
        for (i, stage) in planned.iter_mut().enumerate() {
            stage.out_dir = stage.out_dir.join(format!("stage{i}"));
        }
    }
    for i in 1..planned.len() {
        let prev = planned[i - 1].run_dir().join("student.ckpt");
        planned[i].teacher_ckpt = Some(prev);
    }
    for (i, stage) in planned.iter().enumerate() {
        stage
            .validate()
            .map_err(|e| Error::Config(format!("chain stage {i}: {e}")))?;
    }
    if let Some(p) = planned[0].teacher_ckpt.as_ref().filter(|_| planned[0].method.needs_teacher()) {
        if !p.exists() {
            return Err(Error::Config(format!("chain stage 0 teacher {} not found", p.display())));
        }
    }
    Ok(planned)
}

/// Runs the stages in order; stage `i + 1` is taught by stage `i`'s student.
pub fn distill_chain(stages: &[TrainConfig]) -> Result<Vec<RunReport>> {
    plan_chain(stages)?.iter().map(train).collect()
}

/// Evaluates a checkpoint (network or bicubic pseudo-checkpoint) on each
/// dataset.
pub fn evaluate(ckpt: &Path, datasets: &[DatasetSpec]) -> Result<Vec<EvalReport>> {
    let model = checkpoint::load_upscaler(ckpt)?;
    datasets
        .iter()
        .map(|spec| {
            let ds = Dataset::load(spec).map_err(|e| Error::Data(format!("dataset {}: {e}", spec.name)))?;
            evaluate_model(model.as_ref(), &ds)
        })
        .collect()
}

/// Run reports under `dir`, found at depth one or two, sorted by path.
pub fn collect_reports(dir: &Path) -> Result<Vec<RunReport>> {
    let mut paths = Vec::new();
    let mut stack = vec![(dir.to_path_buf(), 0)];
    while let Some((d, depth)) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() && depth < 2 {
                stack.push((p, depth + 1));
            } else if p.file_name().is_some_and(|n| n == "report.json") {
                paths.push(p);
            }
        }
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// CSV rows and a markdown table of final evaluations, with the bicubic
/// baseline of the first run as the leading row.
pub fn summarize(reports: &[RunReport]) -> (String, String) {
    let mut csv = String::from("run,method,dataset,psnr,ssim\n");
    let mut rows = Vec::new();
    if let Some(first) = reports.first() {
        rows.push(("bicubic".to_string(), first.baseline_eval.clone()));
        for e in &first.baseline_eval {
            let _ = writeln!(csv, "bicubic,bicubic,{},{:.4},{:.6}", e.dataset, e.mean_psnr, e.mean_ssim);
        }
    }
    for r in reports {
        for e in &r.final_eval {
            let _ = writeln!(csv, "{},{},{},{:.4},{:.6}", r.name, r.config.method, e.dataset, e.mean_psnr, e.mean_ssim);
        }
        rows.push((r.name.clone(), r.final_eval.clone()));
    }
    (csv, markdown_table(&rows))
}
