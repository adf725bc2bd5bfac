mod common;

use common::{random_teacher, teacher_checkpoint, tiny_config};
use mipkd::backbone::{NetworkSpec, Role, SrModel};
use mipkd::checkpoint::{self, Manifest};
use mipkd::config::Method;
use mipkd::data::Dataset;
use mipkd::graph::Graph;
use mipkd::optim::{lr_at, Adam};
use mipkd::params::ParamStore;
use mipkd::train::{collect_reports, distill_chain, evaluate, plan_chain, summarize, train, Trainer};
use mipkd::Error;

fn trainer(method: Method, dir: &std::path::Path) -> Trainer {
    let mut cfg = tiny_config(method, dir);
    cfg.teacher_ckpt = Some(teacher_checkpoint(dir, cfg.teacher_spec, 11));
    Trainer::new(cfg).unwrap()
}

#[test]
fn scratch_follows_a_plain_l1_adam_loop() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(Method::Scratch, dir.path());
    let cfg = t.config().clone();
    let mut model = SrModel::<f32>::build(cfg.student_spec, Role::Student, cfg.seed).unwrap();
    let mut adam = Adam::new(cfg.optimizer, model.params());
    for it in 0..5 {
        let batch = t.batch_for(it).unwrap();
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let x = g.constant(batch.lr.clone());
        let y = g.constant(batch.hr.clone());
        let out = model.forward(&mut g, &p, x, &[]).unwrap();
        let loss = g.mae(out.sr, y).unwrap();
        let grads = g.backward(loss).unwrap();
        let rec = t.step().unwrap();
        assert_eq!(rec.loss.total, g.value(loss).item() as f64);
        assert_eq!(rec.loss.rec, rec.loss.total);
        adam.step(model.params_mut().unwrap(), &p, &grads, cfg.lr);
    }
    for (name, w) in model.params().iter() {
        let id = t.student().params().id(name).unwrap();
        assert_eq!(t.student().params().get(id), w, "{name}");
    }
}

#[test]
fn dropped_positions_leave_rec_logits_and_feature_terms() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(Method::Mipkd, dir.path());
    cfg.teacher_ckpt = Some(teacher_checkpoint(dir.path(), cfg.teacher_spec, 11));
    cfg.blockmix.keep_prob = 0.0;
    let w = cfg.weights;
    let mut t = Trainer::new(cfg).unwrap();
    for _ in 0..5 {
        let rec = t.step().unwrap();
        let l = &rec.loss;
        assert!(l.block_per_tap.iter().all(Option::is_none));
        assert!(rec.routing.iter().all(|r| !r.keep));
        let want = w.lambda_rec * l.rec + w.lambda_kd * l.logits + w.lambda_feat * (l.feat_sum() + l.ae_sum());
        assert!((l.total - want).abs() <= 1e-7 * want.abs());
    }
}

#[test]
fn replay_reproduces_the_logged_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(Method::Mipkd, dir.path());
    for _ in 0..3 {
        t.step().unwrap();
    }
    let replayed = t.replay(3).unwrap();
    let rec = t.step().unwrap();
    assert_eq!(rec.iteration, 3);
    assert_eq!(rec.loss, replayed);
    assert_eq!(rec.mask_seeds, t.state_for(3).mask_seeds);
}

#[test]
fn every_method_steps_without_touching_the_teacher() {
    let dir = tempfile::tempdir().unwrap();
    for method in [Method::Scratch, Method::Logits, Method::At, Method::Fitnet, Method::Fakd, Method::Mipkd] {
        let mut t = trainer(method, dir.path());
        let before = t.networks().teacher.as_ref().map(|m| m.params().clone());
        for _ in 0..2 {
            let rec = t.step().unwrap();
            assert!(rec.teacher_grads_absent);
            assert!(rec.loss.total.is_finite());
        }
        let after = t.networks().teacher.as_ref().map(|m| m.params().clone());
        assert_eq!(before.map(|p| dump(&p)), after.map(|p| dump(&p)), "{method}");
        assert_eq!(t.networks().teacher.is_some(), method.needs_teacher());
    }
}

fn dump(p: &ParamStore<f32>) -> Vec<(String, Vec<f32>)> {
    p.iter().map(|(n, t)| (n.to_string(), t.data().to_vec())).collect()
}

#[test]
fn non_finite_loss_aborts_naming_the_term() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Method::Logits, dir.path());
    let mut teacher = random_teacher(cfg.teacher_spec, 3);
    teacher.set_frozen(false);
    let store = teacher.params_mut().unwrap();
    let id = store.id("tail.bias").unwrap();
    store.get_mut(id).data_mut()[0] = f32::NAN;
    teacher.set_frozen(true);
    let ds = Dataset::load(&cfg.dataset).unwrap();
    let mut t = Trainer::with_parts(cfg, Some(teacher), ds).unwrap();
    match t.step() {
        Err(Error::NonFinite { term, iteration }) => {
            assert_eq!(term, "logits");
            assert_eq!(iteration, 0);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn learning_rate_steps_down_tenfold() {
    assert_eq!(lr_at(0, 1e-4, 100_000, 0.1), 1e-4);
    assert_eq!(lr_at(99_999, 1e-4, 100_000, 0.1), 1e-4);
    assert!((lr_at(100_000, 1e-4, 100_000, 0.1) - 1e-5).abs() < 1e-18);
    assert!((lr_at(200_000, 1e-4, 100_000, 0.1) - 1e-6).abs() < 1e-18);
    assert_eq!(lr_at(5, 1e-3, 0, 0.1), 1e-3);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(Method::Scratch, dir.path());
    cfg.lr_decay_every = 2;
    let mut t = Trainer::new(cfg).unwrap();
    let lrs: Vec<f64> = (0..5).map(|_| t.step().unwrap().lr).collect();
    assert_eq!(lrs[..2], [1e-3, 1e-3]);
    assert!((lrs[2] - 1e-4).abs() < 1e-15 && (lrs[4] - 1e-5).abs() < 1e-15);
}

#[test]
fn identical_runs_write_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(Method::Mipkd, &dir.path().join("a"));
    cfg.teacher_ckpt = Some(teacher_checkpoint(dir.path(), cfg.teacher_spec, 11));
    let a = train(&cfg).unwrap();
    cfg.out_dir = dir.path().join("b");
    let b = train(&cfg).unwrap();
    assert_eq!(std::fs::read(&a.student_ckpt).unwrap(), std::fs::read(&b.student_ckpt).unwrap());
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.losses_csv(), b.losses_csv());
    cfg.seed = 1;
    cfg.out_dir = dir.path().join("c");
    let c = train(&cfg).unwrap();
    assert_ne!(a.curve, c.curve);
}

#[test]
fn run_directory_holds_config_curve_report_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(Method::Scratch, dir.path());
    cfg.ckpt_every = 4;
    cfg.eval_every = 5;
    let r = train(&cfg).unwrap();
    assert_eq!(r.run_dir, dir.path().join("scratch_edsr_2x_0"));
    for f in ["config.toml", "losses.csv", "report.json", "student.ckpt", "student_0000004.ckpt", "student_0000008.ckpt"] {
        assert!(r.run_dir.join(f).is_file(), "{f}");
    }
    assert_eq!(r.checkpoints.len(), 3);
    assert_eq!(r.evals.iter().map(|e| e.iteration).collect::<Vec<_>>(), [5, 10]);
    let csv = std::fs::read_to_string(r.run_dir.join("losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    let saved = mipkd::config::TrainConfig::load(&r.run_dir.join("config.toml"), &[]).unwrap();
    assert_eq!(saved.student_spec, cfg.student_spec);
    assert_eq!(collect_reports(dir.path()).unwrap(), vec![r.clone()]);
    let (csv, md) = summarize(&[r]);
    assert!(csv.starts_with("run,method,dataset,psnr,ssim\nbicubic,"));
    assert!(md.contains("scratch_edsr_2x_0"));
}

#[test]
fn bicubic_baseline_matches_the_pseudo_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Method::Scratch, dir.path());
    let r = train(&cfg).unwrap();
    let path = dir.path().join("bicubic.ckpt");
    checkpoint::save(&path, &Manifest::bicubic(2), &ParamStore::new()).unwrap();
    assert_eq!(evaluate(&path, &cfg.eval_datasets).unwrap(), r.baseline_eval);
}

#[test]
fn evaluation_is_deterministic_and_accepts_no_sets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Method::Scratch, dir.path());
    let r = train(&cfg).unwrap();
    let a = evaluate(&r.student_ckpt, &cfg.eval_datasets).unwrap();
    assert_eq!(a, evaluate(&r.student_ckpt, &cfg.eval_datasets).unwrap());
    assert_eq!(a, r.final_eval);
    assert!(evaluate(&r.student_ckpt, &[]).unwrap().is_empty());
    assert!(evaluate(&dir.path().join("missing.ckpt"), &cfg.eval_datasets).is_err());
}

#[test]
fn chain_stages_match_standalone_runs() {
    let dir = tempfile::tempdir().unwrap();
    let first = tiny_config(Method::Scratch, &dir.path().join("chain"));
    let mut second = tiny_config(Method::Logits, &dir.path().join("chain"));
    second.teacher_spec = first.student_spec;
    second.student_spec = NetworkSpec::edsr(4, 1, 2);
    let reports = distill_chain(&[first.clone(), second.clone()]).unwrap();
    assert_eq!(reports[1].teacher_ckpt.as_ref(), Some(&reports[0].student_ckpt));

    let mut alone = second.clone();
    alone.out_dir = dir.path().join("alone");
    alone.teacher_ckpt = Some(reports[0].student_ckpt.clone());
    let direct = train(&alone).unwrap();
    assert_eq!(
        std::fs::read(&direct.student_ckpt).unwrap(),
        std::fs::read(&reports[1].student_ckpt).unwrap()
    );

    let mut single = first.clone();
    single.out_dir = dir.path().join("single");
    let chained = distill_chain(std::slice::from_ref(&single)).unwrap();
    single.out_dir = dir.path().join("plain");
    assert_eq!(chained[0].curve, train(&single).unwrap().curve);
}

#[test]
fn colliding_stage_names_get_stage_directories() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = tiny_config(Method::Mipkd, dir.path());
    a.teacher_ckpt = Some(teacher_checkpoint(dir.path(), a.teacher_spec, 1));
    let mut b = tiny_config(Method::Mipkd, dir.path());
    b.teacher_spec = a.student_spec;
    b.student_spec = NetworkSpec::edsr(4, 1, 2);
    b.taps.count = 1;
    let planned = plan_chain(&[a, b]).unwrap();
    assert_eq!(planned[0].out_dir, dir.path().join("stage0"));
    assert_eq!(planned[1].teacher_ckpt, Some(dir.path().join("stage0/mipkd_edsr_2x_0/student.ckpt")));
}

#[test]
fn mismatched_teacher_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(Method::Logits, dir.path());
    cfg.teacher_ckpt = Some(teacher_checkpoint(dir.path(), NetworkSpec::edsr(8, 2, 2), 0));
    let err = Trainer::new(cfg).unwrap_err().to_string();
    assert!(err.contains("teacher checkpoint"), "{err}");
}
