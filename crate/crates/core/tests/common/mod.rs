//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

pub mod gradcheck;

use std::path::{Path, PathBuf};

use mipkd::backbone::{NetworkSpec, Role, SrModel};
use mipkd::checkpoint;
use mipkd::config::{Method, TrainConfig};
use mipkd::data::{DataSource, DatasetSpec};
use mipkd::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn synthetic(name: &str, count: usize, size: usize, seed: u64, patch: usize) -> DatasetSpec {
    DatasetSpec {
        name: name.into(),
        source: DataSource::Synthetic,
        synth_count: count,
        synth_size: size,
        synth_seed: seed,
        patch_size_lr: patch,
        ..DatasetSpec::default()
    }
}

/// A configuration small enough for a few dozen iterations per second.
pub fn tiny_config(method: Method, out_dir: &Path) -> TrainConfig {
    let mut cfg = TrainConfig {
        method,
        iters: 10,
        batch: 2,
        lr: 1e-3,
        out_dir: out_dir.to_path_buf(),
        teacher_spec: NetworkSpec::edsr(8, 4, 2),
        student_spec: NetworkSpec::edsr(4, 2, 2),
        dataset: synthetic("synthetic", 4, 48, 0, 12),
        eval_datasets: vec![synthetic("synthetic_eval", 2, 48, 1, 12)],
        ..TrainConfig::default()
    };
    cfg.taps.count = 2;
    cfg
}

pub fn random_teacher(spec: NetworkSpec, seed: u64) -> SrModel<f32> {
    SrModel::build(spec, Role::Teacher, seed).expect("teacher spec")
}

/// Writes a randomly initialised teacher of `spec` and returns its path.
pub fn teacher_checkpoint(dir: &Path, spec: NetworkSpec, seed: u64) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("teacher.ckpt");
    checkpoint::save_model(&path, &random_teacher(spec, seed), 0, seed).unwrap();
    path
}

pub fn random_tensor(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

pub fn random_image(shape: Shape, seed: u64) -> Tensor<f32> {
    random_tensor(shape, seed, 0.0, 1.0).cast()
}

/// BT.601 studio-swing luma of one pixel.
fn luma(r: f64, g: f64, b: f64) -> f64 {
    (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
}

/// Luma plane of item 0 after shaving `border` pixels, row-major.
fn luma_plane(img: &Tensor<f32>, border: usize) -> (Vec<f64>, usize, usize) {
    let s = img.shape();
    let (h, w) = (s.h - 2 * border, s.w - 2 * border);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let px = |c| img.at(0, c, y + border, x + border) as f64;
            out.push(luma(px(0), px(1), px(2)));
        }
    }
    (out, h, w)
}

/// `10 log10(1 / MSE)` on cropped luma; no cap.
pub fn reference_psnr(a: &Tensor<f32>, b: &Tensor<f32>, border: usize) -> f64 {
    let (ya, _, _) = luma_plane(a, border);
    let (yb, _, _) = luma_plane(b, border);
    let mut sse = 0.0;
    for i in 0..ya.len() {
        sse += (ya[i] - yb[i]) * (ya[i] - yb[i]);
    }
    10.0 * (1.0 / (sse / ya.len() as f64)).log10()
}

/// SSIM on cropped luma with an 11x11 Gaussian window (sigma 1.5) evaluated
/// directly in 2-D, with windowed moments taken about the local means.
pub fn reference_ssim(a: &Tensor<f32>, b: &Tensor<f32>, border: usize) -> f64 {
    let (x, h, w) = luma_plane(a, border);
    let (y, _, _) = luma_plane(b, border);
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / 4.5).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0;
    for oy in 0..=h - 11 {
        for ox in 0..=w - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / total;
                    mx += k * x[(oy + i) * w + ox + j];
                    my += k * y[(oy + i) * w + ox + j];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / total;
                    let dx = x[(oy + i) * w + ox + j] - mx;
                    let dy = y[(oy + i) * w + ox + j] - my;
                    vx += k * dx * dx;
                    vy += k * dy * dy;
                    cxy += k * dx * dy;
                }
            }
            acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}
