//! Luma PSNR/SSIM and whole-dataset evaluation.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::backbone::SrModel;
use crate::data::{bicubic_resize, crop, mod_crop, Dataset, Image};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const PSNR_CAP: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// BT.601 studio-swing luma of every item, `N x 1 x H x W`.
pub fn rgb_to_y(image: &Image) -> Result<Tensor<f64>> {
    let s = image.shape();
    if s.c != 3 {
        return Err(Error::Dimension(format!("luma needs 3 channels, got {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, h, w| {
        let r = image.at(n, 0, h, w) as f64;
        let g = image.at(n, 1, h, w) as f64;
        let b = image.at(n, 2, h, w) as f64;
        (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
    }))
}

/// `10 log10(max^2 / MSE)`, capped at [`PSNR_CAP`] for near-identical inputs.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("psnr of {} and {}", a.shape(), b.shape())));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse < MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Valid-mode separable Gaussian filter of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|j| win[j] * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM of two single-channel images (first item only
/// allowed), dynamic range 1.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let s = a.shape();
    if s != b.shape() {
        return Err(Error::Dimension(format!("ssim of {s} and {}", b.shape())));
    }
    if s.n != 1 || s.c != 1 {
        return Err(Error::Dimension(format!("ssim expects 1x1xHxW, got {s}")));
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::Dimension(format!("ssim needs at least 11x11, got {}x{}", s.h, s.w)));
    }
    let win = gaussian_window();
    let (x, y) = (a.data(), b.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mu_x = filter_valid(x, s.h, s.w, &win);
    let mu_y = filter_valid(y, s.h, s.w, &win);
    let e_xx = filter_valid(&xx, s.h, s.w, &win);
    let e_yy = filter_valid(&yy, s.h, s.w, &win);
    let e_xy = filter_valid(&xy, s.h, s.w, &win);
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cxy = e_xy[i] - mx * my;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

/// Anything that maps an LR batch to an SR batch at a fixed scale.
pub trait Upscaler {
    fn scale(&self) -> usize;
    fn upscale(&self, lr: &Image) -> Result<Image>;
}

impl Upscaler for SrModel<f32> {
    fn scale(&self) -> usize {
        self.spec().scale
    }

    fn upscale(&self, lr: &Image) -> Result<Image> {
        SrModel::upscale(self, lr)
    }
}

/// Plain bicubic interpolation, the reference baseline.
#[derive(Clone, Copy, Debug)]
pub struct Bicubic {
    pub scale: usize,
}

impl Upscaler for Bicubic {
    fn scale(&self) -> usize {
        self.scale
    }

    fn upscale(&self, lr: &Image) -> Result<Image> {
        let s = lr.shape();
        bicubic_resize(lr, s.h * self.scale, s.w * self.scale)
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR hit the cap.
    pub capped: bool,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub per_image: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub scale: usize,
    pub border_crop: usize,
}

impl EvalReport {
    pub fn from_scores(dataset: impl Into<String>, mut per_image: Vec<ImageScore>, scale: usize) -> Self {
        per_image.sort_by(|a, b| a.id.cmp(&b.id));
        let n = per_image.len().max(1) as f64;
        let mean_psnr = per_image.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|s| s.ssim).sum::<f64>() / n;
        Self {
            dataset: dataset.into(),
            per_image,
            mean_psnr,
            mean_ssim,
            scale,
            border_crop: scale,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,id,psnr,ssim\n");
        for s in &self.per_image {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", self.dataset, s.id, s.psnr, s.ssim);
        }
        out
    }
}

/// Scores an SR/HR pair on luma, after shaving `border` pixels per side.
pub fn score_pair(id: &str, sr: &Image, hr: &Image, border: usize) -> Result<ImageScore> {
    if sr.shape() != hr.shape() {
        return Err(Error::Dimension(format!("{id}: sr {} vs hr {}", sr.shape(), hr.shape())));
    }
    let s = hr.shape();
    if s.h <= 2 * border || s.w <= 2 * border {
        return Err(Error::Data(format!("{id}: {s} too small for border {border}")));
    }
    let (h, w) = (s.h - 2 * border, s.w - 2 * border);
    let ys = rgb_to_y(&crop(sr, border, border, h, w)?)?;
    let yh = rgb_to_y(&crop(hr, border, border, h, w)?)?;
    let p = psnr(&ys, &yh, 1.0)?;
    Ok(ImageScore {
        id: id.to_string(),
        psnr: p,
        ssim: ssim(&ys, &yh)?,
        capped: p >= PSNR_CAP,
    })
}

/// Degrades every mod-cropped HR image by bicubic downscaling, upscales it
/// with `model`, and scores the result. Images that fail are skipped; the
/// run fails only if none succeed.
pub fn evaluate_model(model: &dyn Upscaler, dataset: &Dataset) -> Result<EvalReport> {
    let scale = model.scale();
    if dataset.is_empty() {
        return Err(Error::Data(format!("dataset {} is empty", dataset.name)));
    }
    let mut scores = Vec::with_capacity(dataset.len());
    for (id, hr) in dataset.ids.iter().zip(&dataset.hr) {
        let attempt = (|| {
            let hr = mod_crop(hr, scale)?;
            let s = hr.shape();
            let lr = bicubic_resize(&hr, s.h / scale, s.w / scale)?;
            let sr = model.upscale(&lr)?;
            score_pair(id, &sr, &hr, scale)
        })();
        match attempt {
            Ok(score) => scores.push(score),
            Err(e) => warn!("{}: skipping {id}: {e}", dataset.name),
        }
    }
    if scores.is_empty() {
        return Err(Error::Data(format!("every image of {} failed to evaluate", dataset.name)));
    }
    Ok(EvalReport::from_scores(dataset.name.clone(), scores, scale))
}

/// Scores every HR image against itself.
pub fn evaluate_identity(dataset: &Dataset, scale: usize) -> Result<EvalReport> {
    let scores = dataset
        .ids
        .iter()
        .zip(&dataset.hr)
        .map(|(id, hr)| score_pair(id, hr, hr, scale))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scores(dataset.name.clone(), scores, scale))
}

/// Markdown table with one row per labelled method and a `PSNR/SSIM` column
/// per dataset, in the order datasets first appear.
pub fn markdown_table(rows: &[(String, Vec<EvalReport>)]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    for (_, reports) in rows {
        for r in reports {
            if !datasets.contains(&r.dataset.as_str()) {
                datasets.push(&r.dataset);
            }
        }
    }
    let mut out = String::from("| Method |");
    for d in &datasets {
        let _ = write!(out, " {d} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(datasets.len()));
    out.push('\n');
    for (label, reports) in rows {
        let _ = write!(out, "| {label} |");
        for d in &datasets {
            match reports.iter().find(|r| r.dataset == *d) {
                Some(r) => {
                    let _ = write!(out, " {:.2}/{:.4} |", r.mean_psnr, r.mean_ssim);
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}
