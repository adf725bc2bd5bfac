//! Paired LR/HR data: bicubic degradation, patch sampling with dihedral
//! augmentation, PNG I/O, and a procedural texture generator used in place
//! of a photographic training set.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// An RGB image stored as a `1 x 3 x H x W` tensor in `[0, 1]`.
pub type Image = Tensor<f32>;

const CUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (CUBIC_A + 2.0) * x * x * x - (CUBIC_A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        CUBIC_A * x * x * x - 5.0 * CUBIC_A * x * x + 8.0 * CUBIC_A * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Symmetric (edge-duplicating) reflection of `j` into `0..n`.
fn reflect(j: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = j.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Resampling taps for one axis: per output index, `(input index, weight)`.
fn axis_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    // Downscaling stretches the kernel to act as an anti-alias filter.
    let kscale = scale.min(1.0);
    let width = 4.0 / kscale;
    (0..out_len)
        .map(|i| {
            let u = (i as f64 + 0.5) / scale - 0.5;
            let left = (u - width / 2.0).floor() as isize;
            let taps = width.ceil() as isize + 2;
            let mut ws: Vec<(usize, f64)> = Vec::with_capacity(taps as usize);
            let mut sum = 0.0;
            for j in left..left + taps {
                let w = kscale * cubic((u - j as f64) * kscale);
                if w != 0.0 {
                    ws.push((reflect(j, in_len), w));
                    sum += w;
                }
            }
            for (_, w) in ws.iter_mut() {
                *w /= sum;
            }
            ws
        })
        .collect()
}

/// Separable bicubic resize (cubic convolution, a = -0.5, anti-aliased when
/// shrinking, symmetric borders). Output is clipped to `[0, 1]`.
pub fn bicubic_resize(image: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let s = image.shape();
    if s.h < 4 || s.w < 4 {
        return Err(Error::Data(format!("image {s} too small to resize")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Data(format!("degenerate resize target {out_h}x{out_w}")));
    }
    let wy = axis_weights(s.h, out_h);
    let wx = axis_weights(s.w, out_w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    let mut rows = vec![0.0f64; out_h * s.w];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = image.index(n, c, 0, 0);
            let plane = &image.data()[base..base + s.plane()];
            for (oy, taps) in wy.iter().enumerate() {
                let dst = &mut rows[oy * s.w..(oy + 1) * s.w];
                dst.fill(0.0);
                for &(iy, w) in taps {
                    for (d, &v) in dst.iter_mut().zip(&plane[iy * s.w..(iy + 1) * s.w]) {
                        *d += w * v as f64;
                    }
                }
            }
            for oy in 0..out_h {
                let row = &rows[oy * s.w..(oy + 1) * s.w];
                for (ox, taps) in wx.iter().enumerate() {
                    let v: f64 = taps.iter().map(|&(ix, w)| w * row[ix]).sum();
                    out.set(n, c, oy, ox, v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Ok(out)
}

/// Crops `size_h x size_w` at `(y, x)` from every item.
pub fn crop(image: &Image, y: usize, x: usize, size_h: usize, size_w: usize) -> Result<Image> {
    let s = image.shape();
    if y + size_h > s.h || x + size_w > s.w {
        return Err(Error::Data(format!(
            "crop {size_h}x{size_w}@({y},{x}) outside {s}"
        )));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, size_h, size_w), |n, c, h, w| {
        image.at(n, c, y + h, x + w)
    }))
}

/// Crops an image so both sides are multiples of `scale`.
pub fn mod_crop(image: &Image, scale: usize) -> Result<Image> {
    let s = image.shape();
    crop(image, 0, 0, s.h - s.h % scale, s.w - s.w % scale)
}

/// One of the eight symmetries of the square: `rot90^(t % 4)` after an
/// optional horizontal flip (`t >= 4`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Self = Self(0);

    pub fn new(t: u8) -> Self {
        Self(t % 8)
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..8).map(Self)
    }

    pub fn code(self) -> u8 {
        self.0
    }

    fn rotations(self) -> u8 {
        self.0 % 4
    }

    fn flipped(self) -> bool {
        self.0 >= 4
    }

    pub fn inverse(self) -> Self {
        if self.flipped() {
            self
        } else {
            Self((4 - self.rotations()) % 4)
        }
    }

    pub fn apply(self, image: &Image) -> Image {
        let mut out = if self.flipped() {
            flip_horizontal(image)
        } else {
            image.clone()
        };
        for _ in 0..self.rotations() {
            out = rot90(&out);
        }
        out
    }
}

fn flip_horizontal(image: &Image) -> Image {
    let s = image.shape();
    Tensor::from_fn(s, |n, c, h, w| image.at(n, c, h, s.w - 1 - w))
}

/// Counter-clockwise quarter turn.
fn rot90(image: &Image) -> Image {
    let s = image.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.w, s.h), |n, c, i, j| {
        image.at(n, c, j, s.w - 1 - i)
    })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Directory,
    Synthetic,
}

fn default_patch() -> usize {
    48
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub source: DataSource,
    /// Directory of HR PNG files (directory source).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hr_dir: Option<PathBuf>,
    /// Use pre-degraded LR images from the sibling `<hr_dir>_x<scale>`
    /// instead of degrading crops on the fly.
    pub pre_degraded: bool,
    pub scale: usize,
    #[serde(default = "default_patch")]
    pub patch_size_lr: usize,
    pub augment: bool,
    pub synth_count: usize,
    pub synth_size: usize,
    pub synth_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            source: DataSource::Synthetic,
            hr_dir: None,
            pre_degraded: false,
            scale: 2,
            patch_size_lr: default_patch(),
            augment: true,
            synth_count: 32,
            synth_size: 96,
            synth_seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2..=4) {
            return Err(Error::Config(format!("dataset scale x{} unsupported", self.scale)));
        }
        if self.patch_size_lr < 8 {
            return Err(Error::Config("patch_size_lr must be at least 8".into()));
        }
        match self.source {
            DataSource::Directory if self.hr_dir.is_none() => {
                Err(Error::Config("directory dataset needs hr_dir".into()))
            }
            DataSource::Synthetic if self.synth_count == 0 => {
                Err(Error::Config("synth_count must be positive".into()))
            }
            DataSource::Synthetic if self.synth_size < 32 => {
                Err(Error::Config("synth_size must be at least 32".into()))
            }
            _ => Ok(()),
        }
    }

    /// Sibling directory holding pre-degraded LR images.
    pub fn lr_dir(&self) -> Option<PathBuf> {
        let hr = self.hr_dir.as_ref()?;
        let name = hr.file_name()?.to_string_lossy().into_owned();
        Some(hr.with_file_name(format!("{name}_x{}", self.scale)))
    }
}

/// Loaded HR images (and optional matching LR images).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub ids: Vec<String>,
    pub hr: Vec<Image>,
    pub lr: Option<Vec<Image>>,
}

impl Dataset {
    pub fn from_images(name: impl Into<String>, ids: Vec<String>, hr: Vec<Image>) -> Self {
        Self {
            name: name.into(),
            ids,
            hr,
            lr: None,
        }
    }

    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        match spec.source {
            DataSource::Synthetic => {
                let hr = synth_textures(spec.synth_count, spec.synth_size, spec.synth_seed)?;
                let ids = (0..hr.len()).map(|i| format!("synth_{i:04}")).collect();
                Ok(Self::from_images(spec.name.clone(), ids, hr))
            }
            DataSource::Directory => {
                let dir = spec.hr_dir.as_ref().expect("validated");
                let mut ds = Self::load_dir(dir)?;
                ds.name = spec.name.clone();
                if spec.pre_degraded {
                    let lr_dir = spec.lr_dir().expect("validated");
                    let lr = ds
                        .ids
                        .iter()
                        .map(|id| load_png(&lr_dir.join(format!("{id}.png"))))
                        .collect::<Result<Vec<_>>>()?;
                    ds.lr = Some(lr);
                }
                Ok(ds)
            }
        }
    }

    /// All `*.png` files of a directory, sorted by file name; ids are file
    /// stems.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        let mut ids = Vec::with_capacity(files.len());
        let mut hr = Vec::with_capacity(files.len());
        for f in files {
            ids.push(f.file_stem().unwrap_or_default().to_string_lossy().into_owned());
            hr.push(load_png(&f)?);
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Self::from_images(name, ids, hr))
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }
}

/// Paired training patches.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    pub indices: Vec<usize>,
    pub transforms: Vec<Dihedral>,
}

/// Samples `batch` aligned LR/HR patch pairs. HR crops sit on the LR grid;
/// LR patches are degraded from the HR crop unless the dataset carries
/// pre-degraded LR images.
pub fn sample_batch<R: Rng>(
    dataset: &Dataset,
    spec: &DatasetSpec,
    batch: usize,
    rng: &mut R,
) -> Result<PatchBatch> {
    let s = spec.scale;
    let p = spec.patch_size_lr;
    let usable: Vec<usize> = (0..dataset.len())
        .filter(|&i| {
            let sh = dataset.hr[i].shape();
            let ok = sh.h / s >= p && sh.w / s >= p;
            if !ok {
                warn!(
                    "skipping {}: {}x{} too small for {p}px patches at x{s}",
                    dataset.ids[i], sh.h, sh.w
                );
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Data(format!(
            "no image in {} is large enough for {p}px patches at x{s}",
            dataset.name
        )));
    }
    let mut lrs = Vec::with_capacity(batch);
    let mut hrs = Vec::with_capacity(batch);
    let mut indices = Vec::with_capacity(batch);
    let mut transforms = Vec::with_capacity(batch);
    for _ in 0..batch {
        let idx = usable[rng.gen_range(0..usable.len())];
        let img = &dataset.hr[idx];
        let sh = img.shape();
        let y = rng.gen_range(0..=sh.h / s - p);
        let x = rng.gen_range(0..=sh.w / s - p);
        let hr = crop(img, y * s, x * s, p * s, p * s)?;
        let lr = match &dataset.lr {
            Some(lr_images) => crop(&lr_images[idx], y, x, p, p)?,
            None => bicubic_resize(&hr, p, p)?,
        };
        let t = if spec.augment {
            Dihedral::new(rng.gen_range(0..8))
        } else {
            Dihedral::IDENTITY
        };
        lrs.push(t.apply(&lr));
        hrs.push(t.apply(&hr));
        indices.push(idx);
        transforms.push(t);
    }
    Ok(PatchBatch {
        lr: Tensor::stack(&lrs)?,
        hr: Tensor::stack(&hrs)?,
        indices,
        transforms,
    })
}

fn box_blur(field: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let yy = reflect(y as isize + dy, size);
                    let xx = reflect(x as isize + dx, size);
                    acc += field[yy * size + xx];
                }
            }
            out[y * size + x] = acc / 9.0;
        }
    }
    out
}

/// Deterministic procedural images mixing oriented sinusoidal gratings, a
/// checkerboard and low-pass noise, stretched to the full `[0, 1]` range and
/// quantised to 8 bits.
pub fn synth_textures(count: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    if size < 32 {
        return Err(Error::Data(format!("synthetic size {size} below 32")));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
        let n = size * size;
        let mut channels = vec![vec![0.0f64; n]; 3];

        let gratings = rng.gen_range(2..=3);
        for _ in 0..gratings {
            let freq = rng.gen_range(2.0..14.0);
            let theta = rng.gen_range(0.0..PI);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let color: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let (fx, fy) = (freq * theta.cos(), freq * theta.sin());
            for y in 0..size {
                for x in 0..size {
                    let v = (2.0 * PI * (fx * x as f64 + fy * y as f64) / size as f64 + phase).sin();
                    for (ch, col) in channels.iter_mut().zip(color) {
                        ch[y * size + x] += col * v;
                    }
                }
            }
        }

        let cell = rng.gen_range(4..=16usize);
        let check_color: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
        for y in 0..size {
            for x in 0..size {
                let v = if ((x + ox) / cell + (y + oy) / cell) % 2 == 0 { 1.0 } else { -1.0 };
                for (ch, col) in channels.iter_mut().zip(check_color) {
                    ch[y * size + x] += 0.8 * col * v;
                }
            }
        }

        for ch in channels.iter_mut() {
            let mut noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for _ in 0..3 {
                noise = box_blur(&noise, size);
            }
            for (v, z) in ch.iter_mut().zip(noise) {
                *v += 2.0 * z;
            }
        }

        let lo = channels.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let hi = channels.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = (hi - lo).max(1e-12);
        let mut data = Vec::with_capacity(3 * n);
        for ch in &channels {
            data.extend(ch.iter().map(|&v| ((v - lo) / range * 255.0).round() as f32 / 255.0));
        }
        out.push(Tensor::from_vec(Shape::new(1, 3, size, size), data)?);
    }
    Ok(out)
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        raw[(y * w + x) * 3 + c] as f32 / 255.0
    }))
}

pub fn save_png(path: &Path, image: &Image) -> Result<()> {
    let s = image.shape();
    let mut buf = image::RgbImage::new(s.w as u32, s.h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = image.at(0, c, y as usize, x as usize).clamp(0.0, 1.0);
            px.0[c] = (v * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
