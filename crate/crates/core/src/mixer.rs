//! Feature-level prior mixing: both networks' tap features are encoded into a
//! shared latent space, stitched element-wise under a binary 3-D mask and
//! decoded back to teacher width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Conv, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderArch {
    /// Two 3x3 convolutions with a ReLU between them.
    Conv,
    /// Two per-pixel fully connected layers (1x1 convolutions).
    Mlp,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderSharing {
    Separate,
    Shared,
    None,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Random,
    Grid,
    Cosine,
    Cka,
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskStrategy::Random => "random",
            MaskStrategy::Grid => "grid",
            MaskStrategy::Cosine => "cosine",
            MaskStrategy::Cka => "cka",
        })
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerConfig {
    /// Width of the unified latent space; defaults to the teacher width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_width: Option<usize>,
    pub encoder_arch: EncoderArch,
    pub encoder_sharing: EncoderSharing,
    pub mask_strategy: MaskStrategy,
    /// Probability that a latent element takes the teacher's value.
    pub mask_keep_prob: f64,
    pub grid_cell: usize,
    pub ae_loss_enabled: bool,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            latent_width: None,
            encoder_arch: EncoderArch::Conv,
            encoder_sharing: EncoderSharing::Separate,
            mask_strategy: MaskStrategy::Random,
            mask_keep_prob: 0.5,
            grid_cell: 4,
            ae_loss_enabled: true,
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_width == Some(0) {
            return Err(Error::Config("latent_width must be positive".into()));
        }
        if !(self.mask_keep_prob > 0.0 && self.mask_keep_prob < 1.0) {
            return Err(Error::Config(format!(
                "mask_keep_prob {} outside (0, 1)",
                self.mask_keep_prob
            )));
        }
        if self.grid_cell == 0 {
            return Err(Error::Config("grid_cell must be positive".into()));
        }
        Ok(())
    }
}

/// Stack of convolutions with ReLU between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mapper {
    layers: Vec<Conv>,
}

impl Mapper {
    fn two_layer<T: Real, R: Rng>(
        p: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        arch: EncoderArch,
        cin: usize,
        hidden: usize,
        cout: usize,
    ) -> Result<Self> {
        let k = match arch {
            EncoderArch::Conv => 3,
            EncoderArch::Mlp => 1,
        };
        Ok(Self {
            layers: vec![
                Conv::new(p, rng, &format!("{name}.0"), cin, hidden, k)?,
                Conv::new(p, rng, &format!("{name}.1"), hidden, cout, k)?,
            ],
        })
    }

    fn identity<T: Real>(p: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            layers: vec![Conv::identity(p, &format!("{name}.0"), width)?],
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = layer.apply(g, p, h)?;
        }
        Ok(h)
    }

    pub fn layers(&self) -> &[Conv] {
        &self.layers
    }
}

/// Trainable parts of the feature mixer plus the per-tap width adapters that
/// route enhanced features into the student.
#[derive(Clone, Debug)]
pub struct MixerBundle<T> {
    params: ParamStore<T>,
    student_width: usize,
    teacher_width: usize,
    latent_width: usize,
    sharing: EncoderSharing,
    encoder_s: Option<Mapper>,
    encoder_t: Option<Mapper>,
    /// 1x1 lift of student features to teacher width, used when the student
    /// has no encoder of its own and the widths differ.
    align: Option<Conv>,
    decoder: Mapper,
    adapters: Vec<Option<Conv>>,
}

/// Latent representations of one tap.
#[derive(Clone, Copy, Debug)]
pub struct LatentPair {
    pub z_student: Var,
    pub z_teacher: Var,
}

impl<T: Real> MixerBundle<T> {
    pub fn build(
        cfg: &MixerConfig,
        student_width: usize,
        teacher_width: usize,
        taps: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let latent = match cfg.encoder_sharing {
            EncoderSharing::None => {
                if cfg.latent_width.is_some_and(|l| l != teacher_width) {
                    return Err(Error::Config(
                        "without encoders the latent width is the teacher width".into(),
                    ));
                }
                teacher_width
            }
            _ => cfg.latent_width.unwrap_or(teacher_width),
        };
        let arch = cfg.encoder_arch;
        let needs_align = student_width != teacher_width;
        let (encoder_s, encoder_t, align) = match cfg.encoder_sharing {
            EncoderSharing::Separate => (
                Some(Mapper::two_layer(&mut p, &mut rng, "enc_s", arch, student_width, latent, latent)?),
                Some(Mapper::two_layer(&mut p, &mut rng, "enc_t", arch, teacher_width, latent, latent)?),
                None,
            ),
            EncoderSharing::Shared => {
                let align = if needs_align {
                    Some(Conv::new(&mut p, &mut rng, "align", student_width, teacher_width, 1)?)
                } else {
                    None
                };
                let enc = Mapper::two_layer(&mut p, &mut rng, "enc", arch, teacher_width, latent, latent)?;
                (None, Some(enc), align)
            }
            EncoderSharing::None => {
                let align = if needs_align {
                    Some(Conv::new(&mut p, &mut rng, "align", student_width, teacher_width, 1)?)
                } else {
                    None
                };
                (None, None, align)
            }
        };
        let decoder = Mapper::two_layer(&mut p, &mut rng, "dec", arch, latent, latent, teacher_width)?;
        let adapters = (0..taps)
            .map(|k| {
                needs_align
                    .then(|| Conv::new(&mut p, &mut rng, &format!("adapter.{k}"), teacher_width, student_width, 1))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params: p,
            student_width,
            teacher_width,
            latent_width: latent,
            sharing: cfg.encoder_sharing,
            encoder_s,
            encoder_t,
            align,
            decoder,
            adapters,
        })
    }

    /// Single-layer 1x1 identity encoders, decoder and adapters for equal
    /// student and teacher widths.
    pub fn identity(width: usize, taps: usize) -> Result<Self> {
        let mut p = ParamStore::new();
        let encoder_s = Mapper::identity(&mut p, "enc_s", width)?;
        let encoder_t = Mapper::identity(&mut p, "enc_t", width)?;
        let decoder = Mapper::identity(&mut p, "dec", width)?;
        let adapters = (0..taps)
            .map(|k| Conv::identity(&mut p, &format!("adapter.{k}"), width).map(Some))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params: p,
            student_width: width,
            teacher_width: width,
            latent_width: width,
            sharing: EncoderSharing::Separate,
            encoder_s: Some(encoder_s),
            encoder_t: Some(encoder_t),
            align: None,
            decoder,
            adapters,
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g, true)
    }

    pub fn latent_width(&self) -> usize {
        self.latent_width
    }

    pub fn student_width(&self) -> usize {
        self.student_width
    }

    pub fn teacher_width(&self) -> usize {
        self.teacher_width
    }

    pub fn sharing(&self) -> EncoderSharing {
        self.sharing
    }

    pub fn encoder_s(&self) -> Option<&Mapper> {
        self.encoder_s.as_ref()
    }

    pub fn encoder_t(&self) -> Option<&Mapper> {
        self.encoder_t.as_ref()
    }

    pub fn decoder(&self) -> &Mapper {
        &self.decoder
    }

    pub fn adapter(&self, position: usize) -> Option<&Conv> {
        self.adapters.get(position).and_then(Option::as_ref)
    }

    pub fn taps(&self) -> usize {
        self.adapters.len()
    }

    pub fn cast<U: Real>(&self) -> MixerBundle<U> {
        MixerBundle {
            params: self.params.cast(),
            student_width: self.student_width,
            teacher_width: self.teacher_width,
            latent_width: self.latent_width,
            sharing: self.sharing,
            encoder_s: self.encoder_s.clone(),
            encoder_t: self.encoder_t.clone(),
            align: self.align,
            decoder: self.decoder.clone(),
            adapters: self.adapters.clone(),
        }
    }

    fn check_width(g: &Graph<T>, v: Var, width: usize, what: &str) -> Result<()> {
        let c = g.shape(v).c;
        if c != width {
            return Err(Error::Dimension(format!(
                "{what} feature has {c} channels, expected {width}"
            )));
        }
        Ok(())
    }

    fn encode_teacher(&self, g: &mut Graph<T>, p: &Bound, teacher: Var) -> Result<Var> {
        match &self.encoder_t {
            Some(enc) => enc.apply(g, p, teacher),
            None => Ok(teacher),
        }
    }

    /// Maps a tap's student and teacher features into the latent space.
    pub fn encode_pair(&self, g: &mut Graph<T>, p: &Bound, student: Var, teacher: Var) -> Result<LatentPair> {
        Self::check_width(g, student, self.student_width, "student")?;
        Self::check_width(g, teacher, self.teacher_width, "teacher")?;
        let ss = g.shape(student);
        let ts = g.shape(teacher);
        if (ss.n, ss.h, ss.w) != (ts.n, ts.h, ts.w) {
            return Err(Error::Dimension(format!(
                "student tap {ss} and teacher tap {ts} differ spatially"
            )));
        }
        let z_teacher = self.encode_teacher(g, p, teacher)?;
        let z_student = match (&self.encoder_s, self.sharing) {
            (Some(enc), _) => enc.apply(g, p, student)?,
            (None, sharing) => {
                let lifted = match &self.align {
                    Some(a) => a.apply(g, p, student)?,
                    None => student,
                };
                match sharing {
                    EncoderSharing::Shared => self.encode_teacher(g, p, lifted)?,
                    _ => lifted,
                }
            }
        };
        Ok(LatentPair {
            z_student,
            z_teacher,
        })
    }

    /// Stitches the latents under `mask` (1 selects the teacher) and decodes
    /// to an enhanced feature of teacher width.
    pub fn fuse_and_decode(&self, g: &mut Graph<T>, p: &Bound, latents: LatentPair, mask: &Mask3D) -> Result<Var> {
        let shape = g.shape(latents.z_student);
        if mask.shape() != shape {
            return Err(Error::Dimension(format!(
                "mask {} does not match latent {shape}",
                mask.shape()
            )));
        }
        let fused = g.mask_mix(latents.z_student, latents.z_teacher, mask.to_tensor())?;
        self.decoder.apply(g, p, fused)
    }

    /// Reconstruction of the teacher feature through the teacher encoder and
    /// decoder, without mixing.
    pub fn autoencoder_loss(&self, g: &mut Graph<T>, p: &Bound, cfg: &MixerConfig, teacher: Var) -> Result<Var> {
        let z = self.encode_teacher(g, p, teacher)?;
        self.autoencoder_loss_from_latent(g, p, cfg, z, teacher)
    }

    /// As [`Self::autoencoder_loss`], reusing an already encoded teacher latent.
    pub fn autoencoder_loss_from_latent(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        cfg: &MixerConfig,
        z_teacher: Var,
        teacher: Var,
    ) -> Result<Var> {
        if !cfg.ae_loss_enabled {
            return Err(Error::Config("auto-encoder loss is disabled".into()));
        }
        let recon = self.decoder.apply(g, p, z_teacher)?;
        feature_mixer_loss(g, recon, teacher)
    }

    /// Converts an enhanced (teacher-width) feature to student width for
    /// splicing into the student at tap `position` (0-based).
    pub fn adapt_to_student(&self, g: &mut Graph<T>, p: &Bound, position: usize, enhanced: Var) -> Result<Var> {
        if position >= self.adapters.len() {
            return Err(Error::Config(format!(
                "no adapter for tap {position}; bundle has {}",
                self.adapters.len()
            )));
        }
        Self::check_width(g, enhanced, self.teacher_width, "enhanced")?;
        match &self.adapters[position] {
            Some(a) => a.apply(g, p, enhanced),
            None if self.student_width == self.teacher_width => Ok(enhanced),
            None => Err(Error::Config(format!("missing adapter at tap {position}"))),
        }
    }
}

/// Mean absolute error between an enhanced feature and the teacher feature.
pub fn feature_mixer_loss<T: Real>(g: &mut Graph<T>, enhanced: Var, teacher: Var) -> Result<Var> {
    g.mae(enhanced, teacher)
}

/// Binary selection mask over `N x C x H x W` latents; 1 takes the teacher.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Mask3D {
    shape: Shape,
    bits: Vec<u8>,
    strategy: MaskStrategy,
    seed: u64,
}

impl Mask3D {
    pub fn filled(shape: Shape, value: bool, strategy: MaskStrategy) -> Self {
        Self {
            shape,
            bits: vec![value as u8; shape.numel()],
            strategy,
            seed: 0,
        }
    }

    pub fn from_bits(shape: Shape, bits: Vec<u8>, strategy: MaskStrategy, seed: u64) -> Result<Self> {
        if bits.len() != shape.numel() || bits.iter().any(|&b| b > 1) {
            return Err(Error::Dimension(format!("invalid mask bits for {shape}")));
        }
        Ok(Self {
            shape,
            bits,
            strategy,
            seed,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn strategy(&self) -> MaskStrategy {
        self.strategy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self
            .bits
            .iter()
            .map(|&b| if b == 1 { T::one() } else { T::zero() })
            .collect();
        Tensor::from_vec(self.shape, data).expect("mask shape")
    }
}

/// Draws a mask of `shape` (`N x C x H x W`). Cosine and CKA strategies rank
/// channels by student/teacher latent similarity and need `latents`.
pub fn generate_mask<T: Real>(
    cfg: &MixerConfig,
    shape: Shape,
    latents: Option<(&Tensor<T>, &Tensor<T>)>,
    seed: u64,
) -> Result<Mask3D> {
    let mut bits = vec![0u8; shape.numel()];
    match cfg.mask_strategy {
        MaskStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = cfg.mask_keep_prob;
            for b in bits.iter_mut() {
                *b = rng.gen_bool(p) as u8;
            }
        }
        MaskStrategy::Grid => {
            let cell = cfg.grid_cell;
            let mut i = 0;
            for _ in 0..shape.n {
                for c in 0..shape.c {
                    for h in 0..shape.h {
                        for w in 0..shape.w {
                            bits[i] = ((c / cell + h / cell + w / cell) % 2 == 0) as u8;
                            i += 1;
                        }
                    }
                }
            }
        }
        MaskStrategy::Cosine | MaskStrategy::Cka => {
            let (zs, zt) = latents.ok_or_else(|| {
                Error::Config(format!("{} masking needs latents", cfg.mask_strategy))
            })?;
            zs.expect_shape(shape)?;
            zt.expect_shape(shape)?;
            let select = ((cfg.mask_keep_prob * shape.c as f64).ceil() as usize).min(shape.c);
            let plane = shape.plane();
            let mut fill = |n: usize, sims: &[f64]| {
                for c in lowest_channels(sims, select) {
                    let base = (n * shape.c + c) * plane;
                    bits[base..base + plane].fill(1);
                }
            };
            if cfg.mask_strategy == MaskStrategy::Cosine {
                for n in 0..shape.n {
                    let sims = channel_cosine(zs, zt, n);
                    fill(n, &sims);
                }
            } else {
                let sims = channel_cka(zs, zt);
                for n in 0..shape.n {
                    fill(n, &sims);
                }
            }
        }
    }
    Ok(Mask3D {
        shape,
        bits,
        strategy: cfg.mask_strategy,
        seed,
    })
}

/// Indices of the `count` smallest similarities; ties go to the lowest index.
fn lowest_channels(sims: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Cosine similarity of each channel's flattened spatial map for item `n`.
/// Zero-norm maps count as fully similar.
pub fn channel_cosine<T: Real>(zs: &Tensor<T>, zt: &Tensor<T>, n: usize) -> Vec<f64> {
    let s = zs.shape();
    let p = s.plane();
    (0..s.c)
        .map(|c| {
            let base = zs.index(n, c, 0, 0);
            let a = &zs.data()[base..base + p];
            let b = &zt.data()[base..base + p];
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (&x, &y) in a.iter().zip(b) {
                let (x, y) = (x.as_f64(), y.as_f64());
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            let denom = (na * nb).sqrt();
            if denom > 0.0 {
                dot / denom
            } else {
                1.0
            }
        })
        .collect()
}

/// Linear CKA per channel, treating batch items as examples and spatial
/// positions as features. Degenerate (zero-variance) channels count as fully
/// similar.
pub fn channel_cka<T: Real>(zs: &Tensor<T>, zt: &Tensor<T>) -> Vec<f64> {
    let s = zs.shape();
    let p = s.plane();
    let n = s.n;
    let centered = |z: &Tensor<T>, c: usize| -> Vec<f64> {
        let mut m = vec![0.0; n * p];
        for i in 0..n {
            let base = z.index(i, c, 0, 0);
            for (dst, &v) in m[i * p..(i + 1) * p].iter_mut().zip(&z.data()[base..base + p]) {
                *dst = v.as_f64();
            }
        }
        for j in 0..p {
            let mean = (0..n).map(|i| m[i * p + j]).sum::<f64>() / n as f64;
            for i in 0..n {
                m[i * p + j] -= mean;
            }
        }
        m
    };
    // Gram matrices over examples: K = X X^T (n x n).
    let gram = |m: &[f64]| -> Vec<f64> {
        let mut k = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                k[a * n + b] = (0..p).map(|j| m[a * p + j] * m[b * p + j]).sum();
            }
        }
        k
    };
    (0..s.c)
        .map(|c| {
            let kx = gram(&centered(zs, c));
            let ky = gram(&centered(zt, c));
            let hsic = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let denom = (hsic(&kx, &kx) * hsic(&ky, &ky)).sqrt();
            if denom > 0.0 {
                hsic(&kx, &ky) / denom
            } else {
                1.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, shape: Shape, f: impl Fn(usize, usize, usize, usize) -> f64) -> Var {
        g.leaf(Tensor::from_fn(shape, f), true)
    }

    #[test]
    fn identity_bundle_passes_features_through() {
        let bundle = MixerBundle::<f64>::identity(4, 2).unwrap();
        let mut g = Graph::new();
        let p = bundle.bind(&mut g);
        let shape = Shape::new(2, 4, 3, 3);
        let s = leaf(&mut g, shape, |n, c, h, w| (n + c * h) as f64 - w as f64 * 0.3);
        let t = leaf(&mut g, shape, |n, c, h, w| (n * c) as f64 + h as f64 - w as f64);
        let z = bundle.encode_pair(&mut g, &p, s, t).unwrap();
        assert_eq!(g.value(z.z_student), g.value(s));
        assert_eq!(g.value(z.z_teacher), g.value(t));
        let a = bundle.adapt_to_student(&mut g, &p, 1, t).unwrap();
        assert_eq!(g.value(a), g.value(t));
    }

    #[test]
    fn encoder_widths() {
        let bundle = MixerBundle::<f32>::build(&MixerConfig::default(), 4, 8, 2, 0).unwrap();
        let mut g = Graph::new();
        let p = bundle.bind(&mut g);
        let s = g.constant(Tensor::zeros(Shape::new(2, 4, 5, 5)));
        let t = g.constant(Tensor::zeros(Shape::new(2, 8, 5, 5)));
        let z = bundle.encode_pair(&mut g, &p, s, t).unwrap();
        assert_eq!(g.shape(z.z_student), Shape::new(2, 8, 5, 5));
        assert_eq!(g.shape(z.z_teacher), Shape::new(2, 8, 5, 5));
        let a = bundle.adapt_to_student(&mut g, &p, 0, t).unwrap();
        assert_eq!(g.shape(a), Shape::new(2, 4, 5, 5));
        assert!(matches!(bundle.encode_pair(&mut g, &p, t, t), Err(Error::Dimension(_))));
        assert!(matches!(bundle.adapt_to_student(&mut g, &p, 2, t), Err(Error::Config(_))));
    }

    #[test]
    fn zero_features_give_bias_response() {
        // One 1x1 layer with bias b: on zeros the latent is b per channel.
        let mut bundle = MixerBundle::<f64>::identity(3, 1).unwrap();
        let bias_id = bundle.encoder_s().unwrap().layers()[0].bias;
        let bias = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.5, -1.0, 2.0]).unwrap();
        *bundle.params_mut().get_mut(bias_id) = bias;
        let mut g = Graph::new();
        let p = bundle.bind(&mut g);
        let zeros = g.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        let z = bundle.encode_pair(&mut g, &p, zeros, zeros).unwrap();
        let zs = g.value(z.z_student);
        for (c, want) in [0.5, -1.0, 2.0].into_iter().enumerate() {
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(zs.at(0, c, h, w), want);
                }
            }
        }
    }

    #[test]
    fn extreme_masks_select_one_side() {
        let bundle = MixerBundle::<f64>::build(&MixerConfig::default(), 4, 4, 1, 3).unwrap();
        let shape = Shape::new(1, 4, 6, 6);
        for (value, pick_teacher) in [(true, true), (false, false)] {
            let mut g = Graph::new();
            let p = bundle.bind(&mut g);
            let s = leaf(&mut g, shape, |_, c, h, w| (c + h) as f64 * 0.1 - w as f64 * 0.05);
            let t = leaf(&mut g, shape, |_, c, h, w| (c * w) as f64 * 0.07 - h as f64 * 0.02);
            let z = bundle.encode_pair(&mut g, &p, s, t).unwrap();
            let mask = Mask3D::filled(shape, value, MaskStrategy::Random);
            let out = bundle.fuse_and_decode(&mut g, &p, z, &mask).unwrap();
            let side = if pick_teacher { z.z_teacher } else { z.z_student };
            let direct = bundle.decoder().apply(&mut g, &p, side).unwrap();
            assert_eq!(g.value(out), g.value(direct));
        }
    }

    #[test]
    fn ae_loss_requires_enabled_config() {
        let bundle = MixerBundle::<f32>::identity(2, 1).unwrap();
        let mut g = Graph::new();
        let p = bundle.bind(&mut g);
        let t = g.constant(Tensor::full(Shape::new(1, 2, 3, 3), 0.5));
        let cfg = MixerConfig {
            ae_loss_enabled: false,
            ..MixerConfig::default()
        };
        assert!(matches!(
            bundle.autoencoder_loss(&mut g, &p, &cfg, t),
            Err(Error::Config(_))
        ));
        let l = bundle.autoencoder_loss(&mut g, &p, &MixerConfig::default(), t).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn ae_loss_with_doubling_decoder() {
        let mut bundle = MixerBundle::<f64>::identity(2, 1).unwrap();
        let w = bundle.decoder().layers()[0].weight;
        *bundle.params_mut().get_mut(w) = Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let p = bundle.bind(&mut g);
        let t = g.constant(Tensor::full(Shape::new(1, 2, 3, 3), 0.5));
        let l = bundle.autoencoder_loss(&mut g, &p, &MixerConfig::default(), t).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adapter_with_mean_rows_averages_channels() {
        let cfg = MixerConfig::default();
        let mut bundle = MixerBundle::<f64>::build(&cfg, 4, 8, 1, 0).unwrap();
        let a = *bundle.adapter(0).unwrap();
        *bundle.params_mut().get_mut(a.weight) = Tensor::full(Shape::new(4, 8, 1, 1), 1.0 / 8.0);
        let mut g = Graph::new();
        let p = bundle.bind(&mut g);
        let x = leaf(&mut g, Shape::new(2, 8, 3, 3), |n, c, h, w| (n * 7 + c * c + h * 3 + w) as f64 * 0.1);
        let out = bundle.adapt_to_student(&mut g, &p, 0, x).unwrap();
        let xv = g.value(x);
        let ov = g.value(out);
        for n in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    let mean = (0..8).map(|c| xv.at(n, c, h, w)).sum::<f64>() / 8.0;
                    for c in 0..4 {
                        assert!((ov.at(n, c, h, w) - mean).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn grid_mask_alternates() {
        let cfg = MixerConfig {
            mask_strategy: MaskStrategy::Grid,
            grid_cell: 1,
            ..MixerConfig::default()
        };
        let mask = generate_mask::<f32>(&cfg, Shape::new(1, 2, 2, 2), None, 0).unwrap();
        assert_eq!(mask.ones(), 4);
        assert_eq!(mask.bits(), &[1, 0, 0, 1, 0, 1, 1, 0]);
    }

    #[test]
    fn similarity_masks_tie_break_on_channel_index() {
        let shape = Shape::new(2, 5, 3, 3);
        let z = Tensor::<f64>::from_fn(shape, |n, c, h, w| 1.0 + (n + c + h * w) as f64);
        for strategy in [MaskStrategy::Cosine, MaskStrategy::Cka] {
            let cfg = MixerConfig {
                mask_strategy: strategy,
                mask_keep_prob: 0.5,
                ..MixerConfig::default()
            };
            let mask = generate_mask(&cfg, shape, Some((&z, &z)), 0).unwrap();
            // ceil(0.5 * 5) = 3 channels: 0, 1, 2.
            for n in 0..2 {
                for c in 0..5 {
                    let base = (n * 5 + c) * 9;
                    let want = (c < 3) as u8;
                    assert!(mask.bits()[base..base + 9].iter().all(|&b| b == want), "{strategy}");
                }
            }
            assert!(matches!(
                generate_mask::<f64>(&cfg, shape, None, 0),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn cosine_mask_picks_least_similar_channels() {
        let shape = Shape::new(1, 3, 2, 2);
        let zs = Tensor::<f64>::from_fn(shape, |_, _, h, w| (h * 2 + w) as f64 + 1.0);
        // channel 1 is anti-aligned, channel 2 orthogonal-ish, channel 0 equal
        let zt = Tensor::<f64>::from_fn(shape, |_, c, h, w| {
            let v = (h * 2 + w) as f64 + 1.0;
            match c {
                0 => v,
                1 => -v,
                _ => if (h + w) % 2 == 0 { 1.0 } else { -1.0 },
            }
        });
        let cfg = MixerConfig {
            mask_strategy: MaskStrategy::Cosine,
            mask_keep_prob: 0.3,
            ..MixerConfig::default()
        };
        let mask = generate_mask(&cfg, shape, Some((&zs, &zt)), 0).unwrap();
        assert_eq!(mask.bits(), &[0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn random_mask_regenerates_from_seed() {
        let cfg = MixerConfig::default();
        let shape = Shape::new(2, 4, 8, 8);
        let a = generate_mask::<f32>(&cfg, shape, None, 42).unwrap();
        let b = generate_mask::<f32>(&cfg, shape, None, 42).unwrap();
        let c = generate_mask::<f32>(&cfg, shape, None, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.bits(), c.bits());
    }
}
