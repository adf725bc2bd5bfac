//! Reverse-mode automatic differentiation over a per-iteration tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! leaves; leaves created with `requires_grad = false` (frozen teachers,
//! data, masks) never receive a gradient buffer.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    ChannelGate { x: Var, gate: Var },
    GlobalAvgPool(Var),
    PixelShuffle(Var, usize),
    MaskMix { student: Var, teacher: Var, mask: Tensor<T> },
    Mae(Var, Var),
    Mse(Var, Var),
    AttentionTransfer(Var, Var),
    Affinity(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

const NORM_EPS: f64 = 1e-12;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Stride-1 convolution with `same` zero padding. `w` is
    /// `C_out x C_in x k x k` with odd `k`; `b` is `1 x C_out x 1 x 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv2d { x, w, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let out = self.value(a).map(|x| x * f);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, factor), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let needs = self.needs(a);
        self.push(out, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let needs = self.needs(a);
        self.push(out, Op::Sigmoid(a), needs)
    }

    /// Mean over each channel plane: `N x C x H x W -> N x C x 1 x 1`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.shape();
        let plane = s.plane();
        let inv = T::of(1.0 / plane as f64);
        let out_shape = Shape::new(s.n, s.c, 1, 1);
        let data = x
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().fold(T::zero(), |acc, &v| acc + v) * inv)
            .collect();
        let out = Tensor::from_vec(out_shape, data).expect("pool shape");
        let needs = self.needs(a);
        self.push(out, Op::GlobalAvgPool(a), needs)
    }

    /// Scales every channel plane of `x` by the matching entry of `gate`
    /// (`N x C x 1 x 1`).
    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x);
        let gs = self.shape(gate);
        if gs != Shape::new(xs.n, xs.c, 1, 1) {
            return Err(Error::Dimension(format!(
                "channel gate {gs} does not match features {xs}"
            )));
        }
        let plane = xs.plane();
        let g = self.value(gate).data();
        let mut out = self.value(x).clone();
        for (p, &s) in out.data_mut().chunks_exact_mut(plane).zip(g) {
            for v in p {
                *v *= s;
            }
        }
        let needs = self.needs(x) || self.needs(gate);
        Ok(self.push(out, Op::ChannelGate { x, gate }, needs))
    }

    /// Sub-pixel rearrangement `N x C*r*r x H x W -> N x C x rH x rW`.
    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Result<Var> {
        let out = pixel_shuffle(self.value(a), r)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::PixelShuffle(a, r), needs))
    }

    /// `student * (1 - mask) + teacher * mask` with a constant binary mask.
    pub fn mask_mix(&mut self, student: Var, teacher: Var, mask: Tensor<T>) -> Result<Var> {
        let s = self.value(student);
        let t = self.value(teacher);
        t.expect_shape(s.shape())?;
        mask.expect_shape(s.shape())?;
        let data = s
            .data()
            .iter()
            .zip(t.data())
            .zip(mask.data())
            .map(|((&a, &b), &m)| a * (T::one() - m) + b * m)
            .collect();
        let out = Tensor::from_vec(s.shape(), data)?;
        let needs = self.needs(student) || self.needs(teacher);
        Ok(self.push(
            out,
            Op::MaskMix {
                student,
                teacher,
                mask,
            },
            needs,
        ))
    }

    /// Mean absolute error, a scalar.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        let x = self.value(a);
        let y = self.value(b);
        y.expect_shape(x.shape())?;
        let sum: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| (p - q).abs().as_f64())
            .sum();
        let out = Tensor::scalar(T::of(sum / x.data().len() as f64));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mae(a, b), needs))
    }

    /// Mean squared error, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let x = self.value(a);
        let y = self.value(b);
        y.expect_shape(x.shape())?;
        let sum: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| {
                let d = (p - q).as_f64();
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::of(sum / x.data().len() as f64));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mse(a, b), needs))
    }

    /// Spatial attention transfer: maps are channel sums of squared
    /// activations, L2-normalised over space; the loss is their mean squared
    /// difference. Channel widths may differ.
    pub fn attention_transfer(&mut self, student: Var, teacher: Var) -> Result<Var> {
        let s = self.value(student);
        let t = self.value(teacher);
        check_spatial(s.shape(), t.shape())?;
        let qs = attention_maps(s);
        let qt = attention_maps(t);
        let sum: f64 = qs
            .iter()
            .zip(&qt)
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::of(sum / qs.len() as f64));
        let needs = self.needs(student) || self.needs(teacher);
        Ok(self.push(out, Op::AttentionTransfer(student, teacher), needs))
    }

    /// Spatial affinity distillation: columns of the `C x HW` feature matrix
    /// are L2-normalised, the `HW x HW` Gram matrices are compared by mean
    /// absolute error.
    pub fn affinity(&mut self, student: Var, teacher: Var) -> Result<Var> {
        let s = self.value(student);
        let t = self.value(teacher);
        check_spatial(s.shape(), t.shape())?;
        let shape = s.shape();
        let p = shape.plane();
        let mut sum = 0.0;
        for n in 0..shape.n {
            let (us, _) = normalized_columns(s, n);
            let (ut, _) = normalized_columns(t, n);
            let a_s = gram(&us, s.shape().c, p);
            let a_t = gram(&ut, t.shape().c, p);
            sum += a_s
                .iter()
                .zip(&a_t)
                .map(|(&x, &y)| (x - y).abs().as_f64())
                .sum::<f64>();
        }
        let out = Tensor::scalar(T::of(sum / (shape.n * p * p) as f64));
        let needs = self.needs(student) || self.needs(teacher);
        Ok(self.push(out, Op::Affinity(student, teacher), needs))
    }

    /// `sum_i weight_i * term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        let mut needs = false;
        for &(v, weight) in terms {
            let value = self.value(v);
            if value.shape() != Shape::scalar() {
                return Err(Error::Dimension(format!(
                    "weighted sum expects scalars, got {}",
                    value.shape()
                )));
            }
            total += weight * value.item().as_f64();
            needs |= self.needs(v);
        }
        Ok(self.push(
            Tensor::scalar(T::of(total)),
            Op::WeightedSum(terms.to_vec()),
            needs,
        ))
    }

    /// Back-propagates from the scalar `loss` and returns the gradient of
    /// every leaf created with `requires_grad = true` that the loss depends
    /// on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        // Keep only leaf gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let (gx, gw, gb) = conv_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Scale(a, factor) => {
                let f = T::of(*factor);
                self.accumulate(grads, *a, g.map(|v| v * f));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let gx = g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *a, gx);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let gx = g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv))?;
                self.accumulate(grads, *a, gx);
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let inv = T::of(1.0 / s.plane() as f64);
                let mut gx = Tensor::zeros(s);
                for (p, &gv) in gx.data_mut().chunks_exact_mut(s.plane()).zip(g.data()) {
                    p.fill(gv * inv);
                }
                self.accumulate(grads, *a, gx);
            }
            Op::ChannelGate { x, gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let plane = xv.shape().plane();
                if self.needs(*x) {
                    let mut gx = g.clone();
                    for (p, &s) in gx.data_mut().chunks_exact_mut(plane).zip(gv.data()) {
                        for v in p {
                            *v *= s;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*gate) {
                    let data = g
                        .data()
                        .chunks_exact(plane)
                        .zip(xv.data().chunks_exact(plane))
                        .map(|(gp, xp)| {
                            gp.iter()
                                .zip(xp)
                                .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                        })
                        .collect();
                    self.accumulate(grads, *gate, Tensor::from_vec(gv.shape(), data)?);
                }
            }
            Op::PixelShuffle(a, r) => {
                let gx = pixel_unshuffle(g, *r, self.shape(*a));
                self.accumulate(grads, *a, gx);
            }
            Op::MaskMix {
                student,
                teacher,
                mask,
            } => {
                if self.needs(*student) {
                    let gs = g.zip_map(mask, |gv, m| gv * (T::one() - m))?;
                    self.accumulate(grads, *student, gs);
                }
                if self.needs(*teacher) {
                    let gt = g.zip_map(mask, |gv, m| gv * m)?;
                    self.accumulate(grads, *teacher, gt);
                }
            }
            Op::Mae(a, b) => {
                let x = self.value(*a);
                let y = self.value(*b);
                let scale = g.item() / T::of(x.data().len() as f64);
                let ga = x.zip_map(y, |p, q| {
                    let d = p - q;
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                })?;
                if self.needs(*b) {
                    self.accumulate(grads, *b, ga.map(|v| -v));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Mse(a, b) => {
                let x = self.value(*a);
                let y = self.value(*b);
                let scale = T::of(2.0) * g.item() / T::of(x.data().len() as f64);
                let ga = x.zip_map(y, |p, q| (p - q) * scale)?;
                if self.needs(*b) {
                    self.accumulate(grads, *b, ga.map(|v| -v));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::AttentionTransfer(s, t) => {
                let sv = self.value(*s);
                let tv = self.value(*t);
                let qs = attention_maps(sv);
                let qt = attention_maps(tv);
                let scale = 2.0 * g.item().as_f64() / qs.len() as f64;
                let dq: Vec<f64> = qs.iter().zip(&qt).map(|(a, b)| (a - b) * scale).collect();
                if self.needs(*s) {
                    self.accumulate(grads, *s, attention_backward(sv, &qs, &dq));
                }
                if self.needs(*t) {
                    let neg: Vec<f64> = dq.iter().map(|v| -v).collect();
                    self.accumulate(grads, *t, attention_backward(tv, &qt, &neg));
                }
            }
            Op::Affinity(s, t) => {
                let sv = self.value(*s);
                let tv = self.value(*t);
                let shape = sv.shape();
                let p = shape.plane();
                let scale = g.item() / T::of((shape.n * p * p) as f64);
                let mut gs = self.needs(*s).then(|| Tensor::zeros(sv.shape()));
                let mut gt = self.needs(*t).then(|| Tensor::zeros(tv.shape()));
                for n in 0..shape.n {
                    let (us, ns) = normalized_columns(sv, n);
                    let (ut, nt) = normalized_columns(tv, n);
                    let a_s = gram(&us, sv.shape().c, p);
                    let a_t = gram(&ut, tv.shape().c, p);
                    // d loss / d A_s, symmetrised since A = U^T U.
                    let mut sym = vec![T::zero(); p * p];
                    for i in 0..p {
                        for j in 0..p {
                            let sign = |d: T| {
                                if d > T::zero() {
                                    scale
                                } else if d < T::zero() {
                                    -scale
                                } else {
                                    T::zero()
                                }
                            };
                            sym[i * p + j] = sign(a_s[i * p + j] - a_t[i * p + j])
                                + sign(a_s[j * p + i] - a_t[j * p + i]);
                        }
                    }
                    if let Some(gs) = gs.as_mut() {
                        affinity_column_backward(gs, n, &us, &ns, &sym, p, T::one());
                    }
                    if let Some(gt) = gt.as_mut() {
                        affinity_column_backward(gt, n, &ut, &nt, &sym, p, -T::one());
                    }
                }
                if let Some(gs) = gs {
                    self.accumulate(grads, *s, gs);
                }
                if let Some(gt) = gt {
                    self.accumulate(grads, *t, gt);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, weight) in terms {
                    self.accumulate(grads, v, Tensor::scalar(g.item() * T::of(weight)));
                }
            }
        }
        Ok(())
    }
}

fn check_spatial(a: Shape, b: Shape) -> Result<()> {
    if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
        return Err(Error::Dimension(format!(
            "spatial mismatch between {a} and {b}"
        )));
    }
    Ok(())
}

fn conv_geometry<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize)> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.c != xs.c || ws.h != ws.w || ws.h % 2 == 0 {
        return Err(Error::Dimension(format!(
            "conv kernel {ws} incompatible with input {xs}"
        )));
    }
    Ok((ws.h, ws.h / 2))
}

/// Unfolds one `C x H x W` item into a `(C*k*k) x (H*W)` matrix.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                for y in 0..h {
                    let d = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        d.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    d[..x_lo].fill(T::zero());
                    d[x_hi..].fill(T::zero());
                    let sx0 = x_lo + kx - pad;
                    d[x_lo..x_hi].copy_from_slice(&src_row[sx0..sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto an item.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let sx0 = x_lo + kx - pad;
                    let s = &src[y * w + x_lo..y * w + x_hi];
                    for (d, &v) in dst_row[sx0..sx0 + (x_hi - x_lo)].iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (k, _) = conv_geometry(x, w)?;
    let xs = x.shape();
    let cout = w.shape().n;
    if let Some(b) = b {
        b.expect_shape(Shape::new(1, cout, 1, 1))?;
    }
    let hw = xs.plane();
    let kk = xs.c * k * k;
    let mut out = Tensor::zeros(Shape::new(xs.n, cout, xs.h, xs.w));
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    let in_per = xs.c * hw;
    let out_per = cout * hw;
    for n in 0..xs.n {
        let xin = &x.data()[n * in_per..(n + 1) * in_per];
        let rhs: &[T] = if k == 1 {
            xin
        } else {
            im2col(xin, xs.c, xs.h, xs.w, k, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[n * out_per..(n + 1) * out_per];
        T::gemm(
            cout,
            kk,
            hw,
            w.data(),
            kk as isize,
            1,
            rhs,
            hw as isize,
            1,
            T::zero(),
            dst,
            hw as isize,
            1,
        );
        if let Some(b) = b {
            for (plane, &bv) in dst.chunks_exact_mut(hw).zip(b.data()) {
                for v in plane {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.h;
    let cout = ws.n;
    let hw = xs.plane();
    let kk = xs.c * k * k;
    let in_per = xs.c * hw;
    let out_per = cout * hw;
    let mut gx = want_x.then(|| Tensor::zeros(xs));
    let mut gw = want_w.then(|| Tensor::zeros(ws));
    let mut gb = want_b.then(|| Tensor::zeros(Shape::new(1, cout, 1, 1)));
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut dcols = if k == 1 || !want_x {
        Vec::new()
    } else {
        vec![T::zero(); kk * hw]
    };
    for n in 0..xs.n {
        let g_item = &gy.data()[n * out_per..(n + 1) * out_per];
        if let Some(gb) = gb.as_mut() {
            for (acc, plane) in gb.data_mut().iter_mut().zip(g_item.chunks_exact(hw)) {
                *acc += plane.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        if let Some(gw) = gw.as_mut() {
            let xin = &x.data()[n * in_per..(n + 1) * in_per];
            let cols_ref: &[T] = if k == 1 {
                xin
            } else {
                im2col(xin, xs.c, xs.h, xs.w, k, &mut cols);
                &cols
            };
            // gw (cout x kk) += gy (cout x hw) * cols^T (hw x kk)
            T::gemm(
                cout,
                hw,
                kk,
                g_item,
                hw as isize,
                1,
                cols_ref,
                1,
                hw as isize,
                T::one(),
                gw.data_mut(),
                kk as isize,
                1,
            );
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx.data_mut()[n * in_per..(n + 1) * in_per];
            // dcols (kk x hw) = w^T (kk x cout) * gy (cout x hw)
            if k == 1 {
                T::gemm(
                    kk,
                    cout,
                    hw,
                    w.data(),
                    1,
                    kk as isize,
                    g_item,
                    hw as isize,
                    1,
                    T::zero(),
                    dst,
                    hw as isize,
                    1,
                );
            } else {
                T::gemm(
                    kk,
                    cout,
                    hw,
                    w.data(),
                    1,
                    kk as isize,
                    g_item,
                    hw as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    hw as isize,
                    1,
                );
                col2im(&dcols, xs.c, xs.h, xs.w, k, dst);
            }
        }
    }
    (gx, gw, gb)
}

fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || s.c % (r * r) != 0 {
        return Err(Error::Dimension(format!(
            "pixel shuffle by {r} needs channels divisible by {}, got {s}",
            r * r
        )));
    }
    let c = s.c / (r * r);
    let out_shape = Shape::new(s.n, c, s.h * r, s.w * r);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for cc in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = cc * r * r + i * r + j;
                    for h in 0..s.h {
                        for w in 0..s.w {
                            let v = x.at(n, src_c, h, w);
                            out.set(n, cc, h * r + i, w * r + j, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn pixel_unshuffle<T: Real>(g: &Tensor<T>, r: usize, in_shape: Shape) -> Tensor<T> {
    let c = in_shape.c / (r * r);
    let mut out = Tensor::zeros(in_shape);
    for n in 0..in_shape.n {
        for cc in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let dst_c = cc * r * r + i * r + j;
                    for h in 0..in_shape.h {
                        for w in 0..in_shape.w {
                            out.set(n, dst_c, h, w, g.at(n, cc, h * r + i, w * r + j));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Normalised attention maps for every batch item, flattened `N*HW`, in f64.
fn attention_maps<T: Real>(x: &Tensor<T>) -> Vec<f64> {
    let s = x.shape();
    let p = s.plane();
    let mut out = vec![0.0; s.n * p];
    for n in 0..s.n {
        let a = &mut out[n * p..(n + 1) * p];
        for c in 0..s.c {
            let base = x.index(n, c, 0, 0);
            for (acc, &v) in a.iter_mut().zip(&x.data()[base..base + p]) {
                let v = v.as_f64();
                *acc += v * v;
            }
        }
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        for v in a.iter_mut() {
            *v /= norm;
        }
    }
    out
}

fn attention_backward<T: Real>(x: &Tensor<T>, q: &[f64], dq: &[f64]) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let mut gx = Tensor::zeros(s);
    for n in 0..s.n {
        // Recover the un-normalised map's norm from x.
        let mut a = vec![0.0; p];
        for c in 0..s.c {
            let base = x.index(n, c, 0, 0);
            for (acc, &v) in a.iter_mut().zip(&x.data()[base..base + p]) {
                let v = v.as_f64();
                *acc += v * v;
            }
        }
        let raw_norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let qn = &q[n * p..(n + 1) * p];
        let gn = &dq[n * p..(n + 1) * p];
        let da: Vec<f64> = if raw_norm <= NORM_EPS {
            gn.iter().map(|g| g / NORM_EPS).collect()
        } else {
            let dot: f64 = qn.iter().zip(gn).map(|(a, b)| a * b).sum();
            qn.iter()
                .zip(gn)
                .map(|(qv, g)| (g - qv * dot) / raw_norm)
                .collect()
        };
        for c in 0..s.c {
            let base = x.index(n, c, 0, 0);
            let xs = &x.data()[base..base + p];
            let dst = &mut gx.data_mut()[base..base + p];
            for ((d, &xv), &dav) in dst.iter_mut().zip(xs).zip(&da) {
                *d = T::of(2.0 * xv.as_f64() * dav);
            }
        }
    }
    gx
}

/// Column-normalised `C x HW` matrix of item `n` and the raw column norms.
fn normalized_columns<T: Real>(x: &Tensor<T>, n: usize) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let p = s.plane();
    let base = x.index(n, 0, 0, 0);
    let mut u = x.data()[base..base + s.c * p].to_vec();
    let mut norms = vec![T::zero(); p];
    for c in 0..s.c {
        for (acc, &v) in norms.iter_mut().zip(&u[c * p..(c + 1) * p]) {
            *acc += v * v;
        }
    }
    for v in norms.iter_mut() {
        *v = v.sqrt();
    }
    let eps = T::of(NORM_EPS);
    for c in 0..s.c {
        for (v, &nv) in u[c * p..(c + 1) * p].iter_mut().zip(&norms) {
            *v = *v / nv.max(eps);
        }
    }
    (u, norms)
}

/// `U^T U` for a `c x p` row-major `U`.
fn gram<T: Real>(u: &[T], c: usize, p: usize) -> Vec<T> {
    let mut a = vec![T::zero(); p * p];
    T::gemm(
        p,
        c,
        p,
        u,
        1,
        p as isize,
        u,
        p as isize,
        1,
        T::zero(),
        &mut a,
        p as isize,
        1,
    );
    a
}

fn affinity_column_backward<T: Real>(
    gx: &mut Tensor<T>,
    n: usize,
    u: &[T],
    norms: &[T],
    sym: &[T],
    p: usize,
    sign: T,
) {
    let c = gx.shape().c;
    // dU (c x p) = U (c x p) * sym (p x p)
    let mut du = vec![T::zero(); c * p];
    T::gemm(
        c,
        p,
        p,
        u,
        p as isize,
        1,
        sym,
        p as isize,
        1,
        T::zero(),
        &mut du,
        p as isize,
        1,
    );
    let eps = T::of(NORM_EPS);
    let mut dots = vec![T::zero(); p];
    for ci in 0..c {
        for j in 0..p {
            dots[j] += u[ci * p + j] * du[ci * p + j];
        }
    }
    let base = gx.index(n, 0, 0, 0);
    let dst = &mut gx.data_mut()[base..base + c * p];
    for ci in 0..c {
        for j in 0..p {
            let nv = norms[j];
            let g = if nv > eps {
                (du[ci * p + j] - u[ci * p + j] * dots[j]) / nv
            } else {
                du[ci * p + j] / eps
            };
            dst[ci * p + j] += sign * g;
        }
    }
}
