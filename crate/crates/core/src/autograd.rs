//! Tape-based reverse-mode differentiation over the kernels in [`crate::ops`].
//!
//! A [`Graph`] records one forward pass; [`Graph::backward`] walks the tape in
//! reverse once. Nodes hold either a real [`Tensor`] or a [`ComplexTensor`].
//! Only first-order gradients are supported.

use crate::error::{dim_err, Error, Result};
use crate::ops::{activation, attention, complex, conv, fft, norm, shuffle};
use crate::tensor::{ComplexTensor, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Value<T> {
    Real(Tensor<T>),
    Complex(ComplexTensor<T>),
}

impl<T: Real> Value<T> {
    pub fn as_real(&self) -> &Tensor<T> {
        match self {
            Value::Real(t) => t,
            Value::Complex(_) => panic!("expected a real node, found a complex one"),
        }
    }

    pub fn as_complex(&self) -> &ComplexTensor<T> {
        match self {
            Value::Complex(t) => t,
            Value::Real(_) => panic!("expected a complex node, found a real one"),
        }
    }

    fn accumulate(&mut self, other: Value<T>) {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => a.add_assign(&b),
            (Value::Complex(a), Value::Complex(b)) => a.add_assign(&b),
            _ => panic!("gradient kind mismatch"),
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, groups: usize },
    LayerNorm { x: Var, gain: Var, shift: Var },
    Softmax { x: Var },
    Gelu { x: Var },
    Relu { x: Var, branch: usize },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    SliceChannels { x: Var, start: usize },
    ConcatChannels { a: Var, b: Var },
    Reshuffle { x: Var, factor: usize, direction: shuffle::Direction },
    HeadGram { a: Var, b: Var, heads: usize },
    HeadMix { x: Var, attn: Var, heads: usize },
    HeadScale { s: Var, tau: Var },
    Rfft2 { x: Var, width: usize },
    Irfft2 { f: Var },
    ComplexConv { f: Var, kernel_re: Var, kernel_im: Var },
    CRelu { f: Var, branch: usize },
    ComplexAdd { a: Var, b: Var },
    ComplexScale { f: Var, beta: Var },
    L1Loss { pred: Var, branch: usize },
    WeightedSum { x: Var, weights: Tensor<T> },
    ComplexWeightedSum { f: Var, weights: ComplexTensor<T> },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
}

/// One recorded forward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Value<T>>>,
    branches: Vec<Vec<i8>>,
    frozen: Option<BranchPattern>,
}

/// Which side of every kink (ReLU, CReLU, L1) a forward pass took, in op order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BranchPattern(Vec<Vec<i8>>);

impl BranchPattern {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            branches: Vec::new(),
            frozen: None,
        }
    }

    /// A graph whose kinked ops follow `pattern` instead of the sign of their
    /// inputs, so the recorded function is the smooth piece `pattern` selects.
    pub fn with_branches(pattern: BranchPattern) -> Self {
        let mut g = Self::new();
        g.frozen = Some(pattern);
        g
    }

    pub fn branch_pattern(&self) -> BranchPattern {
        BranchPattern(self.branches.clone())
    }

    fn branch(&mut self, fresh: Vec<i8>) -> Result<usize> {
        let k = self.branches.len();
        let chosen = match &self.frozen {
            Some(p) => {
                let b = p.0.get(k).ok_or_else(|| {
                    Error::Config(format!("branch pattern has {} entries, graph needs more", p.0.len()))
                })?;
                if b.len() != fresh.len() {
                    return Err(dim_err(format!(
                        "branch {k}: pattern has {} entries, op has {}",
                        b.len(),
                        fresh.len()
                    )));
                }
                b.clone()
            }
            None => fresh,
        };
        self.branches.push(chosen);
        Ok(k)
    }

    fn push(&mut self, value: Value<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(Value::Real(t), Op::Leaf)
    }

    pub fn complex_leaf(&mut self, t: ComplexTensor<T>) -> Var {
        self.push(Value::Complex(t), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.as_real()
    }

    pub fn complex_value(&self, v: Var) -> &ComplexTensor<T> {
        self.nodes[v.0].value.as_complex()
    }

    pub fn is_complex(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].value, Value::Complex(_))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, groups: usize) -> Result<Var> {
        let out = conv::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            groups,
        )?;
        Ok(self.push(Value::Real(out), Op::Conv2d { x, kernel, bias, groups }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let out = norm::layer_norm(self.value(x), self.value(gain), self.value(shift))?;
        Ok(self.push(Value::Real(out), Op::LayerNorm { x, gain, shift }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = norm::softmax_lastdim(self.value(x))?;
        Ok(self.push(Value::Real(out), Op::Softmax { x }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = activation::gelu(self.value(x));
        self.push(Value::Real(out), Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let fresh = self.value(x).data().iter().map(|&v| i8::from(v > T::zero())).collect();
        let branch = self.branch(fresh)?;
        let out = masked(self.value(x), &self.branches[branch]);
        Ok(self.push(Value::Real(out), Op::Relu { x, branch }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, "add")?;
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(Value::Real(out), Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(Value::Real(out), Op::Scale { x, factor })
    }

    /// Channels `[start, end)` of a `[H, W, C]` map.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if start >= end || end > c {
            return Err(dim_err(format!("channel slice {}..{} of {}", start, end, c)));
        }
        let n = end - start;
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|px| px[start..end].iter().copied())
            .collect();
        let out = Tensor::from_vec(&[h, w, n], data)?;
        Ok(self.push(Value::Real(out), Op::SliceChannels { x, start }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (h, w, ca) = self.value(a).hwc()?;
        let (hb, wb, cb) = self.value(b).hwc()?;
        if (h, w) != (hb, wb) {
            return Err(dim_err(format!(
                "concat spatial mismatch: {}x{} vs {}x{}",
                h, w, hb, wb
            )));
        }
        let mut data = Vec::with_capacity(h * w * (ca + cb));
        for (pa, pb) in self
            .value(a)
            .data()
            .chunks_exact(ca)
            .zip(self.value(b).data().chunks_exact(cb))
        {
            data.extend_from_slice(pa);
            data.extend_from_slice(pb);
        }
        let out = Tensor::from_vec(&[h, w, ca + cb], data)?;
        Ok(self.push(Value::Real(out), Op::ConcatChannels { a, b }))
    }

    pub fn reshuffle(&mut self, x: Var, factor: usize, direction: shuffle::Direction) -> Result<Var> {
        let out = shuffle::pixel_reshuffle(self.value(x), factor, direction)?;
        Ok(self.push(Value::Real(out), Op::Reshuffle { x, factor, direction }))
    }

    pub fn head_gram(&mut self, a: Var, b: Var, heads: usize) -> Result<Var> {
        let out = attention::head_gram(self.value(a), self.value(b), heads)?;
        Ok(self.push(Value::Real(out), Op::HeadGram { a, b, heads }))
    }

    pub fn head_mix(&mut self, x: Var, attn: Var, heads: usize) -> Result<Var> {
        let out = attention::head_mix(self.value(x), self.value(attn), heads)?;
        Ok(self.push(Value::Real(out), Op::HeadMix { x, attn, heads }))
    }

    pub fn head_scale(&mut self, s: Var, tau: Var) -> Result<Var> {
        let out = attention::head_scale(self.value(s), self.value(tau))?;
        Ok(self.push(Value::Real(out), Op::HeadScale { s, tau }))
    }

    pub fn rfft2(&mut self, x: Var) -> Result<Var> {
        let width = self.value(x).hwc()?.1;
        let out = fft::rfft2(self.value(x))?;
        Ok(self.push(Value::Complex(out), Op::Rfft2 { x, width }))
    }

    pub fn irfft2(&mut self, f: Var, width: usize) -> Result<Var> {
        let out = fft::irfft2(self.complex_value(f), width)?;
        Ok(self.push(Value::Real(out), Op::Irfft2 { f }))
    }

    pub fn complex_conv2d(&mut self, f: Var, kernel_re: Var, kernel_im: Var) -> Result<Var> {
        let out = complex::complex_conv2d(
            self.complex_value(f),
            self.value(kernel_re),
            self.value(kernel_im),
        )?;
        Ok(self.push(Value::Complex(out), Op::ComplexConv { f, kernel_re, kernel_im }))
    }

    pub fn crelu(&mut self, f: Var) -> Result<Var> {
        let t = self.complex_value(f);
        let fresh = t.re().iter().chain(t.im()).map(|&v| i8::from(v > T::zero())).collect();
        let branch = self.branch(fresh)?;
        let out = complex_masked(self.complex_value(f), &self.branches[branch]);
        Ok(self.push(Value::Complex(out), Op::CRelu { f, branch }))
    }

    pub fn complex_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.complex_value(a), self.complex_value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(format!(
                "complex add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(Value::Complex(out), Op::ComplexAdd { a, b }))
    }

    /// `beta · f` with `beta` a one-element real node.
    pub fn complex_scale(&mut self, f: Var, beta: Var) -> Result<Var> {
        let b = self.value(beta);
        if b.len() != 1 {
            return Err(dim_err(format!("scale factor must be a scalar, got {:?}", b.shape())));
        }
        let b = b.data()[0];
        let mut out = self.complex_value(f).clone();
        let (re, im) = out.parts_mut();
        for v in re.iter_mut().chain(im.iter_mut()) {
            *v = *v * b;
        }
        Ok(self.push(Value::Complex(out), Op::ComplexScale { f, beta }))
    }

    /// Mean absolute difference; gradient flows into `pred` only.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.same_shape(t, "l1 loss")?;
        let n = p.len().max(1);
        let fresh = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&x, &y)| if x > y { 1 } else if x < y { -1 } else { 0 })
            .collect();
        let branch = self.branch(fresh)?;
        let (p, t) = (self.value(pred), self.value(target));
        let sum = p
            .data()
            .iter()
            .zip(t.data())
            .zip(&self.branches[branch])
            .fold(0.0f64, |a, ((&x, &y), &s)| a + f64::from(s) * (x - y).as_f64());
        let out = Tensor::scalar(T::lit(sum / n as f64));
        Ok(self.push(Value::Real(out), Op::L1Loss { pred, branch }))
    }

    /// `Σ weights ⊙ x`. A fixed random projection turns any op into a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let t = self.value(x);
        t.same_shape(&weights, "weighted sum")?;
        let s = t
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |a, (&v, &w)| a + v * w);
        Ok(self.push(Value::Real(Tensor::scalar(s)), Op::WeightedSum { x, weights }))
    }

    /// `Σ (w_re ⊙ re + w_im ⊙ im)` for a complex node.
    pub fn complex_weighted_sum(&mut self, f: Var, weights: ComplexTensor<T>) -> Result<Var> {
        let t = self.complex_value(f);
        if t.shape() != weights.shape() {
            return Err(dim_err(format!(
                "complex weighted sum: {:?} vs {:?}",
                t.shape(),
                weights.shape()
            )));
        }
        let s = t.re().iter().zip(weights.re()).fold(T::zero(), |a, (&v, &w)| a + v * w)
            + t.im().iter().zip(weights.im()).fold(T::zero(), |a, (&v, &w)| a + v * w);
        Ok(self.push(Value::Real(Tensor::scalar(s)), Op::ComplexWeightedSum { f, weights }))
    }

    /// Gradient of a scalar node with respect to every earlier node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(dim_err(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Value<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Value::Real(Tensor::scalar(T::one())));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0)?.as_ref().map(|g| g.as_real())
    }

    pub fn complex_grad(&self, v: Var) -> Option<&ComplexTensor<T>> {
        self.grads.get(v.0)?.as_ref().map(|g| g.as_complex())
    }

    fn backprop_node(&self, i: usize, g: &Value<T>, grads: &mut [Option<Value<T>>]) -> Result<()> {
        let mut acc = |v: Var, val: Value<T>| match &mut grads[v.0] {
            Some(existing) => existing.accumulate(val),
            slot @ None => *slot = Some(val),
        };
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, kernel, bias, groups } => {
                let r = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*kernel),
                    bias.is_some(),
                    *groups,
                    g.as_real(),
                )?;
                acc(*x, Value::Real(r.input));
                acc(*kernel, Value::Real(r.kernel));
                if let (Some(b), Some(db)) = (bias, r.bias) {
                    acc(*b, Value::Real(db));
                }
            }
            Op::LayerNorm { x, gain, shift } => {
                let r = norm::layer_norm_backward(
                    self.value(*x),
                    self.value(*gain),
                    self.value(*shift),
                    g.as_real(),
                )?;
                acc(*x, Value::Real(r.input));
                acc(*gain, Value::Real(r.gain));
                acc(*shift, Value::Real(r.shift));
            }
            Op::Softmax { x } => {
                let dx = norm::softmax_lastdim_backward(out.as_real(), g.as_real())?;
                acc(*x, Value::Real(dx));
            }
            Op::Gelu { x } => acc(*x, Value::Real(activation::gelu_backward(self.value(*x), g.as_real()))),
            Op::Relu { branch, x } => acc(*x, Value::Real(masked(g.as_real(), &self.branches[*branch]))),
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                acc(*x, Value::Real(g.as_real().map(|v| v * f)));
            }
            Op::SliceChannels { x, start } => {
                let (h, w, c) = self.value(*x).hwc()?;
                let gr = g.as_real();
                let n = gr.hwc()?.2;
                let mut dx = Tensor::zeros(&[h, w, c]);
                for (dst, src) in dx.data_mut().chunks_exact_mut(c).zip(gr.data().chunks_exact(n)) {
                    dst[*start..*start + n].copy_from_slice(src);
                }
                acc(*x, Value::Real(dx));
            }
            Op::ConcatChannels { a, b } => {
                let (h, w, ca) = self.value(*a).hwc()?;
                let cb = self.value(*b).hwc()?.2;
                let mut da = Vec::with_capacity(h * w * ca);
                let mut db = Vec::with_capacity(h * w * cb);
                for px in g.as_real().data().chunks_exact(ca + cb) {
                    da.extend_from_slice(&px[..ca]);
                    db.extend_from_slice(&px[ca..]);
                }
                acc(*a, Value::Real(Tensor::from_vec(&[h, w, ca], da)?));
                acc(*b, Value::Real(Tensor::from_vec(&[h, w, cb], db)?));
            }
            Op::Reshuffle { x, factor, direction } => {
                let dx = shuffle::pixel_reshuffle_backward(g.as_real(), *factor, *direction)?;
                acc(*x, Value::Real(dx));
            }
            Op::HeadGram { a, b, heads } => {
                let (da, db) =
                    attention::head_gram_backward(self.value(*a), self.value(*b), *heads, g.as_real())?;
                acc(*a, Value::Real(da));
                acc(*b, Value::Real(db));
            }
            Op::HeadMix { x, attn, heads } => {
                let (dx, da) =
                    attention::head_mix_backward(self.value(*x), self.value(*attn), *heads, g.as_real())?;
                acc(*x, Value::Real(dx));
                acc(*attn, Value::Real(da));
            }
            Op::HeadScale { s, tau } => {
                let (ds, dt) = attention::head_scale_backward(self.value(*s), self.value(*tau), g.as_real())?;
                acc(*s, Value::Real(ds));
                acc(*tau, Value::Real(dt));
            }
            Op::Rfft2 { x, width } => {
                let dx = fft::rfft2_backward(g.as_complex(), *width)?;
                acc(*x, Value::Real(dx));
            }
            Op::Irfft2 { f } => {
                let df = fft::irfft2_backward(g.as_real())?;
                acc(*f, Value::Complex(df));
            }
            Op::ComplexConv { f, kernel_re, kernel_im } => {
                let r = complex::complex_conv2d_backward(
                    self.complex_value(*f),
                    self.value(*kernel_re),
                    self.value(*kernel_im),
                    g.as_complex(),
                )?;
                acc(*f, Value::Complex(r.input));
                acc(*kernel_re, Value::Real(r.kernel_re));
                acc(*kernel_im, Value::Real(r.kernel_im));
            }
            Op::CRelu { f, branch } => {
                acc(*f, Value::Complex(complex_masked(g.as_complex(), &self.branches[*branch])));
            }
            Op::ComplexAdd { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::ComplexScale { f, beta } => {
                let b = self.value(*beta).data()[0];
                let gc = g.as_complex();
                let fv = self.complex_value(*f);
                let mut df = gc.clone();
                let (re, im) = df.parts_mut();
                for v in re.iter_mut().chain(im.iter_mut()) {
                    *v = *v * b;
                }
                let dot = gc.re().iter().zip(fv.re()).fold(T::zero(), |a, (&x, &y)| a + x * y)
                    + gc.im().iter().zip(fv.im()).fold(T::zero(), |a, (&x, &y)| a + x * y);
                acc(*f, Value::Complex(df));
                acc(*beta, Value::Real(Tensor::scalar(dot)));
            }
            Op::L1Loss { pred, branch } => {
                let p = self.value(*pred);
                let scale = g.as_real().data()[0] / T::lit(p.len().max(1) as f64);
                let mut dp = Tensor::zeros(p.shape());
                for (d, &s) in dp.data_mut().iter_mut().zip(&self.branches[*branch]) {
                    *d = T::lit(f64::from(s)) * scale;
                }
                acc(*pred, Value::Real(dp));
            }
            Op::WeightedSum { x, weights } => {
                let s = g.as_real().data()[0];
                acc(*x, Value::Real(weights.map(|w| w * s)));
            }
            Op::ComplexWeightedSum { f, weights } => {
                let s = g.as_real().data()[0];
                let mut df = weights.clone();
                let (re, im) = df.parts_mut();
                for v in re.iter_mut().chain(im.iter_mut()) {
                    *v = *v * s;
                }
                acc(*f, Value::Complex(df));
            }
        }
        Ok(())
    }
}

fn masked<T: Real>(t: &Tensor<T>, mask: &[i8]) -> Tensor<T> {
    let mut out = t.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask) {
        if m == 0 {
            *v = T::zero();
        }
    }
    out
}

/// `mask` covers the real parts, then the imaginary parts.
fn complex_masked<T: Real>(t: &ComplexTensor<T>, mask: &[i8]) -> ComplexTensor<T> {
    let mut out = t.clone();
    let n = out.re().len();
    let (re, im) = out.parts_mut();
    for (v, &m) in re.iter_mut().chain(im.iter_mut()).zip(mask.iter().take(2 * n)) {
        if m == 0 {
            *v = T::zero();
        }
    }
    out
}
