use crate::tensor::{ComplexTensor, Real, Tensor};

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// `σ(2u)` with `u = √(2/π)(v + 0.044715 v³)`, i.e. `(1 + tanh u) / 2`.
#[inline]
fn gelu_gate<T: Real>(v: T) -> (T, T) {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let two = T::lit(2.0);
    let u = c * (v + a * v * v * v);
    let s = T::one() / (T::one() + (-two * u).exp());
    (s, c * (T::one() + T::lit(3.0) * a * v * v))
}

/// GELU, tanh form.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * gelu_gate(v).0)
}

pub fn gelu_backward<T: Real>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let two = T::lit(2.0);
    let mut out = Tensor::zeros(x.shape());
    for ((o, &v), &g) in out.data_mut().iter_mut().zip(x.data()).zip(grad.data()) {
        let (s, du) = gelu_gate(v);
        *o = g * (s + v * two * s * (T::one() - s) * du);
    }
    out
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Subgradient 0 at the kink.
pub fn relu_backward<T: Real>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());
    for ((o, &v), &g) in out.data_mut().iter_mut().zip(x.data()).zip(grad.data()) {
        *o = if v > T::zero() { g } else { T::zero() };
    }
    out
}

/// ReLU applied separately to the real and imaginary parts.
pub fn crelu<T: Real>(f: &ComplexTensor<T>) -> ComplexTensor<T> {
    let mut out = f.clone();
    let (re, im) = out.parts_mut();
    for v in re.iter_mut().chain(im.iter_mut()) {
        *v = v.max(T::zero());
    }
    out
}

pub fn crelu_backward<T: Real>(f: &ComplexTensor<T>, grad: &ComplexTensor<T>) -> ComplexTensor<T> {
    let mut out = grad.clone();
    let (re, im) = out.parts_mut();
    for (g, &v) in re.iter_mut().zip(f.re()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    for (g, &v) in im.iter_mut().zip(f.im()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    out
}
