//! Small dense layers with hand-written backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Anything that owns named trainable tensors.
///
/// Visiting order must be stable: optimizers and archives rely on it.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, t| t.fill(0.0));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.all_finite());
        ok
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.extend_from_slice(&t.data));
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |_, t| {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        });
    }

    fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((format!("{prefix}.{name}"), t.clone())));
        out
    }

    /// Overwrite tensors from `(name, tensor)` pairs; every tensor must be present.
    fn load_named(&mut self, prefix: &str, entries: &[(String, Tensor)]) -> Result<()> {
        let mut err = None;
        self.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            let key = format!("{prefix}.{name}");
            match entries.iter().find(|(n, _)| *n == key) {
                Some((_, src)) if src.shape == t.shape => t.data.copy_from_slice(&src.data),
                Some((_, src)) => {
                    err = Some(Error::Archive(format!(
                        "tensor {key}: shape {:?} does not match {:?}",
                        src.shape, t.shape
                    )))
                }
                None => err = Some(Error::Archive(format!("missing tensor {key}"))),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Gradient buffer shaped like `p`.
pub fn grads_like<P: Params + Clone>(p: &P) -> P {
    let mut g = p.clone();
    g.zero_grad();
    g
}

/// Accumulate `src` into `dst` (same concrete layout).
pub fn add_grads<P: Params>(dst: &mut P, src: &P) {
    let flat = src.flat();
    let mut off = 0;
    dst.visit_mut(&mut |_, t| {
        for v in t.data.iter_mut() {
            *v += flat[off];
            off += 1;
        }
    });
}

pub fn scale_grads<P: Params>(g: &mut P, s: f64) {
    g.visit_mut(&mut |_, t| t.data.iter_mut().for_each(|v| *v *= s));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Act {
    Relu,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Act {
    pub fn f(self, x: f64) -> f64 {
        match self {
            Act::Relu => x.max(0.0),
            Act::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        }
    }

    pub fn df(self, x: f64) -> f64 {
        match self {
            Act::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Act::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `z / |z|` together with `|z|`.
pub fn normalize(z: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(z);
    (z.iter().map(|v| v / n).collect(), n)
}

/// Backward of `f = z/|z|`: `dz = (df - f<f,df>)/|z|`.
pub fn normalize_backward(f: &[f64], n: f64, df: &[f64]) -> Vec<f64> {
    let p = dot(f, df);
    f.iter().zip(df).map(|(fi, d)| (d - fi * p) / n).collect()
}

/// Dense affine layer, weight stored row-major as `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialisation for weight and bias.
    pub fn new(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = 1.0 / (inp as f64).sqrt();
        let mut w = Tensor::zeros(&[out, inp]);
        let mut b = Tensor::zeros(&[out]);
        w.data.iter_mut().for_each(|v| *v = rng.random_range(-k..k));
        b.data.iter_mut().for_each(|v| *v = rng.random_range(-k..k));
        Linear { w, b }
    }

    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear { w: Tensor::zeros(&[out, inp]), b: Tensor::zeros(&[out]) }
    }

    pub fn inp(&self) -> usize {
        self.w.shape[1]
    }

    pub fn out(&self) -> usize {
        self.w.shape[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n = self.inp();
        debug_assert_eq!(x.len(), n);
        self.w
            .data
            .chunks_exact(n)
            .zip(&self.b.data)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    /// Accumulates parameter gradients into `g` and returns `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], g: &mut Linear) -> Vec<f64> {
        let n = self.inp();
        let mut dx = vec![0.0; n];
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g.b.data[o] += d;
            let row = &self.w.data[o * n..(o + 1) * n];
            let grow = &mut g.w.data[o * n..(o + 1) * n];
            for i in 0..n {
                grow[i] += d * x[i];
                dx[i] += d * row[i];
            }
        }
        dx
    }

    /// Input gradient only.
    pub fn backward_input(&self, dy: &[f64]) -> Vec<f64> {
        let n = self.inp();
        let mut dx = vec![0.0; n];
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &self.w.data[o * n..(o + 1) * n];
            for i in 0..n {
                dx[i] += d * row[i];
            }
        }
        dx
    }

    /// Jacobian-vector product (bias excluded).
    pub fn jvp(&self, dx: &[f64]) -> Vec<f64> {
        let n = self.inp();
        self.w.data.chunks_exact(n).map(|row| dot(row, dx)).collect()
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w", &self.w);
        f("b", &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

/// One hidden layer whose output layer also sees the raw input:
/// `y = W_out [act(W_1 x + b_1); x] + b_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipMlp {
    pub l1: Linear,
    pub out: Linear,
    pub act: Act,
}

pub struct SkipMlpCache {
    pub x: Vec<f64>,
    pub pre: Vec<f64>,
    pub cat: Vec<f64>,
}

impl SkipMlp {
    /// Hidden block of the output layer starts at zero; the input block is
    /// filled by `skip_init(row, col)`.
    pub fn new(
        inp: usize,
        hidden: usize,
        out: usize,
        act: Act,
        rng: &mut ChaCha8Rng,
        skip_init: impl Fn(usize, usize) -> f64,
    ) -> Self {
        let l1 = Linear::new(inp, hidden, rng);
        let mut o = Linear::zeros(hidden + inp, out);
        let w = hidden + inp;
        for r in 0..out {
            for c in 0..inp {
                o.w.data[r * w + hidden + c] = skip_init(r, c);
            }
        }
        SkipMlp { l1, out: o, act }
    }

    pub fn hidden(&self) -> usize {
        self.l1.out()
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, SkipMlpCache) {
        let pre = self.l1.forward(x);
        let mut cat: Vec<f64> = pre.iter().map(|&v| self.act.f(v)).collect();
        cat.extend_from_slice(x);
        let y = self.out.forward(&cat);
        (y, SkipMlpCache { x: x.to_vec(), pre, cat })
    }

    pub fn backward(&self, c: &SkipMlpCache, dy: &[f64], g: &mut SkipMlp) -> Vec<f64> {
        let dcat = self.out.backward(&c.cat, dy, &mut g.out);
        let h = self.hidden();
        let dpre: Vec<f64> =
            dcat[..h].iter().zip(&c.pre).map(|(d, p)| d * self.act.df(*p)).collect();
        let mut dx = self.l1.backward(&c.x, &dpre, &mut g.l1);
        for (a, b) in dx.iter_mut().zip(&dcat[h..]) {
            *a += b;
        }
        dx
    }

    pub fn backward_input(&self, c: &SkipMlpCache, dy: &[f64]) -> Vec<f64> {
        let dcat = self.out.backward_input(dy);
        let h = self.hidden();
        let dpre: Vec<f64> =
            dcat[..h].iter().zip(&c.pre).map(|(d, p)| d * self.act.df(*p)).collect();
        let mut dx = self.l1.backward_input(&dpre);
        for (a, b) in dx.iter_mut().zip(&dcat[h..]) {
            *a += b;
        }
        dx
    }
}

impl Params for SkipMlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.l1.visit(&mut |n, t| f(&format!("l1.{n}"), t));
        self.out.visit(&mut |n, t| f(&format!("out.{n}"), t));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.l1.visit_mut(&mut |n, t| f(&format!("l1.{n}"), t));
        self.out.visit_mut(&mut |n, t| f(&format!("out.{n}"), t));
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step<P: Params>(&mut self, p: &mut P, g: &P) {
        let gf = g.flat();
        if self.m.len() != gf.len() {
            self.m = vec![0.0; gf.len()];
            self.v = vec![0.0; gf.len()];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut i = 0;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        p.visit_mut(&mut |_, t| {
            for w in t.data.iter_mut() {
                let gi = gf[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
                i += 1;
            }
        });
    }

    pub fn state(&self) -> (u64, &[f64], &[f64]) {
        (self.t, &self.m, &self.v)
    }

    pub fn set_state(&mut self, t: u64, m: Vec<f64>, v: Vec<f64>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize, h: f64) -> f64 {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    #[test]
    fn gelu_derivative_matches_fd() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let num = (Act::Gelu.f(x + 1e-6) - Act::Gelu.f(x - 1e-6)) / 2e-6;
            assert!((num - Act::Gelu.df(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn skip_mlp_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = SkipMlp::new(5, 7, 4, Act::Gelu, &mut rng, |r, c| if r == c { 2.0 } else { 0.0 });
        m.out.w.data.iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * (i as f64).sin());
        let x: Vec<f64> = (0..5).map(|i| (i as f64 * 0.37).cos()).collect();
        let wsum = |x: &[f64]| -> f64 {
            let (y, _) = m.forward(x);
            y.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v).sum()
        };
        let (_, c) = m.forward(&x);
        let dy: Vec<f64> = (0..4).map(|i| i as f64 + 1.0).collect();
        let mut g = grads_like(&m);
        let dx = m.backward(&c, &dy, &mut g);
        for i in 0..5 {
            assert!((dx[i] - fd(wsum, &x, i, 1e-6)).abs() < 1e-7);
        }
        let dx2 = m.backward_input(&c, &dy);
        assert_eq!(dx, dx2);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = Linear::zeros(2, 1);
        p.w.data = vec![3.0, -2.0];
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            let mut g = grads_like(&p);
            g.w.data = p.w.data.iter().map(|w| 2.0 * w).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.w.data.iter().all(|w| w.abs() < 0.05));
    }
}
