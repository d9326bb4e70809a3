//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every primitive applied during one forward pass.
//! Calling [`Graph::backward`] walks the tape in reverse exactly once and
//! leaves per-node gradients behind; parameter gradients are read out with
//! [`Graph::param_grads`]. Graphs are single-threaded and rebuilt per step.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::tensor::{Gradients, ParameterStore, Tensor};
use crate::error::{Error, Result};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScalePerSample(Var, Vec<f64>),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Silu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        planes: usize,
        input: [usize; 3],
        factor: [usize; 3],
    },
    GroupNorm {
        x: Var,
        block: usize,
        rstd: Vec<f64>,
    },
    ScaleShift {
        x: Var,
        scale: Var,
        shift: Var,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
        len: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Splits `(N, C, spatial...)` into `(N, C, [D, H, W])` with `D = 1` for 2D.
fn spatial3(shape: &[usize]) -> Result<[usize; 3]> {
    match shape.len() {
        4 => Ok([1, shape[2], shape[3]]),
        5 => Ok([shape[2], shape[3], shape[4]]),
        _ => Err(Error::Shape(format!(
            "expected a 2D (N,C,H,W) or 3D (N,C,D,H,W) tensor, got {shape:?}"
        ))),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.grads.is_some() {
            return Err(Error::Graph("graph already consumed by backward".into()));
        }
        debug_assert!(
            value.is_finite(),
            "non-finite value produced by {:?}",
            std::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to parameter `name`; repeated lookups share one node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Leaf, true)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copies `x` into a fresh constant leaf, cutting gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// Multiplies batch item `n` by the constant `coeffs[n]`.
    pub fn scale_per_sample(&mut self, x: Var, coeffs: &[f64]) -> Result<Var> {
        let xt = self.value(x);
        if coeffs.len() != xt.shape()[0] {
            return Err(Error::Shape(format!(
                "{} per-sample coefficients for batch {}",
                coeffs.len(),
                xt.shape()[0]
            )));
        }
        let m = xt.per_sample();
        let data = xt.data().iter().enumerate().map(|(i, v)| v * coeffs[i / m]).collect();
        let t = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::ScalePerSample(x, coeffs.to_vec()), rg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * v).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::Square(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::Silu(x), rg)
    }

    /// `x (N, in) -> x W^T + b` with `W (out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::Shape(format!("linear bias {:?}", self.shape(b))));
            }
        }
        let mut y = vec![0.0; n * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        super::gemm::gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut y,
        );
        let t = Tensor::new(vec![n, dout], y)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(t, Op::Linear { x, w, b }, rg)
    }

    /// 2D or 3D convolution with padding `k / 2` and a uniform stride
    /// applied to every spatial axis. Weight is `(Cout, Cin, [kd,] kh, kw)`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let input = spatial3(&xs)?;
        if ws.len() != xs.len() {
            return Err(Error::Shape(format!("conv: input {xs:?}, weight {ws:?}")));
        }
        let kernel = if ws.len() == 5 {
            [ws[2], ws[3], ws[4]]
        } else {
            [1, ws[2], ws[3]]
        };
        if ws[1] != xs[1] {
            return Err(Error::Shape(format!(
                "conv: weight expects {} input channels, got {}",
                ws[1], xs[1]
            )));
        }
        if kernel.iter().any(|k| k % 2 == 0) || stride == 0 {
            return Err(Error::Shape(format!("conv: kernel {kernel:?} stride {stride}")));
        }
        let strides = if xs.len() == 5 {
            [stride; 3]
        } else {
            [1, stride, stride]
        };
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::Shape(format!("conv bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(xs[0], xs[1], ws[0], input, kernel, strides);
        let y = kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let mut shape = vec![xs[0], ws[0]];
        if xs.len() == 5 {
            shape.extend_from_slice(&geom.output);
        } else {
            shape.extend_from_slice(&geom.output[1..]);
        }
        let t = Tensor::new(shape, y)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(t, Op::Conv { x, w, b, geom }, rg)
    }

    /// Nearest-neighbour x2 upsampling of every spatial axis.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let input = spatial3(&xs)?;
        let factor = if xs.len() == 5 { [2, 2, 2] } else { [1, 2, 2] };
        let planes = xs[0] * xs[1];
        let y = kernels::upsample_forward(self.value(x).data(), planes, input, factor);
        let shape: Vec<usize> = xs
            .iter()
            .enumerate()
            .map(|(i, &d)| if i >= 2 { d * 2 } else { d })
            .collect();
        let t = Tensor::new(shape, y)?;
        let rg = self.rg(x);
        self.push(
            t,
            Op::Upsample {
                x,
                planes,
                input,
                factor,
            },
            rg,
        )
    }

    /// Group normalization without affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::Shape(format!("group_norm on {xs:?}")));
        }
        if groups == 0 || !xs[1].is_multiple_of(groups) {
            return Err(Error::Shape(format!(
                "{groups} groups do not divide {} channels",
                xs[1]
            )));
        }
        let block = xs[1] / groups * xs[2..].iter().product::<usize>();
        let out = kernels::group_norm_forward(self.value(x).data(), block, GROUP_NORM_EPS);
        let t = Tensor::new(xs, out.y)?;
        let rg = self.rg(x);
        self.push(
            t,
            Op::GroupNorm {
                x,
                block,
                rstd: out.rstd,
            },
            rg,
        )
    }

    /// `x * (1 + scale) + shift` with `scale`, `shift` of shape `(N, C)`.
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let want = [xs[0], xs[1]];
        if self.shape(scale) != want || self.shape(shift) != want {
            return Err(Error::Shape(format!(
                "scale_shift: x {xs:?}, scale {:?}, shift {:?}",
                self.shape(scale),
                self.shape(shift)
            )));
        }
        let sp = self.value(x).spatial_len();
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let nc = i / sp;
                v * (1.0 + sc[nc]) + sh[nc]
            })
            .collect();
        let t = Tensor::new(xs, data)?;
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(t, Op::ScaleShift { x, scale, shift }, rg)
    }

    /// Per-channel `x * gamma + beta` with `gamma`, `beta` of shape `(C,)`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::Shape(format!("channel_affine on {xs:?}")));
        }
        let sp = self.value(x).spatial_len();
        let c = xs[1];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / sp) % c;
                v * g[ch] + b[ch]
            })
            .collect();
        let t = Tensor::new(xs, data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(t, Op::ChannelAffine { x, gamma, beta }, rg)
    }

    /// Multi-head `softmax(Q^T K / sqrt(d)) V` where every spatial position of
    /// the `(N, C, spatial...)` inputs is a token and channels are split into
    /// `heads` contiguous blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        same_shape(self.value(q), self.value(k), "attention q/k")?;
        same_shape(self.value(q), self.value(v), "attention q/v")?;
        if qs.len() < 3 || heads == 0 || !qs[1].is_multiple_of(heads) {
            return Err(Error::Shape(format!("attention: {heads} heads for shape {qs:?}")));
        }
        let tokens = self.value(q).spatial_len();
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            qs[0],
            qs[1],
            tokens,
            heads,
        );
        let t = Tensor::new(qs, out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(t, Op::Attention { q, k, v, heads, probs }, rg)
    }

    /// Concatenates along the channel axis (axis 1).
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(first).to_vec();
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::Shape(format!("concat: {base:?} vs {s:?}")));
            }
        }
        let n = base[0];
        let sp: usize = base[2..].iter().product();
        let channels: usize = xs.iter().map(|&x| self.shape(x)[1]).sum();
        let mut data = Vec::with_capacity(n * channels * sp);
        for i in 0..n {
            for &x in xs {
                let t = self.value(x);
                let m = t.per_sample();
                data.extend_from_slice(&t.data()[i * m..(i + 1) * m]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let t = Tensor::new(shape, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(t, Op::Concat(xs.to_vec()), rg)
    }

    /// Channels `start..start + len` along axis 1.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || len == 0 || start + len > xs[1] {
            return Err(Error::Shape(format!("narrow {start}+{len} of {xs:?}")));
        }
        let sp: usize = xs[2..].iter().product();
        let t = self.value(x);
        let m = t.per_sample();
        let mut data = Vec::with_capacity(xs[0] * len * sp);
        for i in 0..xs[0] {
            let off = i * m + start * sp;
            data.extend_from_slice(&t.data()[off..off + len * sp]);
        }
        let mut shape = xs;
        shape[1] = len;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        self.push(t, Op::Narrow { x, start, len }, rg)
    }

    /// Reverse sweep from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Graph("backward called twice without a new forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, d: &[f64]| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g);
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                send(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                send(*a, &da);
                send(*b, &db);
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                send(*x, &d);
            }
            Op::ScalePerSample(x, coeffs) => {
                let m = g.len() / coeffs.len();
                let d: Vec<f64> = g.iter().enumerate().map(|(j, v)| v * coeffs[j / m]).collect();
                send(*x, &d);
            }
            Op::Square(x) => {
                let d: Vec<f64> = g.iter().zip(val(*x)).map(|(g, x)| 2.0 * g * x).collect();
                send(*x, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; val(*x).len()];
                send(*x, &d);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let d = vec![g[0] / n as f64; n];
                send(*x, &d);
            }
            Op::Silu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                send(*x, &d);
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = g.len() / n;
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; n * din];
                    super::gemm::gemm(n, dout, din, g, false, val(*w), false, 0.0, &mut dx);
                    send(*x, &dx);
                }
                let mut dw = vec![0.0; dout * din];
                super::gemm::gemm(dout, n, din, g, true, val(*x), false, 0.0, &mut dw);
                send(*w, &dw);
                if let Some(b) = b {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    send(*b, &db);
                }
            }
            Op::Conv { x, w, b, geom } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let cg = kernels::conv_backward(val(*x), val(*w), g, geom, need_dx);
                if let Some(dx) = cg.dx {
                    send(*x, &dx);
                }
                send(*w, &cg.dw);
                if let Some(b) = b {
                    send(*b, &cg.db);
                }
            }
            Op::Upsample {
                x,
                planes,
                input,
                factor,
            } => {
                let d = kernels::upsample_backward(g, *planes, *input, *factor);
                send(*x, &d);
            }
            Op::GroupNorm { x, block, rstd } => {
                let d = kernels::group_norm_backward(node.value.data(), rstd, g, *block);
                send(*x, &d);
            }
            Op::ScaleShift { x, scale, shift } => {
                let sp = self.nodes[x.0].value.spatial_len();
                let sc = val(*scale);
                let xv = val(*x);
                let nc = sc.len();
                let mut dx = vec![0.0; g.len()];
                let mut dscale = vec![0.0; nc];
                let mut dshift = vec![0.0; nc];
                for j in 0..nc {
                    let r = j * sp..(j + 1) * sp;
                    for ((o, gv), xv) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xv[r]) {
                        *o = gv * (1.0 + sc[j]);
                        dscale[j] += gv * xv;
                        dshift[j] += gv;
                    }
                }
                send(*x, &dx);
                send(*scale, &dscale);
                send(*shift, &dshift);
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let sp = self.nodes[x.0].value.spatial_len();
                let gm = val(*gamma);
                let c = gm.len();
                let xv = val(*x);
                let mut dx = vec![0.0; g.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (j, ((o, gv), xv)) in dx.iter_mut().zip(g).zip(xv).enumerate() {
                    let ch = (j / sp) % c;
                    *o = gv * gm[ch];
                    dg[ch] += gv * xv;
                    db[ch] += gv;
                }
                send(*x, &dx);
                send(*gamma, &dg);
                send(*beta, &db);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let qs = self.nodes[q.0].value.shape();
                let tokens = self.nodes[q.0].value.spatial_len();
                let (dq, dk, dv) =
                    kernels::attention_backward(val(*q), val(*k), val(*v), probs, g, qs[0], qs[1], tokens, *heads);
                send(*q, &dq);
                send(*k, &dk);
                send(*v, &dv);
            }
            Op::Concat(xs) => {
                let n = node.value.shape()[0];
                let m = node.value.per_sample();
                let mut off = 0;
                for &x in xs {
                    let mx = self.nodes[x.0].value.per_sample();
                    let mut d = Vec::with_capacity(n * mx);
                    for s in 0..n {
                        d.extend_from_slice(&g[s * m + off..s * m + off + mx]);
                    }
                    send(x, &d);
                    off += mx;
                }
            }
            Op::Narrow { x, start, len } => {
                let xt = &self.nodes[x.0].value;
                let sp = xt.spatial_len().max(1);
                let (n, mx) = (xt.shape()[0], xt.per_sample());
                let mut d = vec![0.0; xt.len()];
                for s in 0..n {
                    let dst = s * mx + start * sp;
                    let src = s * len * sp;
                    d[dst..dst + len * sp].copy_from_slice(&g[src..src + len * sp]);
                }
                send(*x, &d);
            }
        }
    }

    /// Gradient of the last backward pass with respect to node `v`.
    pub fn grad(&self, v: Var) -> Result<Vec<f64>> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Graph("backward has not been run".into()))?;
        Ok(grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.value(v).len()]))
    }

    /// Gradients for every parameter in `store`; parameters the loss never
    /// touched get zeros.
    pub fn param_grads(&self, store: &ParameterStore) -> Result<Gradients> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Graph("backward has not been run".into()))?;
        let mut out = Gradients::new();
        for (name, t) in store.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|v| grads[v.0].clone())
                .unwrap_or_else(|| vec![0.0; t.len()]);
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}
