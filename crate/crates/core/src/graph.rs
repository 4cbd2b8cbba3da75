//! Tape-based reverse-mode differentiation.
//!
//! Values are computed eagerly as nodes are pushed. [`Graph::grad`] records
//! the backward pass as ordinary graph nodes, so a gradient can itself be
//! differentiated (needed for the input-gradient penalty on discriminators).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kernels::{self, ConvCfg};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Pow(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    /// Elementwise product with a constant (piecewise-linear activations).
    MaskMul(Var, Arc<Tensor>),
    Conv {
        x: Var,
        w: Var,
        cfg: ConvCfg,
    },
    ConvInputGrad {
        gy: Var,
        w: Var,
        cfg: ConvCfg,
    },
    ConvWeightGrad {
        x: Var,
        gy: Var,
        cfg: ConvCfg,
    },
    AvgPool2(Var),
    AvgUnpool2(Var),
    Gather(Var, Arc<Vec<usize>>),
    ScatterAdd(Var, Arc<Vec<usize>>),
    Broadcast(Var),
    SumTo(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    PadChannels(Var, usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new(Exec::default())
    }
}

impl Graph {
    pub fn new(exec: Exec) -> Self {
        Graph {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf sharing storage with the caller.
    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf sharing storage with the caller.
    pub fn param_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_shared(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|v| v.powf(p));
        self.push(out, Op::Pow(a, p), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    fn mask_mul(&mut self, a: Var, mask: Arc<Tensor>) -> Result<Var> {
        let out = self.value(a).zip_map(&mask, |x, m| x * m)?;
        Ok(self.push(out, Op::MaskMul(a, mask), &[a]))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { slope });
        self.mask_mul(a, Arc::new(mask)).expect("mask shares input shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let sign = self.value(a).map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.mask_mul(a, Arc::new(sign)).expect("mask shares input shape")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, cfg: ConvCfg) -> Result<Var> {
        let out = kernels::conv2d(self.exec, self.value(x), self.value(w), cfg)?;
        Ok(self.push(out, Op::Conv { x, w, cfg }, &[x, w]))
    }

    /// Transposed convolution; `w` is `[in, out, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, cfg: ConvCfg) -> Result<Var> {
        let [_, _, h, wd] = self.shape(x);
        let [_, _, kh, kw] = self.shape(w);
        let oh = cfg.transposed_len(h, kh);
        let ow = cfg.transposed_len(wd, kw);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Shape(format!(
                    "transposed conv produces empty output from {h}x{wd}"
                )))
            }
        };
        self.conv_input_grad(x, w, cfg, (oh, ow))
    }

    fn conv_input_grad(&mut self, gy: Var, w: Var, cfg: ConvCfg, hw: (usize, usize)) -> Result<Var> {
        let out = kernels::conv2d_input_grad(self.exec, self.value(gy), self.value(w), cfg, hw)?;
        Ok(self.push(out, Op::ConvInputGrad { gy, w, cfg }, &[gy, w]))
    }

    fn conv_weight_grad(&mut self, x: Var, gy: Var, cfg: ConvCfg, k: (usize, usize)) -> Result<Var> {
        let out = kernels::conv2d_weight_grad(self.exec, self.value(x), self.value(gy), cfg, k)?;
        Ok(self.push(out, Op::ConvWeightGrad { x, gy, cfg }, &[x, gy]))
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let out = kernels::avg_pool2(self.exec, self.value(a))?;
        Ok(self.push(out, Op::AvgPool2(a), &[a]))
    }

    fn avg_unpool2(&mut self, a: Var) -> Var {
        let out = kernels::avg_unpool2(self.exec, self.value(a));
        self.push(out, Op::AvgUnpool2(a), &[a])
    }

    fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>, out_shape: Shape) -> Var {
        let out = kernels::gather(self.value(a), &idx, out_shape);
        self.push(out, Op::Gather(a, idx), &[a])
    }

    fn scatter_add(&mut self, a: Var, idx: Arc<Vec<usize>>, out_shape: Shape) -> Var {
        let out = kernels::scatter_add(self.value(a), &idx, out_shape);
        self.push(out, Op::ScatterAdd(a, idx), &[a])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let (idx, shape) = kernels::upsample2_index(self.shape(a));
        self.gather(a, Arc::new(idx), shape)
    }

    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let (idx, shape) = kernels::max_pool2_index(self.value(a))?;
        Ok(self.gather(a, Arc::new(idx), shape))
    }

    pub fn broadcast(&mut self, a: Var, to: Shape) -> Result<Var> {
        if self.shape(a) == to {
            return Ok(a);
        }
        let out = kernels::broadcast(self.value(a), to)?;
        Ok(self.push(out, Op::Broadcast(a), &[a]))
    }

    pub fn sum_to(&mut self, a: Var, to: Shape) -> Result<Var> {
        if self.shape(a) == to {
            return Ok(a);
        }
        let out = kernels::sum_to(self.value(a), to)?;
        Ok(self.push(out, Op::SumTo(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.sum_to(a, [1, 1, 1, 1]).expect("any shape reduces to a scalar")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the given shape's broadcast axes, keeping `to`.
    pub fn mean_to(&mut self, a: Var, to: Shape) -> Result<Var> {
        let factor = self.value(a).numel() / to.iter().product::<usize>();
        let s = self.sum_to(a, to)?;
        Ok(self.scale(s, 1.0 / factor as f64))
    }

    /// Adds a `[1, c, 1, 1]` bias.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x);
        let bb = self.broadcast(b, shape)?;
        self.add(x, bb)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&tensors)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = kernels::slice_channels(self.value(a), start, len)?;
        Ok(self.push(out, Op::Slice(a, start), &[a]))
    }

    fn pad_channels(&mut self, a: Var, start: usize, total: usize) -> Var {
        let out = kernels::pad_channels(self.value(a), start, total);
        self.push(out, Op::PadChannels(a, start), &[a])
    }

    /// Mean absolute difference of two same-shape values.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned vars are graph nodes, so they can be differentiated
    /// again. Inputs with no path to `output` get a zero constant.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(output).numel() != 1 {
            return Err(Error::Shape(format!(
                "grad needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Var>> = vec![None; output.0 + 1];
        let seed = self.constant(Tensor::full(self.shape(output), 1.0));
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let me = Var(i);
            let contribs = self.backward_op(&op, me, g)?;
            for (input, contrib) in contribs {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|&v| match grads.get(v.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(v);
                    self.constant(Tensor::zeros(shape))
                }
            })
            .collect())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_op(&mut self, op: &Op, me: Var, g: Var) -> Result<Vec<(Var, Var)>> {
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((a, g));
                out.push((b, g));
            }
            Op::Sub(a, b) => {
                out.push((a, g));
                if self.wants(b) {
                    let neg = self.scale(g, -1.0);
                    out.push((b, neg));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let ga = self.mul(g, b)?;
                    out.push((a, ga));
                }
                if self.wants(b) {
                    let gb = self.mul(g, a)?;
                    out.push((b, gb));
                }
            }
            Op::Scale(a, c) => {
                let ga = self.scale(g, c);
                out.push((a, ga));
            }
            Op::AddScalar(a) => out.push((a, g)),
            Op::Pow(a, p) => {
                let d = self.pow(a, p - 1.0);
                let d = self.scale(d, p);
                let ga = self.mul(g, d)?;
                out.push((a, ga));
            }
            Op::Exp(a) => {
                let ga = self.mul(g, me)?;
                out.push((a, ga));
            }
            Op::Log(a) => {
                let inv = self.pow(a, -1.0);
                let ga = self.mul(g, inv)?;
                out.push((a, ga));
            }
            Op::Sigmoid(a) => {
                let neg = self.scale(me, -1.0);
                let one_minus = self.add_scalar(neg, 1.0);
                let d = self.mul(me, one_minus)?;
                let ga = self.mul(g, d)?;
                out.push((a, ga));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                let ga = self.mul(g, s)?;
                out.push((a, ga));
            }
            Op::MaskMul(a, ref mask) => {
                let ga = self.mask_mul(g, Arc::clone(mask))?;
                out.push((a, ga));
            }
            Op::Conv { x, w, cfg } => {
                let [_, _, h, wd] = self.shape(x);
                let [_, _, kh, kw] = self.shape(w);
                if self.wants(x) {
                    let gx = self.conv_input_grad(g, w, cfg, (h, wd))?;
                    out.push((x, gx));
                }
                if self.wants(w) {
                    let gw = self.conv_weight_grad(x, g, cfg, (kh, kw))?;
                    out.push((w, gw));
                }
            }
            Op::ConvInputGrad { gy, w, cfg } => {
                let [_, _, kh, kw] = self.shape(w);
                if self.wants(gy) {
                    let ggy = self.conv2d(g, w, cfg)?;
                    out.push((gy, ggy));
                }
                if self.wants(w) {
                    let gw = self.conv_weight_grad(g, gy, cfg, (kh, kw))?;
                    out.push((w, gw));
                }
            }
            Op::ConvWeightGrad { x, gy, cfg } => {
                let [_, _, h, wd] = self.shape(x);
                if self.wants(x) {
                    let gx = self.conv_input_grad(gy, g, cfg, (h, wd))?;
                    out.push((x, gx));
                }
                if self.wants(gy) {
                    let ggy = self.conv2d(x, g, cfg)?;
                    out.push((gy, ggy));
                }
            }
            Op::AvgPool2(a) => {
                let ga = self.avg_unpool2(g);
                out.push((a, ga));
            }
            Op::AvgUnpool2(a) => {
                let ga = self.avg_pool2(g)?;
                out.push((a, ga));
            }
            Op::Gather(a, ref idx) => {
                let shape = self.shape(a);
                let ga = self.scatter_add(g, Arc::clone(idx), shape);
                out.push((a, ga));
            }
            Op::ScatterAdd(a, ref idx) => {
                let shape = self.shape(a);
                let ga = self.gather(g, Arc::clone(idx), shape);
                out.push((a, ga));
            }
            Op::Broadcast(a) => {
                let shape = self.shape(a);
                let ga = self.sum_to(g, shape)?;
                out.push((a, ga));
            }
            Op::SumTo(a) => {
                let shape = self.shape(a);
                let ga = self.broadcast(g, shape)?;
                out.push((a, ga));
            }
            Op::Concat(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let gp = self.slice_channels(g, start, c)?;
                        out.push((p, gp));
                    }
                    start += c;
                }
            }
            Op::Slice(a, start) => {
                let total = self.shape(a)[1];
                let ga = self.pad_channels(g, start, total);
                out.push((a, ga));
            }
            Op::PadChannels(a, start) => {
                let c = self.shape(a)[1];
                let ga = self.slice_channels(g, start, c)?;
                out.push((a, ga));
            }
        }
        Ok(out)
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

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` at `x` along every coordinate.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn elementwise_chain_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::uniform([1, 2, 2, 2], 0.2, 2.0, &mut rng);
        let f = |t: &Tensor| {
            let mut g = Graph::default();
            let x = g.param(t.clone());
            let a = g.log(x);
            let b = g.sigmoid(a);
            let c = g.pow(x, 1.5);
            let d = g.mul(b, c).unwrap();
            let e = g.softplus(d);
            let s = g.exp(e);
            let s = g.mean(s);
            (g, x, s)
        };
        let (mut g, x, s) = f(&x0);
        let gx = g.grad(s, &[x]).unwrap()[0];
        let analytic = g.value(gx).data().to_vec();
        let numeric = numeric_grad(&x0, |t| {
            let (g, _, s) = f(t);
            g.scalar(s)
        });
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn second_order_through_conv() {
        // d/dw of |d/dx sum(lrelu(conv(x, w)))^2|
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::randn([1, 2, 8, 8], 1.0, &mut rng);
        let w0 = Tensor::randn([3, 2, 3, 3], 0.5, &mut rng);
        let cfg = ConvCfg::new(2, 1, 1);
        let build = |w_t: &Tensor| {
            let mut g = Graph::default();
            let x = g.param(x0.clone());
            let w = g.param(w_t.clone());
            let y = g.conv2d(x, w, cfg).unwrap();
            let y = g.sigmoid(y);
            let y = g.avg_pool2(y).unwrap();
            let s = g.sum(y);
            let gx = g.grad(s, &[x]).unwrap()[0];
            let sq = g.mul(gx, gx).unwrap();
            let pen = g.sum(sq);
            (g, w, pen)
        };
        let (mut g, w, pen) = build(&w0);
        let gw = g.grad(pen, &[w]).unwrap()[0];
        let analytic = g.value(gw).data().to_vec();
        let numeric = numeric_grad(&w0, |t| {
            let (g, _, p) = build(t);
            g.scalar(p)
        });
        assert_close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn unreachable_input_gets_zero_grad() {
        let mut g = Graph::default();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let s = g.scale(a, 4.0);
        let grads = g.grad(s, &[a, b]).unwrap();
        assert_eq!(g.scalar(grads[0]), 4.0);
        assert_eq!(g.scalar(grads[1]), 0.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
