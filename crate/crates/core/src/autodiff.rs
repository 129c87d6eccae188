//! Reverse-mode differentiation over a recorded op tape, plus a tape-free
//! inference path.
//!
//! Network blocks are written once against [`Ctx`]; running them inside a
//! [`Tape`] records every op for `backward`, while [`InferCtx`] evaluates the
//! same kernels eagerly and lets intermediates drop with scope (full-frame
//! inference would otherwise hold hundreds of activation maps alive).

use crate::kernels;
use crate::params::{ParamBank, ParamId};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    DeformConv { x: Var, offs: Var, mask: Var, w: Var, b: Option<Var> },
    LeakyRelu { x: Var, slope: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    AddScalar { x: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    MulChannel { x: Var, gate: Var },
    ConcatC { parts: Vec<Var> },
    SliceC { x: Var, lo: usize, hi: usize },
    InstanceNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    AttnPool { x: Var, logits: Var },
    ResizeHalf { x: Var },
    ResizeDouble { x: Var },
    Clamp01 { x: Var },
    Tonemap { x: Var, mu: f64 },
    L1 { a: Var, b: Var },
    SumAll { x: Var },
    WeightedSum { terms: Vec<(f64, Var)> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Execution context the network blocks are generic over.
pub trait Ctx {
    type T: Clone;

    fn input(&mut self, t: Tensor) -> Self::T;
    fn read(&self, t: &Self::T) -> Tensor;
    fn shape(&self, t: &Self::T) -> Vec<usize>;

    fn conv2d(&mut self, x: &Self::T, w: ParamId, b: Option<ParamId>, stride: usize) -> Self::T;
    /// Modulated deformable 3x3 conv; `offset_mask` carries 18 offset rows
    /// followed by 9 modulation logit rows. Logits pass through a sigmoid.
    fn deform_conv2d(&mut self, x: &Self::T, offset_mask: &Self::T, w: ParamId, b: Option<ParamId>) -> Self::T;

    fn leaky_relu(&mut self, x: &Self::T, slope: f64) -> Self::T;
    fn relu(&mut self, x: &Self::T) -> Self::T;
    fn sigmoid(&mut self, x: &Self::T) -> Self::T;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn add_scalar(&mut self, x: &Self::T, c: f64) -> Self::T;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn scale(&mut self, x: &Self::T, c: f64) -> Self::T;
    /// Broadcast a `[C,1,1]` gate over a `[C,H,W]` map.
    fn mul_channel(&mut self, x: &Self::T, gate: &Self::T) -> Self::T;
    fn concat_c(&mut self, parts: &[&Self::T]) -> Self::T;
    fn slice_c(&mut self, x: &Self::T, lo: usize, hi: usize) -> Self::T;
    fn instance_norm(&mut self, x: &Self::T, gamma: ParamId, beta: ParamId, eps: f64) -> Self::T;
    fn layer_norm(&mut self, x: &Self::T, gamma: ParamId, beta: ParamId, eps: f64) -> Self::T;
    fn attn_pool(&mut self, x: &Self::T, logits: &Self::T) -> Self::T;
    fn resize_half(&mut self, x: &Self::T) -> Self::T;
    fn resize_double(&mut self, x: &Self::T) -> Self::T;
    fn clamp01(&mut self, x: &Self::T) -> Self::T;
    fn tonemap(&mut self, x: &Self::T, mu: f64) -> Self::T;
    /// Scalar mean absolute difference.
    fn l1(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sum_all(&mut self, x: &Self::T) -> Self::T;
    fn weighted_sum(&mut self, terms: &[(f64, Self::T)]) -> Self::T;
}

// ---------------------------------------------------------------------------
// Elementwise helpers shared by both paths
// ---------------------------------------------------------------------------

fn sigmoid_val(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn concat_c_val(parts: &[&Tensor]) -> Tensor {
    let (_, h, w) = parts[0].chw();
    let c_total: usize = parts.iter().map(|p| p.c()).sum();
    let mut out = Tensor::zeros(&[c_total, h, w]);
    let mut at = 0;
    for p in parts {
        assert_eq!((p.h(), p.w()), (h, w), "concat spatial mismatch");
        out.data_mut()[at..at + p.len()].copy_from_slice(p.data());
        at += p.len();
    }
    out
}

fn slice_c_val(x: &Tensor, lo: usize, hi: usize) -> Tensor {
    let (_, h, w) = x.chw();
    let p = h * w;
    Tensor::from_vec(&[hi - lo, h, w], x.data()[lo * p..hi * p].to_vec())
}

fn mul_channel_val(x: &Tensor, gate: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    assert_eq!(gate.dims(), &[c, 1, 1], "channel gate shape");
    let p = h * w;
    let mut y = x.clone();
    for ci in 0..c {
        let g = gate.data()[ci];
        for v in &mut y.data_mut()[ci * p..(ci + 1) * p] {
            *v *= g;
        }
    }
    y
}

fn tonemap_val(x: &Tensor, mu: f64) -> Tensor {
    let denom = (1.0 + mu).ln();
    x.map(|v| (1.0 + mu * v).ln() / denom)
}

fn l1_val(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y).abs())
        .sum::<f64>()
        / n
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

pub struct Tape<'a> {
    bank: &'a ParamBank,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'a> Tape<'a> {
    pub fn new(bank: &'a ParamBank) -> Self {
        Self {
            bank,
            nodes: Vec::new(),
            param_vars: vec![None; bank.len()],
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf node whose gradient will be tracked (used by gradient checks).
    pub fn input_grad(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Binds a bank parameter as a leaf; each parameter gets one node per
    /// tape, so reuse accumulates gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Op::Leaf, self.bank.get(id).clone(), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Runs reverse accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.val(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) =
                    kernels::conv2d_bwd(self.val(*x), self.val(*w), gy, *stride, *pad, b.is_some());
                self.accum(grads, *x, gx);
                self.accum(grads, *w, gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accum(grads, *b, gb);
                }
            }
            Op::DeformConv { x, offs, mask, w, b } => {
                let (gx, goffs, gmask, gw, gb) = kernels::deform_conv2d_bwd(
                    self.val(*x),
                    self.val(*offs),
                    self.val(*mask),
                    self.val(*w),
                    gy,
                    b.is_some(),
                );
                self.accum(grads, *x, gx);
                self.accum(grads, *offs, goffs);
                self.accum(grads, *mask, gmask);
                self.accum(grads, *w, gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accum(grads, *b, gb);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.val(*x);
                let g = Tensor::from_vec(
                    xv.dims(),
                    xv.data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&v, &g)| if v >= 0.0 { g } else { g * slope })
                        .collect(),
                );
                self.accum(grads, *x, g);
            }
            Op::Relu { x } => {
                let xv = self.val(*x);
                let g = Tensor::from_vec(
                    xv.dims(),
                    xv.data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect(),
                );
                self.accum(grads, *x, g);
            }
            Op::Sigmoid { x } => {
                let yv = &self.nodes[i].value;
                let g = Tensor::from_vec(
                    yv.dims(),
                    yv.data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&y, &g)| g * y * (1.0 - y))
                        .collect(),
                );
                self.accum(grads, *x, g);
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, gy.clone());
                self.accum(grads, *b, gy.clone());
            }
            Op::AddScalar { x } => self.accum(grads, *x, gy.clone()),
            Op::Mul { a, b } => {
                self.accum(grads, *a, gy.zip_map(self.val(*b), |g, v| g * v));
                self.accum(grads, *b, gy.zip_map(self.val(*a), |g, v| g * v));
            }
            Op::Scale { x, c } => self.accum(grads, *x, gy.map(|g| g * c)),
            Op::MulChannel { x, gate } => {
                let xv = self.val(*x);
                let gv = self.val(*gate);
                let (c, h, w) = xv.chw();
                let p = h * w;
                let mut gx = gy.clone();
                let mut ggate = Tensor::zeros(&[c, 1, 1]);
                for ci in 0..c {
                    let gch = gv.data()[ci];
                    let mut acc = 0.0;
                    for pi in 0..p {
                        let idx = ci * p + pi;
                        acc += gy.data()[idx] * xv.data()[idx];
                        gx.data_mut()[idx] = gy.data()[idx] * gch;
                    }
                    ggate.data_mut()[ci] = acc;
                }
                self.accum(grads, *x, gx);
                self.accum(grads, *gate, ggate);
            }
            Op::ConcatC { parts } => {
                let (_, h, w) = self.nodes[i].value.chw();
                let p = h * w;
                let mut at = 0;
                for part in parts {
                    let c = self.val(*part).c();
                    let g = Tensor::from_vec(
                        &[c, h, w],
                        gy.data()[at * p..(at + c) * p].to_vec(),
                    );
                    self.accum(grads, *part, g);
                    at += c;
                }
            }
            Op::SliceC { x, lo, hi } => {
                let xv = self.val(*x);
                let (_, h, w) = xv.chw();
                let p = h * w;
                let mut gx = Tensor::zeros(xv.dims());
                gx.data_mut()[lo * p..hi * p].copy_from_slice(gy.data());
                self.accum(grads, *x, gx);
            }
            Op::InstanceNorm { x, gamma, beta, eps } => {
                let (gx, ggamma, gbeta) =
                    kernels::instance_norm_bwd(self.val(*x), self.val(*gamma), *eps, gy);
                self.accum(grads, *x, gx);
                self.accum(grads, *gamma, ggamma);
                self.accum(grads, *beta, gbeta);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (gx, ggamma, gbeta) =
                    kernels::layer_norm_bwd(self.val(*x), self.val(*gamma), *eps, gy);
                self.accum(grads, *x, gx);
                self.accum(grads, *gamma, ggamma);
                self.accum(grads, *beta, gbeta);
            }
            Op::AttnPool { x, logits } => {
                let (gx, glogits) = kernels::attn_pool_bwd(self.val(*x), self.val(*logits), gy);
                self.accum(grads, *x, gx);
                self.accum(grads, *logits, glogits);
            }
            Op::ResizeHalf { x } => self.accum(grads, *x, kernels::resize_half_bwd(gy)),
            Op::ResizeDouble { x } => self.accum(grads, *x, kernels::resize_double_bwd(gy)),
            Op::Clamp01 { x } => {
                let xv = self.val(*x);
                let g = Tensor::from_vec(
                    xv.dims(),
                    xv.data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&v, &g)| if (0.0..=1.0).contains(&v) { g } else { 0.0 })
                        .collect(),
                );
                self.accum(grads, *x, g);
            }
            Op::Tonemap { x, mu } => {
                let denom = (1.0 + mu).ln();
                let xv = self.val(*x);
                let g = Tensor::from_vec(
                    xv.dims(),
                    xv.data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&v, &g)| g * mu / ((1.0 + mu * v) * denom))
                        .collect(),
                );
                self.accum(grads, *x, g);
            }
            Op::L1 { a, b } => {
                let av = self.val(*a);
                let bv = self.val(*b);
                let n = av.len() as f64;
                let g = gy.item();
                let ga = Tensor::from_vec(
                    av.dims(),
                    av.data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| g * (x - y).signum_or_zero() / n)
                        .collect(),
                );
                let gb = ga.map(|v| -v);
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::SumAll { x } => {
                let g = gy.item();
                self.accum(grads, *x, Tensor::filled(self.val(*x).dims(), g));
            }
            Op::WeightedSum { terms } => {
                let g = gy.item();
                for (wi, v) in terms {
                    self.accum(grads, *v, Tensor::scalar(g * wi));
                }
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape<'_> {
    /// Gradient of the last backward root w.r.t. a bound parameter, if the
    /// parameter participated in this tape.
    pub fn param_grad<'g>(&self, grads: &'g Gradients, id: ParamId) -> Option<&'g Tensor> {
        self.param_vars[id.0].and_then(|v| grads.get(v))
    }
}

impl Ctx for Tape<'_> {
    type T = Var;

    fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    fn read(&self, t: &Var) -> Tensor {
        self.val(*t).clone()
    }

    fn shape(&self, t: &Var) -> Vec<usize> {
        self.val(*t).dims().to_vec()
    }

    fn conv2d(&mut self, x: &Var, w: ParamId, b: Option<ParamId>, stride: usize) -> Var {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let k = self.val(wv).dims()[2];
        let pad = k / 2;
        let y = kernels::conv2d_fwd(
            self.val(*x),
            self.val(wv),
            bv.map(|b| self.val(b)),
            stride,
            pad,
        );
        let ng = self.ng(*x) || self.ng(wv);
        self.push(Op::Conv2d { x: *x, w: wv, b: bv, stride, pad }, y, ng)
    }

    fn deform_conv2d(&mut self, x: &Var, offset_mask: &Var, w: ParamId, b: Option<ParamId>) -> Var {
        let offs = self.slice_c(offset_mask, 0, 18);
        let logits = self.slice_c(offset_mask, 18, 27);
        let mask = self.sigmoid(&logits);
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let y = kernels::deform_conv2d_fwd(
            self.val(*x),
            self.val(offs),
            self.val(mask),
            self.val(wv),
            bv.map(|b| self.val(b)),
        );
        let ng = self.ng(*x) || self.ng(offs) || self.ng(wv);
        self.push(Op::DeformConv { x: *x, offs, mask, w: wv, b: bv }, y, ng)
    }

    fn leaky_relu(&mut self, x: &Var, slope: f64) -> Var {
        let y = self.val(*x).map(|v| if v >= 0.0 { v } else { v * slope });
        let ng = self.ng(*x);
        self.push(Op::LeakyRelu { x: *x, slope }, y, ng)
    }

    fn relu(&mut self, x: &Var) -> Var {
        let y = self.val(*x).map(|v| v.max(0.0));
        let ng = self.ng(*x);
        self.push(Op::Relu { x: *x }, y, ng)
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let y = self.val(*x).map(sigmoid_val);
        let ng = self.ng(*x);
        self.push(Op::Sigmoid { x: *x }, y, ng)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let y = self.val(*a).zip_map(self.val(*b), |x, y| x + y);
        let ng = self.ng(*a) || self.ng(*b);
        self.push(Op::Add { a: *a, b: *b }, y, ng)
    }

    fn add_scalar(&mut self, x: &Var, c: f64) -> Var {
        let y = self.val(*x).map(|v| v + c);
        let ng = self.ng(*x);
        self.push(Op::AddScalar { x: *x }, y, ng)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let y = self.val(*a).zip_map(self.val(*b), |x, y| x * y);
        let ng = self.ng(*a) || self.ng(*b);
        self.push(Op::Mul { a: *a, b: *b }, y, ng)
    }

    fn scale(&mut self, x: &Var, c: f64) -> Var {
        let y = self.val(*x).map(|v| v * c);
        let ng = self.ng(*x);
        self.push(Op::Scale { x: *x, c }, y, ng)
    }

    fn mul_channel(&mut self, x: &Var, gate: &Var) -> Var {
        let y = mul_channel_val(self.val(*x), self.val(*gate));
        let ng = self.ng(*x) || self.ng(*gate);
        self.push(Op::MulChannel { x: *x, gate: *gate }, y, ng)
    }

    fn concat_c(&mut self, parts: &[&Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|v| self.val(**v)).collect();
        let y = concat_c_val(&vals);
        let ng = parts.iter().any(|v| self.ng(**v));
        self.push(Op::ConcatC { parts: parts.iter().map(|v| **v).collect() }, y, ng)
    }

    fn slice_c(&mut self, x: &Var, lo: usize, hi: usize) -> Var {
        let y = slice_c_val(self.val(*x), lo, hi);
        let ng = self.ng(*x);
        self.push(Op::SliceC { x: *x, lo, hi }, y, ng)
    }

    fn instance_norm(&mut self, x: &Var, gamma: ParamId, beta: ParamId, eps: f64) -> Var {
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let y = kernels::instance_norm_fwd(self.val(*x), self.val(gv), self.val(bv), eps);
        let ng = self.ng(*x) || self.ng(gv);
        self.push(Op::InstanceNorm { x: *x, gamma: gv, beta: bv, eps }, y, ng)
    }

    fn layer_norm(&mut self, x: &Var, gamma: ParamId, beta: ParamId, eps: f64) -> Var {
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let y = kernels::layer_norm_fwd(self.val(*x), self.val(gv), self.val(bv), eps);
        let ng = self.ng(*x) || self.ng(gv);
        self.push(Op::LayerNorm { x: *x, gamma: gv, beta: bv, eps }, y, ng)
    }

    fn attn_pool(&mut self, x: &Var, logits: &Var) -> Var {
        let y = kernels::attn_pool_fwd(self.val(*x), self.val(*logits));
        let ng = self.ng(*x) || self.ng(*logits);
        self.push(Op::AttnPool { x: *x, logits: *logits }, y, ng)
    }

    fn resize_half(&mut self, x: &Var) -> Var {
        let y = kernels::resize_half_fwd(self.val(*x));
        let ng = self.ng(*x);
        self.push(Op::ResizeHalf { x: *x }, y, ng)
    }

    fn resize_double(&mut self, x: &Var) -> Var {
        let y = kernels::resize_double_fwd(self.val(*x));
        let ng = self.ng(*x);
        self.push(Op::ResizeDouble { x: *x }, y, ng)
    }

    fn clamp01(&mut self, x: &Var) -> Var {
        let y = self.val(*x).map(|v| v.clamp(0.0, 1.0));
        let ng = self.ng(*x);
        self.push(Op::Clamp01 { x: *x }, y, ng)
    }

    fn tonemap(&mut self, x: &Var, mu: f64) -> Var {
        let y = tonemap_val(self.val(*x), mu);
        let ng = self.ng(*x);
        self.push(Op::Tonemap { x: *x, mu }, y, ng)
    }

    fn l1(&mut self, a: &Var, b: &Var) -> Var {
        let y = Tensor::scalar(l1_val(self.val(*a), self.val(*b)));
        let ng = self.ng(*a) || self.ng(*b);
        self.push(Op::L1 { a: *a, b: *b }, y, ng)
    }

    fn sum_all(&mut self, x: &Var) -> Var {
        let y = Tensor::scalar(self.val(*x).data().iter().sum());
        let ng = self.ng(*x);
        self.push(Op::SumAll { x: *x }, y, ng)
    }

    fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let y = Tensor::scalar(
            terms
                .iter()
                .map(|(w, v)| w * self.val(*v).item())
                .sum(),
        );
        let ng = terms.iter().any(|(_, v)| self.ng(*v));
        self.push(Op::WeightedSum { terms: terms.to_vec() }, y, ng)
    }
}

// ---------------------------------------------------------------------------
// Eager inference path
// ---------------------------------------------------------------------------

pub struct InferCtx<'a> {
    bank: &'a ParamBank,
}

impl<'a> InferCtx<'a> {
    pub fn new(bank: &'a ParamBank) -> Self {
        Self { bank }
    }
}

impl Ctx for InferCtx<'_> {
    type T = Tensor;

    fn input(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn read(&self, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn shape(&self, t: &Tensor) -> Vec<usize> {
        t.dims().to_vec()
    }

    fn conv2d(&mut self, x: &Tensor, w: ParamId, b: Option<ParamId>, stride: usize) -> Tensor {
        let wv = self.bank.get(w);
        let pad = wv.dims()[2] / 2;
        kernels::conv2d_fwd(x, wv, b.map(|b| self.bank.get(b)), stride, pad)
    }

    fn deform_conv2d(&mut self, x: &Tensor, offset_mask: &Tensor, w: ParamId, b: Option<ParamId>) -> Tensor {
        let offs = slice_c_val(offset_mask, 0, 18);
        let mask = slice_c_val(offset_mask, 18, 27).map(sigmoid_val);
        kernels::deform_conv2d_fwd(x, &offs, &mask, self.bank.get(w), b.map(|b| self.bank.get(b)))
    }

    fn leaky_relu(&mut self, x: &Tensor, slope: f64) -> Tensor {
        x.map(|v| if v >= 0.0 { v } else { v * slope })
    }

    fn relu(&mut self, x: &Tensor) -> Tensor {
        x.map(|v| v.max(0.0))
    }

    fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        x.map(sigmoid_val)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        a.zip_map(b, |x, y| x + y)
    }

    fn add_scalar(&mut self, x: &Tensor, c: f64) -> Tensor {
        x.map(|v| v + c)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        a.zip_map(b, |x, y| x * y)
    }

    fn scale(&mut self, x: &Tensor, c: f64) -> Tensor {
        x.map(|v| v * c)
    }

    fn mul_channel(&mut self, x: &Tensor, gate: &Tensor) -> Tensor {
        mul_channel_val(x, gate)
    }

    fn concat_c(&mut self, parts: &[&Tensor]) -> Tensor {
        concat_c_val(parts)
    }

    fn slice_c(&mut self, x: &Tensor, lo: usize, hi: usize) -> Tensor {
        slice_c_val(x, lo, hi)
    }

    fn instance_norm(&mut self, x: &Tensor, gamma: ParamId, beta: ParamId, eps: f64) -> Tensor {
        kernels::instance_norm_fwd(x, self.bank.get(gamma), self.bank.get(beta), eps)
    }

    fn layer_norm(&mut self, x: &Tensor, gamma: ParamId, beta: ParamId, eps: f64) -> Tensor {
        kernels::layer_norm_fwd(x, self.bank.get(gamma), self.bank.get(beta), eps)
    }

    fn attn_pool(&mut self, x: &Tensor, logits: &Tensor) -> Tensor {
        kernels::attn_pool_fwd(x, logits)
    }

    fn resize_half(&mut self, x: &Tensor) -> Tensor {
        kernels::resize_half_fwd(x)
    }

    fn resize_double(&mut self, x: &Tensor) -> Tensor {
        kernels::resize_double_fwd(x)
    }

    fn clamp01(&mut self, x: &Tensor) -> Tensor {
        x.map(|v| v.clamp(0.0, 1.0))
    }

    fn tonemap(&mut self, x: &Tensor, mu: f64) -> Tensor {
        tonemap_val(x, mu)
    }

    fn l1(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        Tensor::scalar(l1_val(a, b))
    }

    fn sum_all(&mut self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.data().iter().sum())
    }

    fn weighted_sum(&mut self, terms: &[(f64, Tensor)]) -> Tensor {
        Tensor::scalar(terms.iter().map(|(w, v)| w * v.item()).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        use rand::Rng;
        let mut t = Tensor::zeros(dims);
        for v in t.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
        t
    }

    /// Central finite differences over a scalar graph built by `f`.
    fn check_input_grad<F>(dims: &[usize], f: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let bank = ParamBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_tensor(dims, &mut rng);

        let mut tape = Tape::new(&bank);
        let x = tape.input_grad(x0.clone());
        let y = f(&mut tape, x);
        let grads = tape.backward(y);
        let gx = grads.get(x).expect("input gradient");

        let h = 1e-5;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut tp = Tape::new(&bank);
            let vp = tp.input(xp);
            let yp = f(&mut tp, vp);

            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let mut tm = Tape::new(&bank);
            let vm = tm.input(xm);
            let ym = f(&mut tm, vm);

            let fd = (tp.read(&yp).item() - tm.read(&ym).item()) / (2.0 * h);
            let an = gx.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((an - fd) / denom).abs() < 1e-5,
                "coord {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        check_input_grad(&[2, 3, 3], |t, x| {
            let a = t.leaky_relu(&x, 0.2);
            let b = t.sigmoid(&a);
            let c = t.tonemap(&b, 11.0);
            t.sum_all(&c)
        });
    }

    #[test]
    fn resize_grads_match_finite_differences() {
        check_input_grad(&[1, 4, 4], |t, x| {
            let d = t.resize_half(&x);
            let u = t.resize_double(&d);
            t.sum_all(&u)
        });
    }

    #[test]
    fn attn_pool_grads_match_finite_differences() {
        check_input_grad(&[3, 3, 3], |t, x| {
            let logits = t.slice_c(&x, 0, 1);
            let body = t.slice_c(&x, 0, 3);
            let ctx = t.attn_pool(&body, &logits);
            let gated = t.mul_channel(&body, &ctx);
            t.sum_all(&gated)
        });
    }

    #[test]
    fn l1_grad_matches_finite_differences() {
        let bank = ParamBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = rand_tensor(&[2, 2, 2], &mut rng);
        let b0 = rand_tensor(&[2, 2, 2], &mut rng);

        let mut tape = Tape::new(&bank);
        let a = tape.input_grad(a0.clone());
        let b = tape.input(b0.clone());
        let y = tape.l1(&a, &b);
        let grads = tape.backward(y);
        let ga = grads.get(a).unwrap();

        let h = 1e-6;
        for i in 0..a0.len() {
            let mut ap = a0.clone();
            ap.data_mut()[i] += h;
            let mut am = a0.clone();
            am.data_mut()[i] -= h;
            let fp = l1_val(&ap, &b0);
            let fm = l1_val(&am, &b0);
            let fd = (fp - fm) / (2.0 * h);
            assert!((ga.data()[i] - fd).abs() < 1e-6, "coord {i}");
        }
    }

    #[test]
    fn shared_param_accumulates_gradient() {
        let mut bank = ParamBank::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = bank.uniform("w", &[2, 2, 1, 1], 2, &mut rng);

        let mut tape = Tape::new(&bank);
        let x = tape.input(rand_tensor(&[2, 3, 3], &mut rng));
        let y1 = tape.conv2d(&x, w, None, 1);
        let y2 = tape.conv2d(&y1, w, None, 1); // same weight twice
        let s = tape.sum_all(&y2);
        let grads = tape.backward(s);
        let gw = tape.param_grad(&grads, w).unwrap();
        assert!(gw.max_abs() > 0.0);
    }
}
