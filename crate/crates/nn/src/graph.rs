//! Append-only computation tape with reverse-mode gradients.
//!
//! Every operation pushes a node holding its output value and enough of its
//! inputs to differentiate it. Nodes are created in topological order, so the
//! backward pass is a single sweep from the loss down to index 0.

use crate::conv::{self, ConvSpec};
use crate::error::{dim_err, NnError, Result};
use crate::norm::{self, NormScope, NormStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Add(Var, Var),
    LinComb(Vec<(Var, T)>),
    MulConst {
        x: Var,
        factor: Tensor<T>,
    },
    SigmoidGate {
        a: Var,
        b: Var,
    },
    Norm {
        x: Var,
        gain: Var,
        bias: Var,
        scope: NormScope,
        stats: NormStats,
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    Softplus(Var),
    FoldFreq(Var),
    UnfoldFreq(Var),
    MaskedL1 {
        x: Var,
        target: Tensor<T>,
        frame_mask: Vec<bool>,
        norm: f64,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-writer computation tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn per_channel<T: Scalar>(p: &Tensor<T>, channels: usize, what: &str) -> Result<()> {
    if p.shape() != [channels] {
        return dim_err(format!(
            "{what}: parameter shape {:?}, expected [{channels}]",
            p.shape()
        ));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Fails with a numeric error naming `label` if `v` holds NaN or infinity.
    pub fn check_finite(&self, v: Var, label: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(NnError::Numeric(format!("non-finite activation in {label}")))
        }
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = conv::conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::Conv { x, w, b, spec: *spec }, rg))
    }

    /// Transposed convolution upsampling the frequency axis to `out_freq` bins.
    pub fn conv_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: &ConvSpec,
        out_freq: usize,
    ) -> Result<Var> {
        let y = conv::transposed_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
            out_freq,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::ConvTranspose { x, w, b, spec: *spec }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    /// `sum_k c_k * x_k` over same-shaped inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return dim_err("lin_comb needs at least one term");
        };
        let shape = self.value(first).shape().to_vec();
        let mut acc = vec![0.0f64; self.value(first).len()];
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return dim_err(format!("lin_comb: shape {:?} vs {shape:?}", t.shape()));
            }
            for (a, x) in acc.iter_mut().zip(t.data()) {
                *a += c * x.as_f64();
            }
        }
        let y = Tensor::from_vec(&shape, acc.into_iter().map(T::of_f64).collect())?;
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        let terms = terms.iter().map(|&(v, c)| (v, T::of_f64(c))).collect();
        Ok(self.push(y, Op::LinComb(terms), rg))
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&mut self, x: Var, factor: Tensor<T>) -> Result<Var> {
        same_shape(self.value(x), &factor, "mul_const")?;
        let mut y = self.value(x).clone();
        for (v, &f) in y.data_mut().iter_mut().zip(factor.data()) {
            *v = *v * f;
        }
        let rg = self.rg(x);
        Ok(self.push(y, Op::MulConst { x, factor }, rg))
    }

    /// `a * sigmoid(b)` elementwise.
    pub fn sigmoid_gate(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sigmoid_gate")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = av
            .iter()
            .zip(bv)
            .map(|(&x, &g)| x * T::of_f64(sigmoid(g.as_f64())))
            .collect();
        let y = Tensor::from_vec(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::SigmoidGate { a, b }, rg))
    }

    /// Per-channel normalization with affine `gain`/`bias` of shape `[C]`.
    pub fn channel_norm(&mut self, x: Var, gain: Var, bias: Var, scope: NormScope) -> Result<Var> {
        let [_, c, _, _] = self.value(x).dims4()?;
        per_channel(self.value(gain), c, "channel_norm gain")?;
        per_channel(self.value(bias), c, "channel_norm bias")?;
        let (y, stats) = norm::forward(self.value(x), self.value(gain), self.value(bias), scope)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            y,
            Op::Norm {
                x,
                gain,
                bias,
                scope,
                stats,
            },
            rg,
        ))
    }

    /// Parametric ReLU with one slope per channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let [b, c, t, f] = self.value(x).dims4()?;
        per_channel(self.value(slope), c, "prelu slope")?;
        let plane = t * f;
        let s = self.value(slope).data();
        let mut y = self.value(x).clone();
        for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate().take(b * c) {
            let a = s[i % c];
            for v in chunk {
                if *v <= T::zero() {
                    *v = *v * a;
                }
            }
        }
        let rg = self.rg(x) || self.rg(slope);
        Ok(self.push(y, Op::Prelu { x, slope }, rg))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| {
            let v = v.as_f64();
            T::of_f64(v.max(0.0) + (-v.abs()).exp().ln_1p())
        });
        let rg = self.rg(x);
        self.push(y, Op::Softplus(x), rg)
    }

    /// `[B, C, T, F] -> [B, C*F, T, 1]`, channel index `c*F + f`.
    pub fn fold_freq(&mut self, x: Var) -> Result<Var> {
        let [b, c, t, f] = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    for fi in 0..f {
                        out[((bi * c + ci) * f + fi) * t + ti] = src[((bi * c + ci) * t + ti) * f + fi];
                    }
                }
            }
        }
        let y = Tensor::from_vec(&[b, c * f, t, 1], out)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::FoldFreq(x), rg))
    }

    /// Inverse of [`fold_freq`](Self::fold_freq): `[B, C*F, T, 1] -> [B, C, T, F]`.
    pub fn unfold_freq(&mut self, x: Var, freq: usize) -> Result<Var> {
        let [b, cf, t, one] = self.value(x).dims4()?;
        if one != 1 || freq == 0 || cf % freq != 0 {
            return dim_err(format!(
                "cannot unfold {:?} into {freq} bins",
                self.value(x).shape()
            ));
        }
        let c = cf / freq;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    for fi in 0..freq {
                        out[((bi * c + ci) * t + ti) * freq + fi] =
                            src[((bi * c + ci) * freq + fi) * t + ti];
                    }
                }
            }
        }
        let y = Tensor::from_vec(&[b, c, t, freq], out)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::UnfoldFreq(x), rg))
    }

    /// `sum |x - target| / norm` over frames whose entry in `frame_mask`
    /// (indexed `b * T + t`) is true. Returns a one-element array.
    pub fn masked_l1(
        &mut self,
        x: Var,
        target: Tensor<T>,
        frame_mask: Vec<bool>,
        norm: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        same_shape(xv, &target, "masked_l1")?;
        let [b, c, t, f] = xv.dims4()?;
        if frame_mask.len() != b * t {
            return dim_err(format!(
                "frame mask has {} entries, expected {}",
                frame_mask.len(),
                b * t
            ));
        }
        if !(norm > 0.0) {
            return Err(NnError::Numeric(format!("masked_l1 normalizer {norm}")));
        }
        let mut acc = 0.0f64;
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    if !frame_mask[bi * t + ti] {
                        continue;
                    }
                    let s = ((bi * c + ci) * t + ti) * f;
                    for k in s..s + f {
                        acc += (xv.data()[k].as_f64() - target.data()[k].as_f64()).abs();
                    }
                }
            }
        }
        let y = Tensor::scalar(T::of_f64(acc / norm));
        let rg = self.rg(x);
        Ok(self.push(
            y,
            Op::MaskedL1 {
                x,
                target,
                frame_mask,
                norm,
            },
            rg,
        ))
    }

    /// `sum x * weights`, a one-element array.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        same_shape(self.value(x), &weights, "weighted_sum")?;
        let acc: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, w)| a.as_f64() * w.as_f64())
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(T::of_f64(acc)), Op::WeightedSum { x, weights }, rg))
    }

    /// Sum of all elements, a one-element array.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ones = Tensor::full(self.value(x).shape(), T::one());
        self.weighted_sum(x, ones)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return dim_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        i: usize,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let g = conv::conv_backward(self.value(*x), self.value(*w), gy, spec, need)?;
                self.scatter_conv(grads, *x, *w, *b, g);
            }
            Op::ConvTranspose { x, w, b, spec } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let g = conv::transposed_backward(self.value(*x), self.value(*w), gy, spec, need)?;
                self.scatter_conv(grads, *x, *w, *b, g);
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gy.clone());
                self.accum(grads, *b, gy.clone());
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    self.accum(grads, v, gy.map(|g| g * c));
                }
            }
            Op::MulConst { x, factor } => {
                let mut g = gy.clone();
                for (v, &f) in g.data_mut().iter_mut().zip(factor.data()) {
                    *v = *v * f;
                }
                self.accum(grads, *x, g);
            }
            Op::SigmoidGate { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut ga = Tensor::zeros(gy.shape());
                let mut gb = Tensor::zeros(gy.shape());
                for k in 0..gy.len() {
                    let s = sigmoid(bv[k].as_f64());
                    let g = gy.data()[k].as_f64();
                    ga.data_mut()[k] = T::of_f64(g * s);
                    gb.data_mut()[k] = T::of_f64(g * av[k].as_f64() * s * (1.0 - s));
                }
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Norm {
                x,
                gain,
                bias,
                scope,
                stats,
            } => {
                let g = norm::backward(self.value(*x), self.value(*gain), gy, *scope, stats)?;
                self.accum(grads, *x, g.x);
                self.accum(grads, *gain, g.gain);
                self.accum(grads, *bias, g.bias);
            }
            Op::Prelu { x, slope } => {
                let [b, c, t, f] = self.value(*x).dims4()?;
                let plane = t * f;
                let xv = self.value(*x).data();
                let s = self.value(*slope).data();
                let mut gx = gy.clone();
                let mut gs = vec![0.0f64; c];
                for bc in 0..b * c {
                    let ch = bc % c;
                    for k in bc * plane..(bc + 1) * plane {
                        if xv[k] <= T::zero() {
                            gs[ch] += gy.data()[k].as_f64() * xv[k].as_f64();
                            gx.data_mut()[k] = gy.data()[k] * s[ch];
                        }
                    }
                }
                self.accum(grads, *x, gx);
                self.accum(grads, *slope, Tensor::from_fn(&[c], |k| T::of_f64(gs[k])));
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                let mut g = gy.clone();
                for (v, &xi) in g.data_mut().iter_mut().zip(xv) {
                    *v = T::of_f64(v.as_f64() * sigmoid(xi.as_f64()));
                }
                self.accum(grads, *x, g);
            }
            Op::FoldFreq(x) => {
                let [b, c, t, f] = self.value(*x).dims4()?;
                let mut g = Tensor::zeros(&[b, c, t, f]);
                for bi in 0..b {
                    for ci in 0..c {
                        for ti in 0..t {
                            for fi in 0..f {
                                g.data_mut()[((bi * c + ci) * t + ti) * f + fi] =
                                    gy.data()[((bi * c + ci) * f + fi) * t + ti];
                            }
                        }
                    }
                }
                self.accum(grads, *x, g);
            }
            Op::UnfoldFreq(x) => {
                let [b, cf, t, _] = self.value(*x).dims4()?;
                let [_, c, _, f] = gy.dims4()?;
                let mut g = Tensor::zeros(&[b, cf, t, 1]);
                for bi in 0..b {
                    for ci in 0..c {
                        for ti in 0..t {
                            for fi in 0..f {
                                g.data_mut()[((bi * c + ci) * f + fi) * t + ti] =
                                    gy.data()[((bi * c + ci) * t + ti) * f + fi];
                            }
                        }
                    }
                }
                self.accum(grads, *x, g);
            }
            Op::MaskedL1 {
                x,
                target,
                frame_mask,
                norm,
            } => {
                let xv = self.value(*x);
                let [b, c, t, f] = xv.dims4()?;
                let scale = gy.data()[0].as_f64() / norm;
                let mut g = Tensor::zeros(xv.shape());
                for bi in 0..b {
                    for ci in 0..c {
                        for ti in 0..t {
                            if !frame_mask[bi * t + ti] {
                                continue;
                            }
                            let s = ((bi * c + ci) * t + ti) * f;
                            for k in s..s + f {
                                let d = xv.data()[k].as_f64() - target.data()[k].as_f64();
                                let sign = if d > 0.0 {
                                    1.0
                                } else if d < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                };
                                g.data_mut()[k] = T::of_f64(sign * scale);
                            }
                        }
                    }
                }
                self.accum(grads, *x, g);
            }
            Op::WeightedSum { x, weights } => {
                let s = gy.data()[0];
                self.accum(grads, *x, weights.map(|w| w * s));
            }
        }
        Ok(())
    }

    fn scatter_conv(
        &self,
        grads: &mut [Option<Tensor<T>>],
        x: Var,
        w: Var,
        b: Option<Var>,
        g: conv::ConvGrads<T>,
    ) {
        if let Some(gx) = g.x {
            self.accum(grads, x, gx);
        }
        if let Some(gw) = g.w {
            self.accum(grads, w, gw);
        }
        if let (Some(b), Some(gb)) = (b, g.bias) {
            self.accum(grads, b, gb);
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
