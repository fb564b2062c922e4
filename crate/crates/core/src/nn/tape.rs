//! Reverse-mode differentiation over an operation tape.
//!
//! Forward calls record one node per operation; [`Tape::backward`] replays
//! the records once, in reverse execution order, accumulating adjoints and
//! routing parameter gradients back to their [`ParamSet`] slots. A leaf
//! parameter that never reaches the loss simply keeps a zero gradient.

use rand::Rng;

use crate::nn::optim::ParamSet;
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::NnError;

/// Probability floor used by the cross-entropy clamp.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Node<F: Scalar> {
    Input,
    Param { slot: usize },
    Conv2d { input: usize, kernel: usize, bias: usize, stride: (usize, usize) },
    AvgPool2d { input: usize },
    Linear { input: usize, weight: usize, bias: usize },
    LstmCell { x: usize, h_prev: usize, c_prev: usize, weight: usize, bias: usize, gates: Tensor<F> },
    SliceRow { input: usize, row: usize },
    Column { input: usize, col: usize },
    Flatten { input: usize },
    Sigmoid { input: usize },
    Tanh { input: usize },
    Relu { input: usize },
    Dropout { input: usize, mask: Tensor<F> },
    WeightedSum { input: usize, weights: Tensor<F> },
    BceLoss { input: usize, target: F },
}

/// Ordered record of executed operations and their values.
pub struct Tape<F: Scalar> {
    values: Vec<Tensor<F>>,
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), nodes: Vec::new() }
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.values[var.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of LSTM cell evaluations recorded so far.
    pub fn lstm_cell_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::LstmCell { .. })).count()
    }

    fn push(&mut self, value: Tensor<F>, node: Node<F>) -> Var {
        debug_assert!(value.is_all_finite(), "non-finite value recorded on tape");
        self.values.push(value);
        self.nodes.push(node);
        Var(self.values.len() - 1)
    }

    /// Record a constant input (no gradient tracked).
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Node::Input)
    }

    /// Record a parameter leaf; its gradient lands in `slot` on backward.
    pub fn param(&mut self, params: &ParamSet<F>, slot: usize) -> Var {
        self.push(params.get(slot).value.clone(), Node::Param { slot })
    }

    /// 3x3 cross-correlation with zero padding 1 and stride (sw, sh) in
    /// {1, 2}; output spatial extents are the input's divided by the
    /// stride, rounded up.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: (usize, usize)) -> Result<Var, NnError> {
        let x = &self.values[input.0];
        let k = &self.values[kernel.0];
        let b = &self.values[bias.0];
        if x.rank() != 3 || k.rank() != 4 || k.shape()[2] != 3 || k.shape()[3] != 3 {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?}, kernel {:?}", x.shape(), k.shape()),
            });
        }
        if k.shape()[1] != x.shape()[0] || b.shape() != [k.shape()[0]] {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?}, kernel {:?}, bias {:?}", x.shape(), k.shape(), b.shape()),
            });
        }
        if !matches!(stride, (1 | 2, 1 | 2)) {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                detail: format!("stride {stride:?} not in {{1,2}}x{{1,2}}"),
            });
        }
        let out = conv2d_forward(x, k, b, stride);
        Ok(self.push(out, Node::Conv2d { input: input.0, kernel: kernel.0, bias: bias.0, stride }))
    }

    /// Non-overlapping 2x2 mean pooling; both extents must be even.
    pub fn avgpool2d(&mut self, input: Var) -> Result<Var, NnError> {
        let x = &self.values[input.0];
        if x.rank() != 3 {
            return Err(NnError::ShapeMismatch {
                op: "avgpool2d",
                detail: format!("expected rank 3, got {:?}", x.shape()),
            });
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::OddExtent { height: h, width: w });
        }
        let quarter = F::from_f64(0.25);
        let mut out = Tensor::zeros(&[c, h / 2, w / 2]);
        {
            let xd = x.data();
            let od = out.data_mut();
            let (oh, ow) = (h / 2, w / 2);
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = ci * h * w + (2 * oy) * w + 2 * ox;
                        let s = xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1];
                        od[ci * oh * ow + oy * ow + ox] = s * quarter;
                    }
                }
            }
        }
        Ok(self.push(out, Node::AvgPool2d { input: input.0 }))
    }

    /// Affine map: weight (m x n) times input (n) plus bias (m).
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, NnError> {
        let x = &self.values[input.0];
        let w = &self.values[weight.0];
        let b = &self.values[bias.0];
        if x.rank() != 1 || w.rank() != 2 || w.shape()[1] != x.shape()[0] || b.shape() != [w.shape()[0]] {
            return Err(NnError::ShapeMismatch {
                op: "linear",
                detail: format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
            });
        }
        let (m, n) = (w.shape()[0], w.shape()[1]);
        let mut out = Tensor::zeros(&[m]);
        {
            let xd = x.data();
            let wd = w.data();
            let od = out.data_mut();
            for i in 0..m {
                od[i] = b.data()[i] + dot4(&wd[i * n..(i + 1) * n], xd);
            }
        }
        Ok(self.push(out, Node::Linear { input: input.0, weight: weight.0, bias: bias.0 }))
    }

    /// Standard LSTM cell over concatenated (x, h_prev).
    ///
    /// `weight` is (4k x (d + k)) with gate rows ordered input, forget,
    /// cell, output; `bias` is (4k). Returns (h, c).
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h_prev: Var,
        c_prev: Var,
        weight: Var,
        bias: Var,
    ) -> Result<(Var, Var), NnError> {
        let xv = &self.values[x.0];
        let hv = &self.values[h_prev.0];
        let cv = &self.values[c_prev.0];
        let wv = &self.values[weight.0];
        let bv = &self.values[bias.0];
        let d = xv.shape().first().copied().unwrap_or(0);
        let k = hv.shape().first().copied().unwrap_or(0);
        let ok = xv.rank() == 1
            && hv.rank() == 1
            && cv.shape() == [k]
            && wv.shape() == [4 * k, d + k]
            && bv.shape() == [4 * k];
        if !ok || k == 0 {
            return Err(NnError::ShapeMismatch {
                op: "lstm_cell",
                detail: format!(
                    "x {:?}, h {:?}, c {:?}, weight {:?}, bias {:?}",
                    xv.shape(),
                    hv.shape(),
                    cv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            });
        }

        let xd = xv.data();
        let hd = hv.data();
        let cd = cv.data();
        let wd = wv.data();
        let bd = bv.data();
        let cols = d + k;
        let mut gates = Tensor::<F>::zeros(&[4 * k]);
        {
            let gd = gates.data_mut();
            for j in 0..4 * k {
                let row = &wd[j * cols..(j + 1) * cols];
                let acc = bd[j] + dot4(&row[..d], xd) + dot4(&row[d..], hd);
                gd[j] = if j < 2 * k || j >= 3 * k { sigmoid_scalar(acc) } else { acc.tanh() };
            }
        }

        let gd = gates.data();
        let mut out = Tensor::<F>::zeros(&[2, k]);
        {
            let od = out.data_mut();
            for i in 0..k {
                let (ig, fg, gg, og) = (gd[i], gd[k + i], gd[2 * k + i], gd[3 * k + i]);
                let c_new = fg * cd[i] + ig * gg;
                od[k + i] = c_new;
                od[i] = og * c_new.tanh();
            }
        }

        let hc = self.push(
            out,
            Node::LstmCell { x: x.0, h_prev: h_prev.0, c_prev: c_prev.0, weight: weight.0, bias: bias.0, gates },
        );
        let h = self.slice_row(hc, 0)?;
        let c = self.slice_row(hc, 1)?;
        Ok((h, c))
    }

    /// Row `row` of a rank-2 value.
    pub fn slice_row(&mut self, input: Var, row: usize) -> Result<Var, NnError> {
        let x = &self.values[input.0];
        if x.rank() != 2 || row >= x.shape()[0] {
            return Err(NnError::ShapeMismatch {
                op: "slice_row",
                detail: format!("row {row} of {:?}", x.shape()),
            });
        }
        let k = x.shape()[1];
        let data = x.data()[row * k..(row + 1) * k].to_vec();
        let out = Tensor::from_vec(&[k], data)?;
        Ok(self.push(out, Node::SliceRow { input: input.0, row }))
    }

    /// Width-column `col` of a (C x H x W) value, flattened to length C*H.
    pub fn column(&mut self, input: Var, col: usize) -> Result<Var, NnError> {
        let x = &self.values[input.0];
        if x.rank() != 3 || col >= x.shape()[2] {
            return Err(NnError::ShapeMismatch {
                op: "column",
                detail: format!("column {col} of {:?}", x.shape()),
            });
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let xd = x.data();
        let mut data = Vec::with_capacity(c * h);
        for ci in 0..c {
            for y in 0..h {
                data.push(xd[(ci * h + y) * w + col]);
            }
        }
        let out = Tensor::from_vec(&[c * h], data)?;
        Ok(self.push(out, Node::Column { input: input.0, col }))
    }

    /// View as a rank-1 value.
    pub fn flatten(&mut self, input: Var) -> Var {
        let x = &self.values[input.0];
        let out = x.reshaped(&[x.numel()]).expect("flatten");
        self.push(out, Node::Flatten { input: input.0 })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.values[input.0].map(sigmoid_scalar);
        self.push(out, Node::Sigmoid { input: input.0 })
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let out = self.values[input.0].map(|v| v.tanh());
        self.push(out, Node::Tanh { input: input.0 })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.values[input.0].map(|v| v.max(F::ZERO));
        self.push(out, Node::Relu { input: input.0 })
    }

    /// Inverted dropout: keeps each element with probability 1 - p and
    /// scales survivors by 1/(1 - p) so inference needs no adjustment.
    pub fn dropout(&mut self, input: Var, p: f64, rng: &mut dyn rand::RngCore) -> Var {
        debug_assert!((0.0..1.0).contains(&p));
        let x = &self.values[input.0];
        let keep = 1.0 - p;
        let scale = F::from_f64(1.0 / keep);
        let mask_data: Vec<F> = (0..x.numel())
            .map(|_| if rng.gen_range(0.0..1.0) < keep { scale } else { F::ZERO })
            .collect();
        let mask = Tensor::from_vec(x.shape(), mask_data).expect("mask shape");
        let mut out = x.clone();
        for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o = *o * *m;
        }
        self.push(out, Node::Dropout { input: input.0, mask })
    }

    /// Scalar dot product against fixed weights; used to reduce tensor
    /// outputs to a scalar objective.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<F>) -> Result<Var, NnError> {
        let x = &self.values[input.0];
        if weights.numel() != x.numel() {
            return Err(NnError::ShapeMismatch {
                op: "weighted_sum",
                detail: format!("{} weights for {} values", weights.numel(), x.numel()),
            });
        }
        let mut acc = F::ZERO;
        for (a, b) in x.data().iter().zip(weights.data()) {
            acc += *a * *b;
        }
        Ok(self.push(Tensor::scalar(acc), Node::WeightedSum { input: input.0, weights }))
    }

    /// Binary cross-entropy of a probability against a 0/1 target, with
    /// the probability clamped to [eps, 1 - eps], eps = 1e-7.
    pub fn bce_loss(&mut self, prob: Var, target: f64) -> Result<Var, NnError> {
        let p = &self.values[prob.0];
        if p.numel() != 1 {
            return Err(NnError::ShapeMismatch {
                op: "bce_loss",
                detail: format!("expected scalar probability, got {:?}", p.shape()),
            });
        }
        let eps = F::from_f64(BCE_EPS);
        let y = F::from_f64(target);
        let clamped = p.item().max(eps).min(F::ONE - eps);
        let loss = -(y * clamped.ln()) - (F::ONE - y) * (F::ONE - clamped).ln();
        Ok(self.push(Tensor::scalar(loss), Node::BceLoss { input: prob.0, target: y }))
    }

    #[cfg(test)]
    pub(crate) fn last_lstm_gates(&self) -> Option<&Tensor<F>> {
        self.nodes.iter().rev().find_map(|n| match n {
            Node::LstmCell { gates, .. } => Some(gates),
            _ => None,
        })
    }

    /// Run the adjoint sweep from a scalar loss, accumulating parameter
    /// gradients into `params`. Each recorded node is visited exactly
    /// once, in reverse execution order.
    pub fn backward(&self, loss: Var, params: &mut ParamSet<F>) -> Result<(), NnError> {
        let loss_val = &self.values[loss.0];
        if loss_val.numel() != 1 {
            return Err(NnError::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", loss_val.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(loss_val.shape(), F::ONE));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            debug_assert!(g.is_all_finite(), "non-finite adjoint at node {i}");
            match &self.nodes[i] {
                Node::Input => {}
                Node::Param { slot } => params.get_mut(*slot).grad.add_assign(&g),
                Node::Conv2d { input, kernel, bias, stride } => {
                    // The adjoint of a plain input is never consumed;
                    // skipping it saves a full convolution on the first
                    // layer of every model.
                    let need_dx = !matches!(self.nodes[*input], Node::Input);
                    let (dx, dk, db) = conv2d_backward(
                        &self.values[*input],
                        &self.values[*kernel],
                        &g,
                        *stride,
                        need_dx,
                    );
                    if need_dx {
                        accumulate(&mut grads, *input, dx);
                    }
                    accumulate(&mut grads, *kernel, dk);
                    accumulate(&mut grads, *bias, db);
                }
                Node::AvgPool2d { input } => {
                    let x = &self.values[*input];
                    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = F::from_f64(0.25);
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    {
                        let dxd = dx.data_mut();
                        let gd = g.data();
                        for ci in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = gd[ci * oh * ow + oy * ow + ox] * quarter;
                                    let base = ci * h * w + (2 * oy) * w + 2 * ox;
                                    dxd[base] += gv;
                                    dxd[base + 1] += gv;
                                    dxd[base + w] += gv;
                                    dxd[base + w + 1] += gv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Node::Linear { input, weight, bias } => {
                    let x = &self.values[*input];
                    let w = &self.values[*weight];
                    let (m, n) = (w.shape()[0], w.shape()[1]);
                    let gd = g.data();
                    let mut dx = Tensor::zeros(&[n]);
                    let mut dw = Tensor::zeros(&[m, n]);
                    {
                        let dxd = dx.data_mut();
                        let dwd = dw.data_mut();
                        let wd = w.data();
                        let xd = x.data();
                        for i in 0..m {
                            let gi = gd[i];
                            let row = &wd[i * n..(i + 1) * n];
                            let drow = &mut dwd[i * n..(i + 1) * n];
                            for j in 0..n {
                                dxd[j] += gi * row[j];
                                drow[j] += gi * xd[j];
                            }
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *weight, dw);
                    accumulate(&mut grads, *bias, g.clone());
                }
                Node::LstmCell { x, h_prev, c_prev, weight, bias, gates } => {
                    let (dx, dh, dc, dw, db) = lstm_backward(
                        &self.values[*x],
                        &self.values[*h_prev],
                        &self.values[*c_prev],
                        &self.values[*weight],
                        gates,
                        &self.values[i],
                        &g,
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *h_prev, dh);
                    accumulate(&mut grads, *c_prev, dc);
                    accumulate(&mut grads, *weight, dw);
                    accumulate(&mut grads, *bias, db);
                }
                Node::SliceRow { input, row } => {
                    let x = &self.values[*input];
                    let k = x.shape()[1];
                    let mut dx = Tensor::zeros(x.shape());
                    dx.data_mut()[row * k..(row + 1) * k].copy_from_slice(g.data());
                    accumulate(&mut grads, *input, dx);
                }
                Node::Column { input, col } => {
                    let x = &self.values[*input];
                    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let mut dx = Tensor::zeros(x.shape());
                    {
                        let dxd = dx.data_mut();
                        let gd = g.data();
                        for ci in 0..c {
                            for y in 0..h {
                                dxd[(ci * h + y) * w + col] = gd[ci * h + y];
                            }
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Node::Flatten { input } => {
                    let dx = g.reshaped(self.values[*input].shape()).expect("flatten grad");
                    accumulate(&mut grads, *input, dx);
                }
                Node::Sigmoid { input } => {
                    let y = &self.values[i];
                    let mut dx = g.clone();
                    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d = *d * yv * (F::ONE - yv);
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Node::Tanh { input } => {
                    let y = &self.values[i];
                    let mut dx = g.clone();
                    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d = *d * (F::ONE - yv * yv);
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Node::Relu { input } => {
                    let x = &self.values[*input];
                    let mut dx = g.clone();
                    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        if xv <= F::ZERO {
                            *d = F::ZERO;
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Node::Dropout { input, mask } => {
                    let mut dx = g.clone();
                    for (d, &m) in dx.data_mut().iter_mut().zip(mask.data()) {
                        *d = *d * m;
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Node::WeightedSum { input, weights } => {
                    let gv = g.item();
                    let mut dx = weights.reshaped(self.values[*input].shape()).expect("weights match input");
                    dx.scale_assign(gv);
                    accumulate(&mut grads, *input, dx);
                }
                Node::BceLoss { input, target } => {
                    let p = self.values[*input].item();
                    let eps = F::from_f64(BCE_EPS);
                    let dx = if p <= eps || p >= F::ONE - eps {
                        // The clamp is active; locally constant.
                        F::ZERO
                    } else {
                        (p - *target) / (p * (F::ONE - p))
                    };
                    accumulate(&mut grads, *input, Tensor::scalar(g.item() * dx));
                }
            }
        }
        Ok(())
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], idx: usize, delta: Tensor<F>) {
    match &mut grads[idx] {
        Some(t) => t.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

/// Valid output range for kernel offset `k` (0..3) against an input
/// extent, so `i = o * stride + k - 1` stays inside the input.
#[inline]
fn conv_range(k: usize, stride: usize, in_extent: usize, out_extent: usize) -> Option<(usize, usize)> {
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    if in_extent < k {
        return None;
    }
    let hi = ((in_extent - k) / stride).min(out_extent - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

// Index arithmetic is explicit in the strided branches; iterators hide
// the input stride.
#[allow(clippy::needless_range_loop)]
fn conv2d_forward<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
    (sw, sh): (usize, usize),
) -> Tensor<F> {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let c_out = kernel.shape()[0];
    let (oh, ow) = ((h - 1) / sh + 1, (w - 1) / sw + 1);
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    let xd = input.data();
    let kd = kernel.data();
    let od = out.data_mut();
    for co in 0..c_out {
        let out_ch = &mut od[co * oh * ow..(co + 1) * oh * ow];
        out_ch.iter_mut().for_each(|v| *v = bias.data()[co]);
        for ci in 0..c_in {
            let in_ch = &xd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                let Some((oy_lo, oy_hi)) = conv_range(ky, sh, h, oh) else { continue };
                for kx in 0..3 {
                    let Some((ox_lo, ox_hi)) = conv_range(kx, sw, w, ow) else { continue };
                    let wgt = kd[((co * c_in + ci) * 3 + ky) * 3 + kx];
                    let n = ox_hi - ox_lo + 1;
                    let ix0 = ox_lo * sw + kx - 1;
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * sh + ky - 1;
                        let in_row = &in_ch[iy * w..(iy + 1) * w];
                        let out_row = &mut out_ch[oy * ow..(oy + 1) * ow];
                        if sw == 1 {
                            let src = &in_row[ix0..ix0 + n];
                            let dst = &mut out_row[ox_lo..ox_lo + n];
                            for (o, &i) in dst.iter_mut().zip(src) {
                                *o += wgt * i;
                            }
                        } else {
                            let mut ix = ix0;
                            for ox in ox_lo..=ox_hi {
                                out_row[ox] += wgt * in_row[ix];
                                ix += sw;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Four-lane dot product; fixed association order keeps runs bit-equal.
#[inline]
fn dot4<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut lanes = [F::ZERO; 4];
    let mut chunks_a = a.chunks_exact(4);
    let mut chunks_b = b.chunks_exact(4);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        lanes[0] += ca[0] * cb[0];
        lanes[1] += ca[1] * cb[1];
        lanes[2] += ca[2] * cb[2];
        lanes[3] += ca[3] * cb[3];
    }
    let mut tail = F::ZERO;
    for (&x, &y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        tail += x * y;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

#[allow(clippy::type_complexity, clippy::needless_range_loop)]
fn conv2d_backward<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    grad: &Tensor<F>,
    (sw, sh): (usize, usize),
    need_dx: bool,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let c_out = kernel.shape()[0];
    let (oh, ow) = (grad.shape()[1], grad.shape()[2]);
    let mut dx = Tensor::zeros(input.shape());
    let mut dk = Tensor::zeros(kernel.shape());
    let mut db = Tensor::zeros(&[c_out]);

    let xd = input.data();
    let kd = kernel.data();
    let gd = grad.data();
    let dxd = dx.data_mut();
    let dkd = dk.data_mut();
    let dbd = db.data_mut();

    for co in 0..c_out {
        let g_ch = &gd[co * oh * ow..(co + 1) * oh * ow];
        let mut bsum = F::ZERO;
        for &gv in g_ch {
            bsum += gv;
        }
        dbd[co] = bsum;
        for ci in 0..c_in {
            let in_ch = &xd[ci * h * w..(ci + 1) * h * w];
            let dx_ch = &mut dxd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                let Some((oy_lo, oy_hi)) = conv_range(ky, sh, h, oh) else { continue };
                for kx in 0..3 {
                    let Some((ox_lo, ox_hi)) = conv_range(kx, sw, w, ow) else { continue };
                    let widx = ((co * c_in + ci) * 3 + ky) * 3 + kx;
                    let wgt = kd[widx];
                    let n = ox_hi - ox_lo + 1;
                    let ix0 = ox_lo * sw + kx - 1;
                    let mut wsum = F::ZERO;
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * sh + ky - 1;
                        let g_row = &g_ch[oy * ow..(oy + 1) * ow];
                        let in_row = &in_ch[iy * w..(iy + 1) * w];
                        if sw == 1 {
                            let gs = &g_row[ox_lo..ox_lo + n];
                            wsum += dot4(gs, &in_row[ix0..ix0 + n]);
                            if need_dx {
                                let dst = &mut dx_ch[iy * w + ix0..iy * w + ix0 + n];
                                for (d, &gv) in dst.iter_mut().zip(gs) {
                                    *d += gv * wgt;
                                }
                            }
                        } else {
                            let mut ix = ix0;
                            for ox in ox_lo..=ox_hi {
                                let gv = g_row[ox];
                                wsum += gv * in_row[ix];
                                if need_dx {
                                    dx_ch[iy * w + ix] += gv * wgt;
                                }
                                ix += sw;
                            }
                        }
                    }
                    dkd[widx] += wsum;
                }
            }
        }
    }
    (dx, dk, db)
}

#[allow(clippy::type_complexity)]
fn lstm_backward<F: Scalar>(
    x: &Tensor<F>,
    h_prev: &Tensor<F>,
    c_prev: &Tensor<F>,
    weight: &Tensor<F>,
    gates: &Tensor<F>,
    out_hc: &Tensor<F>,
    grad: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>, Tensor<F>, Tensor<F>) {
    let d = x.shape()[0];
    let k = h_prev.shape()[0];
    let cols = d + k;
    let gd = gates.data();
    let od = out_hc.data();
    let gh = &grad.data()[..k];
    let gc_out = &grad.data()[k..];

    let mut dpre = vec![F::ZERO; 4 * k];
    let mut dc_prev = Tensor::zeros(&[k]);
    {
        let dcp = dc_prev.data_mut();
        for i in 0..k {
            let (ig, fg, gg, og) = (gd[i], gd[k + i], gd[2 * k + i], gd[3 * k + i]);
            let c_new = od[k + i];
            let tc = c_new.tanh();
            let d_o = gh[i] * tc;
            let dc = gc_out[i] + gh[i] * og * (F::ONE - tc * tc);
            let di = dc * gg;
            let dg = dc * ig;
            let df = dc * c_prev.data()[i];
            dcp[i] = dc * fg;
            dpre[i] = di * ig * (F::ONE - ig);
            dpre[k + i] = df * fg * (F::ONE - fg);
            dpre[2 * k + i] = dg * (F::ONE - gg * gg);
            dpre[3 * k + i] = d_o * og * (F::ONE - og);
        }
    }

    let wd = weight.data();
    let mut dx = Tensor::zeros(&[d]);
    let mut dh = Tensor::zeros(&[k]);
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[4 * k]);
    {
        let dxd = dx.data_mut();
        let dhd = dh.data_mut();
        let dwd = dw.data_mut();
        let dbd = db.data_mut();
        for j in 0..4 * k {
            let gj = dpre[j];
            dbd[j] = gj;
            let row = &wd[j * cols..(j + 1) * cols];
            let drow = &mut dwd[j * cols..(j + 1) * cols];
            for i in 0..d {
                dxd[i] += gj * row[i];
                drow[i] += gj * x.data()[i];
            }
            for i in 0..k {
                dhd[i] += gj * row[d + i];
                drow[d + i] += gj * h_prev.data()[i];
            }
        }
    }
    (dx, dh, dc_prev, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::optim::xavier_uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(&[1, 4, 4], 1.0));
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0; // center tap
        let k = tape.input(k);
        let b = tape.input(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, (1, 1)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_all_ones_kernel_counts_window() {
        let mut tape = Tape::new();
        let c = 2.0;
        let x = tape.input(Tensor::filled(&[1, 4, 4], c));
        let k = tape.input(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let b = tape.input(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, (1, 1)).unwrap();
        let v = tape.value(y);
        // Interior windows see 9 cells, corners 4.
        assert_eq!(v.data()[5], 9.0 * c);
        assert_eq!(v.data()[0], 4.0 * c);
        assert_eq!(v.data()[3], 4.0 * c);
        assert_eq!(v.data()[15], 4.0 * c);
    }

    #[test]
    fn conv_stride_halves_height() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::zeros(&[1, 128, 48]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k = tape.input(xavier_uniform(&[1, 1, 3, 3], 9, 9, &mut rng));
        let b = tape.input(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, (1, 2)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 64, 48]);
    }

    #[test]
    fn conv_rejects_bad_stride_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[1, 4, 4]));
        let k = tape.input(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.input(Tensor::zeros(&[1]));
        assert!(tape.conv2d(x, k, b, (3, 1)).is_err());
        let k_bad = tape.input(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(tape.conv2d(x, k_bad, b, (1, 1)).is_err());
    }

    #[test]
    fn avgpool_means_windows() {
        let mut tape = Tape::new();
        let x = tape.input(tensor(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.avgpool2d(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).item(), 2.5);
    }

    #[test]
    fn avgpool_preserves_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 6 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mean_in: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let x = tape.input(tensor(&[2, 6, 8], data));
        let y = tape.avgpool2d(x).unwrap();
        let out = tape.value(y);
        let mean_out: f64 = out.data().iter().sum::<f64>() / out.numel() as f64;
        assert!((mean_in - mean_out).abs() < 1e-12);
    }

    #[test]
    fn avgpool_rejects_odd_extents() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(tape.avgpool2d(x), Err(NnError::OddExtent { .. })));
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let mut tape = Tape::new();
        let x = tape.input(tensor(&[2], vec![3.0, -1.0]));
        let eye = tape.input(tensor(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let zero_b = tape.input(Tensor::zeros(&[2]));
        let y = tape.linear(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);

        let zero_w = tape.input(Tensor::zeros(&[2, 2]));
        let b = tape.input(tensor(&[2], vec![0.5, 0.25]));
        let y2 = tape.linear(x, zero_w, b).unwrap();
        assert_eq!(tape.value(y2).data(), &[0.5, 0.25]);
    }

    #[test]
    fn linear_matrix_vector_product() {
        let mut tape = Tape::new();
        let x = tape.input(tensor(&[2], vec![1.0, 1.0]));
        let w = tape.input(tensor(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(Tensor::zeros(&[2]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn lstm_all_zero_parameters_give_zero_state() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::zeros(&[3]));
        let h0 = tape.input(Tensor::zeros(&[2]));
        let c0 = tape.input(Tensor::zeros(&[2]));
        let w = tape.input(Tensor::zeros(&[8, 5]));
        let b = tape.input(Tensor::zeros(&[8]));
        let (h, c) = tape.lstm_cell(x, h0, c0, w, b).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_forget_gate_carries_cell() {
        let k = 2;
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::zeros(&[1]));
        let h0 = tape.input(Tensor::zeros(&[k]));
        let c0 = tape.input(tensor(&[k], vec![0.7, -0.3]));
        let w = tape.input(Tensor::zeros(&[4 * k, 1 + k]));
        let mut bias = Tensor::zeros(&[4 * k]);
        for i in 0..k {
            bias.data_mut()[k + i] = 100.0; // forget-gate rows
        }
        let b = tape.input(bias);
        let (_h, c) = tape.lstm_cell(x, h0, c0, w, b).unwrap();
        for (got, want) in tape.value(c).data().iter().zip([0.7, -0.3]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn lstm_gate_activations_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (d, k) = (4, 3);
        let mut tape = Tape::<f64>::new();
        let x = tape.input(xavier_uniform(&[d], d, d, &mut rng));
        let h0 = tape.input(xavier_uniform(&[k], k, k, &mut rng));
        let c0 = tape.input(xavier_uniform(&[k], k, k, &mut rng));
        let w = tape.input(xavier_uniform(&[4 * k, d + k], d + k, 4 * k, &mut rng));
        let b = tape.input(Tensor::zeros(&[4 * k]));
        let (_h, _c) = tape.lstm_cell(x, h0, c0, w, b).unwrap();
        let gates = tape.last_lstm_gates().unwrap();
        for (j, &v) in gates.data().iter().enumerate() {
            if j < 2 * k || j >= 3 * k {
                assert!(v > 0.0 && v < 1.0, "gate {j} = {v}");
            }
        }
    }

    #[test]
    fn sigmoid_and_bce_reference_values() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(0.0f64));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);

        let l = tape.bce_loss(y, 1.0).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let l0 = tape.bce_loss(y, 0.0).unwrap();
        assert!((tape.value(l0).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let near_one = tape.input(Tensor::scalar(1.0 - BCE_EPS));
        let l1 = tape.bce_loss(near_one, 1.0).unwrap();
        assert!(tape.value(l1).item() <= 1.2e-7);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut params = ParamSet::new();
        let slot = params.add("p", tensor(&[3], vec![1.0, 2.0, 3.0]));
        let mut tape = Tape::new();
        let p = tape.param(&params, slot);
        let loss = tape.weighted_sum(p, Tensor::filled(&[3], 1.0)).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(slot).grad.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_through_sigmoid_bce_closed_form() {
        // loss = bce(sigmoid(w * x), 1) at w = 0, x = 1 has dloss/dw = -0.5.
        let mut params = ParamSet::new();
        let slot = params.add("w", Tensor::scalar(0.0f64));
        let mut tape = Tape::new();
        let w = tape.param(&params, slot);
        let wx = tape.weighted_sum(w, Tensor::scalar(1.0)).unwrap();
        let p = tape.sigmoid(wx);
        let loss = tape.bce_loss(p, 1.0).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert!((params.get(slot).grad.item() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn unused_parameter_keeps_zero_gradient() {
        let mut params = ParamSet::new();
        let used = params.add("used", Tensor::scalar(2.0f64));
        let unused = params.add("unused", Tensor::scalar(5.0f64));
        let mut tape = Tape::new();
        let u = tape.param(&params, used);
        let _nu = tape.param(&params, unused);
        let loss = tape.weighted_sum(u, Tensor::scalar(3.0)).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(used).grad.item(), 3.0);
        assert_eq!(params.get(unused).grad.item(), 0.0);
    }

    #[test]
    fn conv_and_linear_are_linear_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = [2, 4, 4];
        let xa: Tensor<f64> = xavier_uniform(&shape, 8, 8, &mut rng);
        let xb: Tensor<f64> = xavier_uniform(&shape, 8, 8, &mut rng);
        let kernel: Tensor<f64> = xavier_uniform(&[3, 2, 3, 3], 18, 27, &mut rng);
        let (alpha, beta) = (0.7, -1.3);

        let eval = |x: &Tensor<f64>| -> Tensor<f64> {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let kv = tape.input(kernel.clone());
            let bv = tape.input(Tensor::zeros(&[3]));
            let y = tape.conv2d(xv, kv, bv, (1, 1)).unwrap();
            tape.value(y).clone()
        };
        let mut mixed = xa.clone();
        for (m, (&a, &b)) in mixed.data_mut().iter_mut().zip(xa.data().iter().zip(xb.data())) {
            *m = alpha * a + beta * b;
        }
        let lhs = eval(&mixed);
        let (ya, yb) = (eval(&xa), eval(&xb));
        for ((l, a), b) in lhs.data().iter().zip(ya.data()).zip(yb.data()) {
            assert!((l - (alpha * a + beta * b)).abs() < 1e-9);
        }

        let weight: Tensor<f64> = xavier_uniform(&[5, 32], 32, 5, &mut rng);
        let eval_lin = |x: &Tensor<f64>| -> Tensor<f64> {
            let mut tape = Tape::new();
            let xv = tape.input(x.reshaped(&[32]).unwrap());
            let wv = tape.input(weight.clone());
            let bv = tape.input(Tensor::zeros(&[5]));
            let y = tape.linear(xv, wv, bv).unwrap();
            tape.value(y).clone()
        };
        let lin_lhs = eval_lin(&mixed);
        let (la, lb) = (eval_lin(&xa), eval_lin(&xb));
        for ((l, a), b) in lin_lhs.data().iter().zip(la.data()).zip(lb.data()) {
            assert!((l - (alpha * a + beta * b)).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_eval_is_identity_train_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::filled(&[1000], 1.0));
        let y = tape.dropout(x, 0.5, &mut rng);
        let v = tape.value(y);
        let kept = v.data().iter().filter(|&&v| v != 0.0).count();
        assert!(v.data().iter().all(|&v| v == 0.0 || v == 2.0));
        // Loose bound: about half survive.
        assert!((300..700).contains(&kept));
    }
}
