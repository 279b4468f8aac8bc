//! Reverse-mode autodiff tape. Ops append nodes in topological order; each
//! node owns its forward value plus whatever the backward rule needs (input
//! ids, attributes, saved normalization statistics). `backward` walks the
//! tape once in reverse and populates `Tensor::grad` on every node that
//! requires gradients, leaves included.
//!
//! Elementwise binary ops require identical shapes; there is no broadcasting.
//! Bias terms are folded into `conv2d` and `linear` instead.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::kernels::conv::{conv2d_backward, conv2d_forward, conv_out_dim, ConvGeom};
use crate::kernels::interp::{bilinear_resize_backward, bilinear_resize_forward};
use crate::kernels::matmul::{matmul_nn, matmul_nt, matmul_tn};
use crate::kernels::pool::{adaptive_avgpool2d_backward, adaptive_avgpool2d_forward};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Saved batch statistics; `inv_std` is 1/sqrt(var + eps) per channel or
/// per token row.
#[derive(Debug, Clone)]
struct NormStats<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
}

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    BatchNorm2d {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: NormStats<T>,
        /// Batch-stat mode backpropagates through the statistics; running-stat
        /// mode treats them as constants.
        batch_stats: bool,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: NormStats<T>,
    },
    AdaptiveAvgPool2d {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Relu {
        x: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Softplus {
        x: NodeId,
    },
    Ln {
        x: NodeId,
    },
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    BilinearUpsample {
        x: NodeId,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    Reshape {
        x: NodeId,
    },
    Permute {
        x: NodeId,
        axes: Vec<usize>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Div {
        a: NodeId,
        b: NodeId,
    },
    AddScalar {
        x: NodeId,
    },
    MulScalar {
        x: NodeId,
        c: f64,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
}

struct Node<T: Element> {
    tensor: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a graph input, keeping its requires_grad flag.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Inserts a tensor that never receives gradients (targets, fixed kernels).
    pub fn constant(&mut self, mut t: Tensor<T>) -> NodeId {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].tensor
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    /// Removes the node's value from the graph, leaving a placeholder. Used
    /// to extract final predictions without copying.
    pub fn take_value(&mut self, id: NodeId) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[id.0].tensor, Tensor::zeros(&[1]))
    }

    pub fn assert_finite(&self, id: NodeId, what: &str) -> Result<()> {
        if self.nodes[id.0].tensor.all_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("non-finite values in {what}")))
        }
    }

    fn push(&mut self, mut tensor: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        tensor.requires_grad = requires_grad;
        tensor.grad = None;
        self.nodes.push(Node { tensor, op });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn data(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].tensor.data()
    }

    // ───────────────────────── convolution / pooling ─────────────────────────

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d wants rank-4 input and weight, got {xs:?} and {ws:?}"
            )));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, c_in_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh != kw {
            return Err(Error::shape(format!("conv2d kernels must be square, got {kh}x{kw}")));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || c_in / groups != c_in_g {
            return Err(Error::shape(format!(
                "conv2d group mismatch: c_in={c_in}, c_out={c_out}, groups={groups}, weight c_in/groups={c_in_g}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be >= 1".to_string()));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [c_out] {
                return Err(Error::shape(format!("conv2d bias shape {bs:?}, want [{c_out}]")));
            }
        }
        let (h_out, w_out) = match (
            conv_out_dim(h, kh, stride, padding),
            conv_out_dim(wd, kh, stride, padding),
        ) {
            (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
            _ => {
                return Err(Error::degenerate(format!(
                    "conv2d output would be empty for input {h}x{wd}, k={kh}, stride={stride}, padding={padding}"
                )))
            }
        };
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            k: kh,
            stride,
            padding,
            groups,
            h_out,
            w_out,
        };
        let out = conv2d_forward(
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
            &geom,
        );
        let t = Tensor::new(&[n, c_out, h_out, w_out], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn adaptive_avgpool2d(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::shape(format!("adaptive_avgpool2d wants rank 4, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::shape(format!(
                "adaptive_avgpool2d output {out_h}x{out_w} invalid for input {h}x{w}"
            )));
        }
        let out = adaptive_avgpool2d_forward(self.data(x), n, c, h, w, out_h, out_w);
        let t = Tensor::new(&[n, c, out_h, out_w], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::AdaptiveAvgPool2d { x }, rg))
    }

    pub fn bilinear_upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::shape(format!("bilinear_upsample wants rank 4, got {xs:?}")));
        }
        if factor == 0 {
            return Err(Error::shape("bilinear_upsample factor must be >= 1".to_string()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * factor, w * factor);
        let out = bilinear_resize_forward(self.data(x), n * c, h, w, oh, ow);
        let t = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::BilinearUpsample { x }, rg))
    }

    // ───────────────────────── normalization ─────────────────────────

    /// Batch normalization over (N,H,W) per channel using batch statistics.
    /// Returns the node plus (batch_mean, biased batch_var) so the caller can
    /// maintain running buffers.
    pub fn batch_norm2d_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<T>, Vec<T>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("batch_norm2d wants rank 4, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        self.check_vec_param(gamma, c, "batch_norm2d gamma")?;
        self.check_vec_param(beta, c, "batch_norm2d beta")?;
        let m = (n * h * w) as f64;
        let xd = self.data(x);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for b in 0..n {
                for v in &xd[((b * c) + ch) * h * w..][..h * w] {
                    acc += *v;
                }
            }
            mean[ch] = acc / T::from_f64(m);
        }
        for ch in 0..c {
            let mu = mean[ch];
            let mut acc = T::zero();
            for b in 0..n {
                for v in &xd[((b * c) + ch) * h * w..][..h * w] {
                    let d = *v - mu;
                    acc += d * d;
                }
            }
            var[ch] = acc / T::from_f64(m);
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let id = self.bn_apply(x, gamma, beta, &mean, &inv_std, true);
        Ok((id, mean, var))
    }

    /// Batch normalization with fixed running statistics (inference mode).
    pub fn batch_norm2d_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::shape(format!("batch_norm2d wants rank 4, got {xs:?}")));
        }
        let c = xs[1];
        self.check_vec_param(gamma, c, "batch_norm2d gamma")?;
        self.check_vec_param(beta, c, "batch_norm2d beta")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(format!(
                "batch_norm2d running stats length {} vs {c} channels",
                running_mean.len()
            )));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        Ok(self.bn_apply(x, gamma, beta, running_mean, &inv_std, false))
    }

    fn bn_apply(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
    ) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                let base = ((b * c) + ch) * h * w;
                for i in 0..h * w {
                    out[base + i] = (xd[base + i] - mu) * is * ga + be;
                }
            }
        }
        let t = Tensor::new(&xs, out).expect("bn shape");
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            t,
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                stats: NormStats {
                    mean: mean.to_vec(),
                    inv_std: inv_std.to_vec(),
                },
                batch_stats,
            },
            rg,
        )
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| Error::shape("layer_norm on rank-0 tensor".to_string()))?;
        self.check_vec_param(gamma, c, "layer_norm gamma")?;
        self.check_vec_param(beta, c, "layer_norm beta")?;
        let rows = self.nodes[x.0].tensor.numel() / c;
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![T::zero(); xd.len()];
        let mut mean = vec![T::zero(); rows];
        let mut inv_std = vec![T::zero(); rows];
        let cf = T::from_f64(c as f64);
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mut mu = T::zero();
            for v in row {
                mu += *v;
            }
            mu = mu / cf;
            let mut var = T::zero();
            for v in row {
                let d = *v - mu;
                var += d * d;
            }
            var = var / cf;
            let is = T::one() / (var + T::from_f64(eps)).sqrt();
            mean[r] = mu;
            inv_std[r] = is;
            let orow = &mut out[r * c..(r + 1) * c];
            for i in 0..c {
                orow[i] = (row[i] - mu) * is * gd[i] + bd[i];
            }
        }
        let t = Tensor::new(&xs, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats: NormStats { mean, inv_std },
            },
            rg,
        ))
    }

    fn check_vec_param(&self, id: NodeId, len: usize, what: &str) -> Result<()> {
        let s = self.shape(id);
        if s != [len] {
            return Err(Error::shape(format!("{what} shape {s:?}, want [{len}]")));
        }
        Ok(())
    }

    // ───────────────────────── linear algebra ─────────────────────────

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(Error::shape(format!("linear weight must be rank 2, got {ws:?}")));
        }
        let d_in = *xs.last().ok_or_else(|| Error::shape("linear on rank-0 tensor".to_string()))?;
        if d_in != ws[0] {
            return Err(Error::shape(format!(
                "linear inner dim mismatch: input {xs:?} vs weight {ws:?}"
            )));
        }
        let d_out = ws[1];
        if let Some(b) = b {
            self.check_vec_param(b, d_out, "linear bias")?;
        }
        let rows = self.nodes[x.0].tensor.numel() / d_in;
        let mut out = vec![T::zero(); rows * d_out];
        matmul_nn(self.data(x), self.data(w), &mut out, rows, d_in, d_out);
        if let Some(bid) = b {
            let bd = self.data(bid);
            for r in 0..rows {
                for (o, &bv) in out[r * d_out..(r + 1) * d_out].iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// Batched matrix product over the last two axes; leading axes must match
    /// exactly. With `transpose_b`, `b` is stored [.., N, K] and used as Bᵀ.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() < 2 || as_.len() != bs.len() {
            return Err(Error::shape(format!("matmul rank mismatch: {as_:?} vs {bs:?}")));
        }
        let lead = as_.len() - 2;
        if as_[..lead] != bs[..lead] {
            return Err(Error::shape(format!("matmul batch dims differ: {as_:?} vs {bs:?}")));
        }
        let (m, k) = (as_[lead], as_[lead + 1]);
        let (n, kb) = if transpose_b {
            (bs[lead], bs[lead + 1])
        } else {
            (bs[lead + 1], bs[lead])
        };
        if kb != k {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {as_:?} vs {bs:?} (transpose_b={transpose_b})"
            )));
        }
        let batch: usize = as_[..lead].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            let ab = &ad[i * m * k..][..m * k];
            let bb = &bd[i * n * k..][..n * k];
            let cb = &mut out[i * m * n..][..m * n];
            if transpose_b {
                matmul_nt(ab, bb, cb, m, k, n);
            } else {
                matmul_nn(ab, bb, cb, m, k, n);
            }
        }
        let mut shape = as_;
        shape[lead] = m;
        shape[lead + 1] = n;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul { a, b, transpose_b }, rg))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {xs:?}")));
        }
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let outer: usize = xs[..axis].iter().product();
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = xd[base];
                for l in 1..len {
                    let v = xd[base + l * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = T::zero();
                for l in 0..len {
                    let e = (xd[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    denom += e;
                }
                for l in 0..len {
                    out[base + l * inner] = out[base + l * inner] / denom;
                }
            }
        }
        let t = Tensor::new(&xs, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    // ───────────────────────── layout transforms ─────────────────────────

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.nodes[x.0].tensor.clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if !is_permutation(axes, xs.len()) {
            return Err(Error::shape(format!("invalid permutation {axes:?} for {xs:?}")));
        }
        let out = permute_data(self.data(x), &xs, axes);
        let shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// [N,C,H,W] → [N, H·W, C] token layout.
    pub fn img2seq(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("img2seq wants rank 4, got {xs:?}")));
        }
        let flat = self.reshape(x, &[xs[0], xs[1], xs[2] * xs[3]])?;
        self.permute(flat, &[0, 2, 1])
    }

    /// [N, H·W, C] → [N,C,H,W]; inverse of [`Self::img2seq`].
    pub fn seq2img(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != h * w {
            return Err(Error::shape(format!(
                "seq2img wants [N,{}·{},C] tokens, got {xs:?}",
                h, w
            )));
        }
        let chw = self.permute(x, &[0, 2, 1])?;
        self.reshape(chw, &[xs[0], xs[2], h, w])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::usage("concat of zero tensors".to_string()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut axis_total = 0;
        for &id in xs {
            let s = self.shape(id);
            if s.len() != first.len() {
                return Err(Error::shape(format!("concat rank mismatch: {first:?} vs {s:?}")));
            }
            for (d, (&a, &b)) in first.iter().zip(s).enumerate() {
                if d != axis && a != b {
                    return Err(Error::shape(format!(
                        "concat non-axis dims differ: {first:?} vs {s:?}"
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::zero(); shape.iter().product()];
        let row_out = axis_total * inner;
        let mut offset = 0;
        for &id in xs {
            let len = self.shape(id)[axis];
            let data = self.data(id);
            for o in 0..outer {
                let src = &data[o * len * inner..][..len * inner];
                out[o * row_out + offset..][..len * inner].copy_from_slice(src);
            }
            offset += len * inner;
        }
        let t = Tensor::new(&shape, out)?;
        let rg = xs.iter().any(|&id| self.rg(id));
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ───────────────────────── elementwise & reductions ─────────────────────────

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
        name: &str,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{name} shape mismatch: {:?} vs {:?} (no broadcasting)",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), out).expect("binary shape");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x / y, Op::Div { a, b }, "div")
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let out: Vec<T> = self.data(x).iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x), out).expect("unary shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x })
    }

    /// Exact Gaussian-CDF GELU: x·Φ(x) with Φ(x) = (1 + erf(x/√2))/2.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        self.unary(
            x,
            |v| v * half * (T::one() + (v * inv_sqrt2).erf()),
            Op::Gelu { x },
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(
            x,
            |v| {
                // Split on sign so exp never overflows.
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid { x },
        )
    }

    /// ln(1 + e^x), as max(x,0) + ln1p(e^{−|x|}) so neither branch overflows.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(
            x,
            |v| {
                let pos = if v > T::zero() { v } else { T::zero() };
                pos + (-v.abs()).exp().ln_1p()
            },
            Op::Softplus { x },
        )
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.ln(), Op::Ln { x })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(
            x,
            |v| {
                if v < l {
                    l
                } else if v > h {
                    h
                } else {
                    v
                }
            },
            Op::Clamp { x, lo, hi },
        )
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let cv = T::from_f64(c);
        self.unary(x, |v| v + cv, Op::AddScalar { x })
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let cv = T::from_f64(c);
        self.unary(x, |v| v * cv, Op::MulScalar { x, c })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for v in self.data(x) {
            acc += *v;
        }
        let t = Tensor::new(&[1], vec![acc]).expect("sum");
        let rg = self.rg(x);
        self.push(t, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].tensor.numel();
        let mut acc = T::zero();
        for v in self.data(x) {
            acc += *v;
        }
        let t = Tensor::new(&[1], vec![acc / T::from_f64(n as f64)]).expect("mean");
        let rg = self.rg(x);
        self.push(t, Op::Mean { x }, rg)
    }

    // ───────────────────────── backward ─────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every node with
    /// requires_grad; unreached leaves get zero-filled gradients so the
    /// populated-grad contract holds for parameters outside the data path.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Err(Error::usage(
                "backward on a loss that does not depend on any requires_grad leaf".to_string(),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.rg(NodeId(id)) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, slot) in grads.into_iter().enumerate() {
            let t = &mut self.nodes[id].tensor;
            if t.requires_grad {
                let g = slot.unwrap_or_else(|| vec![T::zero(); t.numel()]);
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::numeric(format!(
                        "non-finite gradient at node {id}"
                    )));
                }
                t.grad = Some(g);
            }
        }
        Ok(())
    }

    /// Adds this node's contribution to its inputs' gradient buffers.
    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Local accumulator access: allocate on first touch, then add.
        macro_rules! with_buf {
            ($nid:expr, $body:expr) => {{
                let nid: NodeId = $nid;
                if self.rg(nid) {
                    let mut buf = grads[nid.0]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); self.nodes[nid.0].tensor.numel()]);
                    #[allow(clippy::redundant_closure_call)]
                    ($body)(&mut buf);
                    grads[nid.0] = Some(buf);
                }
            }};
        }

        match &self.nodes[id].op {
            Op::Leaf => {}

            Op::Conv2d { x, w, b, geom } => {
                let (xd, wd) = (self.data(*x), self.data(*w));
                // x, w, b are always distinct nodes, so the buffers can be
                // taken simultaneously.
                let mut bx = if self.rg(*x) {
                    Some(grads[x.0].take().unwrap_or_else(|| vec![T::zero(); xd.len()]))
                } else {
                    None
                };
                let mut bw = if self.rg(*w) {
                    Some(grads[w.0].take().unwrap_or_else(|| vec![T::zero(); wd.len()]))
                } else {
                    None
                };
                let mut bb = b.filter(|b| self.rg(*b)).map(|b| {
                    grads[b.0]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); self.nodes[b.0].tensor.numel()])
                });
                conv2d_backward(
                    xd,
                    wd,
                    g,
                    geom,
                    bx.as_deref_mut(),
                    bw.as_deref_mut(),
                    bb.as_deref_mut(),
                );
                if let Some(buf) = bx {
                    grads[x.0] = Some(buf);
                }
                if let Some(buf) = bw {
                    grads[w.0] = Some(buf);
                }
                if let (Some(bid), Some(buf)) = (b, bb) {
                    grads[bid.0] = Some(buf);
                }
            }

            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                stats,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = h * w;
                let m = T::from_f64((n * hw) as f64);
                let (xd, gd) = (self.data(*x), self.data(*gamma));
                // Per-channel reductions of dy and dy·xhat are shared by all
                // three gradients.
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = ((b * c) + ch) * hw;
                        let (mu, is) = (stats.mean[ch], stats.inv_std[ch]);
                        for i in 0..hw {
                            let dy = g[base + i];
                            sum_dy[ch] += dy;
                            sum_dy_xhat[ch] += dy * (xd[base + i] - mu) * is;
                        }
                    }
                }
                with_buf!(*gamma, |buf: &mut Vec<T>| {
                    for ch in 0..c {
                        buf[ch] += sum_dy_xhat[ch];
                    }
                });
                with_buf!(*beta, |buf: &mut Vec<T>| {
                    for ch in 0..c {
                        buf[ch] += sum_dy[ch];
                    }
                });
                with_buf!(*x, |buf: &mut Vec<T>| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = ((b * c) + ch) * hw;
                            let (mu, is, ga) = (stats.mean[ch], stats.inv_std[ch], gd[ch]);
                            if *batch_stats {
                                for i in 0..hw {
                                    let xhat = (xd[base + i] - mu) * is;
                                    buf[base + i] += ga * is / m
                                        * (m * g[base + i]
                                            - sum_dy[ch]
                                            - xhat * sum_dy_xhat[ch]);
                                }
                            } else {
                                for i in 0..hw {
                                    buf[base + i] += g[base + i] * ga * is;
                                }
                            }
                        }
                    }
                });
            }

            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let c = *self.shape(*x).last().unwrap();
                let rows = self.nodes[x.0].tensor.numel() / c;
                let (xd, gd) = (self.data(*x), self.data(*gamma));
                with_buf!(*gamma, |buf: &mut Vec<T>| {
                    for r in 0..rows {
                        let (mu, is) = (stats.mean[r], stats.inv_std[r]);
                        for i in 0..c {
                            buf[i] += g[r * c + i] * (xd[r * c + i] - mu) * is;
                        }
                    }
                });
                with_buf!(*beta, |buf: &mut Vec<T>| {
                    for r in 0..rows {
                        for i in 0..c {
                            buf[i] += g[r * c + i];
                        }
                    }
                });
                with_buf!(*x, |buf: &mut Vec<T>| {
                    let cf = T::from_f64(c as f64);
                    for r in 0..rows {
                        let (mu, is) = (stats.mean[r], stats.inv_std[r]);
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for i in 0..c {
                            let xhat = (xd[r * c + i] - mu) * is;
                            let dxhat = g[r * c + i] * gd[i];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for i in 0..c {
                            let xhat = (xd[r * c + i] - mu) * is;
                            let dxhat = g[r * c + i] * gd[i];
                            buf[r * c + i] +=
                                is * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
                        }
                    }
                });
            }

            Op::AdaptiveAvgPool2d { x } => {
                let xs = self.shape(*x);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let os = self.nodes[id].tensor.shape();
                let (oh, ow) = (os[2], os[3]);
                with_buf!(*x, |buf: &mut Vec<T>| {
                    adaptive_avgpool2d_backward(g, n, c, h, w, oh, ow, buf);
                });
            }

            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (d_in, d_out) = (ws[0], ws[1]);
                let rows = self.nodes[x.0].tensor.numel() / d_in;
                let (xd, wd) = (self.data(*x), self.data(*w));
                with_buf!(*x, |buf: &mut Vec<T>| {
                    matmul_nt(g, wd, buf, rows, d_out, d_in);
                });
                with_buf!(*w, |buf: &mut Vec<T>| {
                    matmul_tn(xd, g, buf, d_in, rows, d_out);
                });
                if let Some(bid) = b {
                    with_buf!(*bid, |buf: &mut Vec<T>| {
                        for r in 0..rows {
                            for (bv, &gv) in buf.iter_mut().zip(&g[r * d_out..(r + 1) * d_out]) {
                                *bv += gv;
                            }
                        }
                    });
                }
            }

            Op::MatMul { a, b, transpose_b } => {
                let as_ = self.shape(*a).to_vec();
                let lead = as_.len() - 2;
                let (m, k) = (as_[lead], as_[lead + 1]);
                let bs = self.shape(*b);
                let n = if *transpose_b { bs[lead] } else { bs[lead + 1] };
                let batch: usize = as_[..lead].iter().product();
                let (ad, bd) = (self.data(*a), self.data(*b));
                with_buf!(*a, |buf: &mut Vec<T>| {
                    for i in 0..batch {
                        let gb = &g[i * m * n..][..m * n];
                        let bb = &bd[i * n * k..][..n * k];
                        let da = &mut buf[i * m * k..][..m * k];
                        if *transpose_b {
                            // C = A·Bᵀ ⇒ dA = dC·B
                            matmul_nn(gb, bb, da, m, n, k);
                        } else {
                            // dA = dC·Bᵀ
                            matmul_nt(gb, bb, da, m, n, k);
                        }
                    }
                });
                with_buf!(*b, |buf: &mut Vec<T>| {
                    for i in 0..batch {
                        let gb = &g[i * m * n..][..m * n];
                        let ab = &ad[i * m * k..][..m * k];
                        let db = &mut buf[i * n * k..][..n * k];
                        if *transpose_b {
                            // dB = dCᵀ·A
                            matmul_tn(gb, ab, db, n, m, k);
                        } else {
                            // dB = Aᵀ·dC
                            matmul_tn(ab, gb, db, k, m, n);
                        }
                    }
                });
            }

            Op::Softmax { x, axis } => {
                let xs = self.shape(*x).to_vec();
                let len = xs[*axis];
                let inner: usize = xs[*axis + 1..].iter().product();
                let outer: usize = xs[..*axis].iter().product();
                let yd = self.nodes[id].tensor.data();
                with_buf!(*x, |buf: &mut Vec<T>| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for l in 0..len {
                                let idx = base + l * inner;
                                dot += g[idx] * yd[idx];
                            }
                            for l in 0..len {
                                let idx = base + l * inner;
                                buf[idx] += yd[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }

            Op::Relu { x } => {
                let xd = self.data(*x);
                with_buf!(*x, |buf: &mut Vec<T>| {
                    for i in 0..buf.len() {
                        if xd[i] > T::zero() {
                            buf[i] += g[i];
                        }
                    }
                });
            }

            Op::Gelu { x } => {
                let xd = self.data(*x);
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                with_buf!(*x, |buf: &mut Vec<T>| {
                    for i in 0..buf.len() {
                        let v = xd[i];
                        let phi_big = half * (T::one() + (v * inv_sqrt2).erf());
                        let phi_small = inv_sqrt_2pi * (-(v * v) * half).exp();
                        buf[i] += g[i] * (phi_big + v * phi_small);
                    }
                });
            }

            Op::Sigmoid { x } => {
                let yd = self.nodes[id].tensor.data();
                with_buf!(*x, |buf: &mut Vec<T>| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * yd[i] * (T::one() - yd[i]);
                    }
                });
            }

            Op::Softplus { x } => {
                let xd = self.data(*x);
                with_buf!(*x, |buf: &mut Vec<T>| {
                    for i in 0..buf.len() {
                        let v = xd[i];
                        let s = if v >= T::zero() {
                            T::one() / (T::one() + (-v).exp())
                        } else {
                            let e = v.exp();
                            e / (T::one() + e)
                        };
                        buf[i] += g[i] * s;
                    }
                });
            }

            Op::Ln { x } => {
                let xd = self.data(*x);
                with_buf!(*x, |buf: &mut Vec<T>| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / xd[i];
                    }
                });
            }

            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                let (l, h) = (T::from_f64(*lo), T::from_f64(*hi));
                with_buf!(*x, |buf: &mut Vec<T>| {
                    for i in 0..buf.len() {
                        if xd[i] > l && xd[i] < h {
                            buf[i] += g[i];
                        }
                    }
                });
            }

            Op::BilinearUpsample { x } => {
                let xs = self.shape(*x);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let os = self.nodes[id].tensor.shape();
                let (oh, ow) = (os[2], os[3]);
                with_buf!(*x, |buf: &mut Vec<T>| {
                    bilinear_resize_backward(g, n * c, h, w, oh, ow, buf);
                });
            }

            Op::Concat { xs, axis } => {
                let shape = self.nodes[id].tensor.shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let row_out = shape[*axis] * inner;
                let mut offset = 0;
                for &xid in xs {
                    let len = self.shape(xid)[*axis];
                    with_buf!(xid, |buf: &mut Vec<T>| {
                        for o in 0..outer {
                            let dst = &mut buf[o * len * inner..][..len * inner];
                            let src = &g[o * row_out + offset..][..len * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += len * inner;
                }
            }

            Op::Reshape { x } => {
                with_buf!(*x, |buf: &mut Vec<T>| {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b += gv;
                    }
                });
            }

            Op::Permute { x, axes } => {
                // Gradient flows through the inverse permutation.
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let out_shape = self.nodes[id].tensor.shape().to_vec();
                let ginv = permute_data(g, &out_shape, &inv);
                with_buf!(*x, |buf: &mut Vec<T>| {
                    for (b, &gv) in buf.iter_mut().zip(&ginv) {
                        *b += gv;
                    }
                });
            }

            Op::Add { a, b } => {
                if a == b {
                    with_buf!(*a, |buf: &mut Vec<T>| {
                        for (bv, &gv) in buf.iter_mut().zip(g) {
                            *bv += gv + gv;
                        }
                    });
                } else {
                    for id in [*a, *b] {
                        with_buf!(id, |buf: &mut Vec<T>| {
                            for (bv, &gv) in buf.iter_mut().zip(g) {
                                *bv += gv;
                            }
                        });
                    }
                }
            }

            Op::Sub { a, b } => {
                if a == b {
                    // d(x−x) = 0; nothing to add.
                } else {
                    with_buf!(*a, |buf: &mut Vec<T>| {
                        for (bv, &gv) in buf.iter_mut().zip(g) {
                            *bv += gv;
                        }
                    });
                    with_buf!(*b, |buf: &mut Vec<T>| {
                        for (bv, &gv) in buf.iter_mut().zip(g) {
                            *bv -= gv;
                        }
                    });
                }
            }

            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if a == b {
                    with_buf!(*a, |buf: &mut Vec<T>| {
                        for i in 0..buf.len() {
                            buf[i] += (ad[i] + ad[i]) * g[i];
                        }
                    });
                } else {
                    with_buf!(*a, |buf: &mut Vec<T>| {
                        for i in 0..buf.len() {
                            buf[i] += bd[i] * g[i];
                        }
                    });
                    with_buf!(*b, |buf: &mut Vec<T>| {
                        for i in 0..buf.len() {
                            buf[i] += ad[i] * g[i];
                        }
                    });
                }
            }

            Op::Div { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if a == b {
                    // d(x/x) = 0 for x ≠ 0.
                } else {
                    with_buf!(*a, |buf: &mut Vec<T>| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] / bd[i];
                        }
                    });
                    with_buf!(*b, |buf: &mut Vec<T>| {
                        for i in 0..buf.len() {
                            buf[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                        }
                    });
                }
            }

            Op::AddScalar { x } => {
                with_buf!(*x, |buf: &mut Vec<T>| {
                    for (bv, &gv) in buf.iter_mut().zip(g) {
                        *bv += gv;
                    }
                });
            }

            Op::MulScalar { x, c } => {
                let cv = T::from_f64(*c);
                with_buf!(*x, |buf: &mut Vec<T>| {
                    for (bv, &gv) in buf.iter_mut().zip(g) {
                        *bv += cv * gv;
                    }
                });
            }

            Op::Sum { x } => {
                let gv = g[0];
                with_buf!(*x, |buf: &mut Vec<T>| {
                    for bv in buf.iter_mut() {
                        *bv += gv;
                    }
                });
            }

            Op::Mean { x } => {
                let n = self.nodes[x.0].tensor.numel();
                let gv = g[0] / T::from_f64(n as f64);
                with_buf!(*x, |buf: &mut Vec<T>| {
                    for bv in buf.iter_mut() {
                        *bv += gv;
                    }
                });
            }
        }
    }
}

fn is_permutation(axes: &[usize], rank: usize) -> bool {
    if axes.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    // Fast path: rank-3 swap of the last two axes, the img2seq/seq2img hot
    // spot.
    if shape.len() == 3 && axes == [0, 2, 1] {
        let (n, a, b) = (shape[0], shape[1], shape[2]);
        let mut out = vec![T::zero(); data.len()];
        for img in 0..n {
            let src = &data[img * a * b..][..a * b];
            let dst = &mut out[img * a * b..][..a * b];
            for i in 0..a {
                for j in 0..b {
                    dst[j * a + i] = src[i * b + j];
                }
            }
        }
        return out;
    }
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![T::zero(); data.len()];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            off += ix * in_strides[axes[i]];
        }
        *o = data[off];
        // Odometer increment over the output multi-index.
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}
