//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a scalar with respect to every node that depends on a trainable leaf.
//! The op set is the one the speech models need: fused linear, layer norm
//! and multi-head attention, 3-D convolution (1-D and 2-D convolutions are
//! expressed as degenerate 3-D ones), pooling, and the three training
//! losses (masked cosine, cross-entropy, CTC).

use crate::tensor::{gemm, MatMut, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Column window of a 2-D node used as an attention operand.
#[derive(Clone, Copy, Debug)]
pub struct ColSlice {
    pub var: Var,
    pub offset: usize,
}

impl From<Var> for ColSlice {
    fn from(var: Var) -> Self {
        ColSlice { var, offset: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { stride, pad }
    }

    pub fn out_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = input[i] + 2 * self.pad[i];
            assert!(
                padded >= kernel[i],
                "kernel {kernel:?} larger than padded input {input:?}"
            );
            out[i] = (padded - kernel[i]) / self.stride[i] + 1;
        }
        out
    }
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddConst(Var),
    Reshape(Var),
    Scale(Var, f64),
    WeightedSum(Vec<(Var, f64)>),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: ColSlice,
        k: ColSlice,
        v: ColSlice,
        dim: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    ChannelNorm {
        x: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    SpatialMean(Var),
    TemporalPool {
        x: Var,
        window: usize,
    },
    MaskedFillRows {
        x: Var,
        token: Var,
        mask: Vec<bool>,
    },
    ConcatCols(Var, Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CosineLossSum {
        pred: Var,
        target: Tensor,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Ctc {
        logits: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Unfolds `x: [C, D, H, W]` into `[C*kd*kh*kw, Do*Ho*Wo]`.
fn im2col(x: &Tensor, kernel: [usize; 3], geom: &ConvGeom, out: [usize; 3]) -> Vec<f64> {
    let s = x.shape();
    let (c_in, dims) = (s[0], [s[1], s[2], s[3]]);
    let positions = out[0] * out[1] * out[2];
    let rows = c_in * kernel[0] * kernel[1] * kernel[2];
    let mut cols = vec![0.0; rows * positions];
    let xd = x.data();
    let mut r = 0;
    for ci in 0..c_in {
        for a in 0..kernel[0] {
            for b in 0..kernel[1] {
                for c in 0..kernel[2] {
                    let row = &mut cols[r * positions..(r + 1) * positions];
                    let mut p = 0;
                    for od in 0..out[0] {
                        let id = (od * geom.stride[0] + a) as isize - geom.pad[0] as isize;
                        if id < 0 || id >= dims[0] as isize {
                            p += out[1] * out[2];
                            continue;
                        }
                        for oh in 0..out[1] {
                            let ih = (oh * geom.stride[1] + b) as isize - geom.pad[1] as isize;
                            if ih < 0 || ih >= dims[1] as isize {
                                p += out[2];
                                continue;
                            }
                            let base =
                                ((ci * dims[0] + id as usize) * dims[1] + ih as usize) * dims[2];
                            for ow in 0..out[2] {
                                let iw = (ow * geom.stride[2] + c) as isize - geom.pad[2] as isize;
                                if iw >= 0 && iw < dims[2] as isize {
                                    row[p] = xd[base + iw as usize];
                                }
                                p += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(
    cols: &[f64],
    in_shape: &[usize],
    kernel: [usize; 3],
    geom: &ConvGeom,
    out: [usize; 3],
) -> Vec<f64> {
    let (c_in, dims) = (in_shape[0], [in_shape[1], in_shape[2], in_shape[3]]);
    let positions = out[0] * out[1] * out[2];
    let mut dx = vec![0.0; c_in * dims[0] * dims[1] * dims[2]];
    let mut r = 0;
    for ci in 0..c_in {
        for a in 0..kernel[0] {
            for b in 0..kernel[1] {
                for c in 0..kernel[2] {
                    let row = &cols[r * positions..(r + 1) * positions];
                    let mut p = 0;
                    for od in 0..out[0] {
                        let id = (od * geom.stride[0] + a) as isize - geom.pad[0] as isize;
                        if id < 0 || id >= dims[0] as isize {
                            p += out[1] * out[2];
                            continue;
                        }
                        for oh in 0..out[1] {
                            let ih = (oh * geom.stride[1] + b) as isize - geom.pad[1] as isize;
                            if ih < 0 || ih >= dims[1] as isize {
                                p += out[2];
                                continue;
                            }
                            let base =
                                ((ci * dims[0] + id as usize) * dims[1] + ih as usize) * dims[2];
                            for ow in 0..out[2] {
                                let iw = (ow * geom.stride[2] + c) as isize - geom.pad[2] as isize;
                                if iw >= 0 && iw < dims[2] as isize {
                                    dx[base + iw as usize] += row[p];
                                }
                                p += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    dx
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Row-wise log-softmax of a `[T, V]` tensor.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let v = logits.dim(1);
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(v) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for x in row.iter_mut() {
            *x -= lse;
        }
    }
    Tensor::new(logits.shape(), out)
}

/// CTC negative log-likelihood and its gradient with respect to the logits.
///
/// `log_probs` is `[T, V]` (already log-softmaxed); blank is id 0.
/// Returns `None` when no alignment of `labels` fits in `T` frames.
pub fn ctc_forward_backward(log_probs: &Tensor, labels: &[usize]) -> Option<(f64, Tensor)> {
    const BLANK: usize = 0;
    let (t_len, vocab) = (log_probs.dim(0), log_probs.dim(1));
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(labels.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    if t_len == 0 || labels.len() + repeats > t_len {
        return None;
    }
    let lp = |t: usize, k: usize| log_probs.data()[t * vocab + k];
    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = log_sum_exp(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                a = log_sum_exp(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = log_sum_exp(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && ext[s] != BLANK && ext[s] != ext[s + 2] {
                b = log_sum_exp(b, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, ext[s]) };
        }
    }
    let mut log_lik = alpha[last + s_len - 1];
    if s_len > 1 {
        log_lik = log_sum_exp(log_lik, alpha[last + s_len - 2]);
    }
    if log_lik == ninf {
        return None;
    }
    // d(-log p)/d logit[t,k] = softmax[t,k] - occupancy[t,k] / p
    let mut grad = vec![0.0; t_len * vocab];
    for t in 0..t_len {
        let mut occ = vec![ninf; vocab];
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            occ[ext[s]] = log_sum_exp(occ[ext[s]], ab);
        }
        for k in 0..vocab {
            let prob = lp(t, k).exp();
            // alpha * beta double counts the emission at t.
            let post = (occ[k] - lp(t, k) - log_lik).exp();
            grad[t * vocab + k] = prob - if occ[k] == ninf { 0.0 } else { post };
        }
    }
    Some((-log_lik, Tensor::new(&[t_len, vocab], grad)))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `x [N, in] * w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, d_in) = (xv.dim(0), xv.dim(1));
        assert_eq!(wv.dim(0), d_in, "linear input width mismatch");
        let d_out = wv.dim(1);
        let mut out = vec![0.0; n * d_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            1.0,
            MatRef::rm(xv.data(), n, d_in),
            MatRef::rm(wv.data(), d_in, d_out),
            1.0,
            MatMut::rm(&mut out, n, d_out),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[n, d_out], out), Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a constant tensor (no gradient flows to `c`).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(c);
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `sum_i w_i * x_i` over equally shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut out = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, w) in terms {
            for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(out, Op::WeightedSum(terms.to_vec()), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Normalizes each row of `x [N, D]` and applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.dim(1);
        let n = xv.dim(0);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(&[n, d], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    fn operand(&self, s: ColSlice, dim: usize) -> MatRef<'_> {
        let v = self.value(s.var);
        assert!(s.offset + dim <= v.dim(1), "attention operand out of range");
        MatRef::rm(v.data(), v.dim(0), v.dim(1)).cols(s.offset, dim)
    }

    /// Scaled dot-product multi-head attention over column windows of width
    /// `dim`. With `causal`, query `i` only sees keys `j <= i`.
    pub fn attention(
        &mut self,
        q: impl Into<ColSlice>,
        k: impl Into<ColSlice>,
        v: impl Into<ColSlice>,
        dim: usize,
        heads: usize,
        causal: bool,
    ) -> Var {
        let (q, k, v) = (q.into(), k.into(), v.into());
        assert_eq!(dim % heads, 0);
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let tq = self.value(q.var).dim(0);
        let tk = self.value(k.var).dim(0);
        assert_eq!(self.value(v.var).dim(0), tk);
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * dim];
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(
                scale,
                self.operand(q, dim).cols(h * dh, dh),
                self.operand(k, dim).cols(h * dh, dh).t(),
                0.0,
                MatMut::rm(p, tq, tk),
            );
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                if causal {
                    for x in row.iter_mut().skip(i + 1) {
                        *x = f64::NEG_INFINITY;
                    }
                }
                softmax_row(row);
            }
            gemm(
                1.0,
                MatRef::rm(p, tq, tk),
                self.operand(v, dim).cols(h * dh, dh),
                0.0,
                MatMut::rm(&mut out, tq, dim).cols(h * dh, dh),
            );
        }
        let rg = self.rg(q.var) || self.rg(k.var) || self.rg(v.var);
        self.push(
            Tensor::new(&[tq, dim], out),
            Op::Attention {
                q,
                k,
                v,
                dim,
                heads,
                probs,
            },
            rg,
        )
    }

    /// 3-D convolution of `x [C_in, D, H, W]` with `w [C_out, C_in, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.ndim(), 4, "conv3d expects [C, D, H, W]");
        assert_eq!(wv.dim(1), xv.dim(0), "conv3d channel mismatch");
        let kernel = [wv.dim(2), wv.dim(3), wv.dim(4)];
        let out_dims = geom.out_dims([xv.dim(1), xv.dim(2), xv.dim(3)], kernel);
        let c_out = wv.dim(0);
        let k = wv.len() / c_out;
        let positions = out_dims.iter().product::<usize>();
        let cols = im2col(xv, kernel, &geom, out_dims);
        let mut out = vec![0.0; c_out * positions];
        if let Some(b) = b {
            for (row, &bias) in out.chunks_mut(positions).zip(self.value(b).data()) {
                row.fill(bias);
            }
        }
        gemm(
            1.0,
            MatRef::rm(wv.data(), c_out, k),
            MatRef::rm(&cols, k, positions),
            1.0,
            MatMut::rm(&mut out, c_out, positions),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(&[c_out, out_dims[0], out_dims[1], out_dims[2]], out),
            Op::Conv3d { x, w, b, geom },
            rg,
        )
    }

    /// Per-channel `x * scale[c] + shift[c]` for `x [C, ...]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.value(x);
        let c = xv.dim(0);
        let inner = xv.len() / c;
        let s = self.value(scale).data();
        let b = self.value(shift).data();
        let mut out = xv.data().to_vec();
        for (ch, chunk) in out.chunks_mut(inner).enumerate() {
            for v in chunk.iter_mut() {
                *v = *v * s[ch] + b[ch];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(
            Tensor::new(&shape, out),
            Op::ChannelAffine { x, scale, shift },
            rg,
        )
    }

    /// Standardizes each channel of `x [C, ...]` over all its positions.
    pub fn channel_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.dim(0);
        let inner = xv.len() / c;
        let mut xhat = xv.data().to_vec();
        let mut rstd = vec![0.0; c];
        for (ch, chunk) in xhat.chunks_mut(inner).enumerate() {
            let mean = chunk.iter().sum::<f64>() / inner as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / inner as f64;
            rstd[ch] = 1.0 / (var + eps).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * rstd[ch];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        let out = Tensor::new(&shape, xhat.clone());
        self.push(out, Op::ChannelNorm { x, xhat, rstd }, rg)
    }

    /// Max pooling of `x [C, D, H, W]`; padded cells never win.
    pub fn max_pool3d(&mut self, x: Var, kernel: [usize; 3], geom: ConvGeom) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (c, dims) = (s[0], [s[1], s[2], s[3]]);
        let od = geom.out_dims(dims, kernel);
        let mut out = Vec::with_capacity(c * od.iter().product::<usize>());
        let mut argmax = Vec::with_capacity(out.capacity());
        let xd = xv.data();
        for ch in 0..c {
            for d in 0..od[0] {
                for h in 0..od[1] {
                    for w in 0..od[2] {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = usize::MAX;
                        for a in 0..kernel[0] {
                            let id = (d * geom.stride[0] + a) as isize - geom.pad[0] as isize;
                            if id < 0 || id >= dims[0] as isize {
                                continue;
                            }
                            for b in 0..kernel[1] {
                                let ih = (h * geom.stride[1] + b) as isize - geom.pad[1] as isize;
                                if ih < 0 || ih >= dims[1] as isize {
                                    continue;
                                }
                                for cc in 0..kernel[2] {
                                    let iw =
                                        (w * geom.stride[2] + cc) as isize - geom.pad[2] as isize;
                                    if iw < 0 || iw >= dims[2] as isize {
                                        continue;
                                    }
                                    let idx = ((ch * dims[0] + id as usize) * dims[1]
                                        + ih as usize)
                                        * dims[2]
                                        + iw as usize;
                                    if xd[idx] > best {
                                        best = xd[idx];
                                        best_i = idx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(&[c, od[0], od[1], od[2]], out),
            Op::MaxPool3d { x, argmax },
            rg,
        )
    }

    /// `[C, T, H, W]` -> `[T, C]` by averaging over `H` and `W`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (c, t, hw) = (s[0], s[1], s[2] * s[3]);
        let mut out = vec![0.0; t * c];
        for ch in 0..c {
            for ti in 0..t {
                let start = (ch * t + ti) * hw;
                out[ti * c + ch] = xv.data()[start..start + hw].iter().sum::<f64>() / hw as f64;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[t, c], out), Op::SpatialMean(x), rg)
    }

    /// `[C, 1, 1, L]` -> `[L / window, C]` by averaging non-overlapping windows.
    pub fn temporal_pool(&mut self, x: Var, window: usize) -> Var {
        let xv = self.value(x);
        let c = xv.dim(0);
        let l = xv.len() / c;
        assert_eq!(
            l % window,
            0,
            "temporal_pool length not divisible by window"
        );
        let t = l / window;
        let mut out = vec![0.0; t * c];
        for ch in 0..c {
            let row = &xv.data()[ch * l..(ch + 1) * l];
            for ti in 0..t {
                out[ti * c + ch] =
                    row[ti * window..(ti + 1) * window].iter().sum::<f64>() / window as f64;
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(&[t, c], out),
            Op::TemporalPool { x, window },
            rg,
        )
    }

    /// Rows where `mask` is set become `token + fill[t]`; others copy `x`.
    pub fn masked_fill_rows(&mut self, x: Var, token: Var, mask: &[bool], fill: &Tensor) -> Var {
        let xv = self.value(x);
        let (t, d) = (xv.dim(0), xv.dim(1));
        assert_eq!(mask.len(), t, "mask length mismatch");
        let tok = self.value(token).data();
        let mut out = xv.data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for j in 0..d {
                    out[r * d + j] = tok[j] + fill.data()[r * d + j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(token);
        self.push(
            Tensor::new(&[t, d], out),
            Op::MaskedFillRows {
                x,
                token,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.dim(0), bv.dim(0), "concat_cols row mismatch");
        let (t, da, db) = (av.dim(0), av.dim(1), bv.dim(1));
        let mut out = Vec::with_capacity(t * (da + db));
        for r in 0..t {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[t, da + db], out), Op::ConcatCols(a, b), rg)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.dim(1);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(&[ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// `sum over rows r of (1 - cos(pred[r], target[r]))`; `target` is a
    /// constant, so no gradient reaches whatever produced it.
    pub fn cosine_loss_sum(&mut self, pred: Var, target: &Tensor, rows: &[usize]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "cosine loss shape mismatch");
        let mut total = 0.0;
        for &r in rows {
            total += 1.0 - cosine(pv.row(r), target.row(r));
        }
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(total),
            Op::CosineLossSum {
                pred,
                target: target.clone(),
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Mean token cross-entropy of `logits [L, V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (l, v) = (lv.dim(0), lv.dim(1));
        assert_eq!(targets.len(), l);
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            softmax_row(row);
            total -= row[targets[r]].max(f64::MIN_POSITIVE).ln();
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total / l as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// CTC negative log-likelihood of `labels` under `logits [T, V]`
    /// (blank = 0). `None` if the labels cannot be aligned in `T` frames.
    pub fn ctc_loss(&mut self, logits: Var, labels: &[usize]) -> Option<Var> {
        let lp = log_softmax_rows(self.value(logits));
        let (nll, grad) = ctc_forward_backward(&lp, labels)?;
        let rg = self.rg(logits);
        Some(self.push(Tensor::scalar(nll), Op::Ctc { logits, grad }, rg))
    }

    /// Reverse pass from scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        let root_val = self.value(root);
        grads[root.0] = Some(Tensor::full(root_val.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap());
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, d_in, d_out) = (xv.dim(0), xv.dim(1), wv.dim(1));
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * d_in];
                    gemm(
                        1.0,
                        MatRef::rm(dy.data(), n, d_out),
                        MatRef::rm(wv.data(), d_in, d_out).t(),
                        0.0,
                        MatMut::rm(&mut dx, n, d_in),
                    );
                    self.accumulate(grads, *x, Tensor::new(&[n, d_in], dx));
                }
                self.accumulate_with(grads, *w, |g| {
                    gemm(
                        1.0,
                        MatRef::rm(xv.data(), n, d_in).t(),
                        MatRef::rm(dy.data(), n, d_out),
                        1.0,
                        MatMut::rm(g.data_mut(), d_in, d_out),
                    )
                });
                if let Some(b) = b {
                    self.accumulate_with(grads, *b, |g| {
                        for row in dy.data().chunks(d_out) {
                            for (gj, r) in g.data_mut().iter_mut().zip(row) {
                                *gj += r;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::AddConst(a) => self.accumulate(grads, *a, dy.clone()),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, dy.clone().reshaped(&shape));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, dy.map(|g| g * s)),
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, dy.map(|g| g * w));
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let mut g = dy.clone();
                for (gi, &x) in g.data_mut().iter_mut().zip(av.data()) {
                    if x <= 0.0 {
                        *gi = 0.0;
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let mut g = dy.clone();
                for (gi, &x) in g.data_mut().iter_mut().zip(av.data()) {
                    *gi *= gelu_grad(x);
                }
                self.accumulate(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = dy.dim(1);
                let n = dy.dim(0);
                let gv = self.value(*gamma).data();
                self.accumulate_with(grads, *gamma, |g| {
                    for (k, (&dyi, &h)) in dy.data().iter().zip(xhat).enumerate() {
                        g.data_mut()[k % d] += dyi * h;
                    }
                });
                self.accumulate_with(grads, *beta, |g| {
                    for (k, &dyi) in dy.data().iter().enumerate() {
                        g.data_mut()[k % d] += dyi;
                    }
                });
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        let dyr = dy.row(r);
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dhh = 0.0;
                        for j in 0..d {
                            let dh = dyr[j] * gv[j];
                            mean_dh += dh;
                            mean_dhh += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dhh /= d as f64;
                        for j in 0..d {
                            let dh = dyr[j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(&[n, d], dx));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                dim,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *dim, *heads, probs, dy, grads),
            Op::Conv3d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let kernel = [wv.dim(2), wv.dim(3), wv.dim(4)];
                let out_dims = [dy.dim(1), dy.dim(2), dy.dim(3)];
                let c_out = wv.dim(0);
                let k = wv.len() / c_out;
                let positions: usize = out_dims.iter().product();
                if self.rg(*w) {
                    let cols = im2col(xv, kernel, geom, out_dims);
                    self.accumulate_with(grads, *w, |g| {
                        gemm(
                            1.0,
                            MatRef::rm(dy.data(), c_out, positions),
                            MatRef::rm(&cols, k, positions).t(),
                            1.0,
                            MatMut::rm(g.data_mut(), c_out, k),
                        )
                    });
                }
                if let Some(b) = b {
                    self.accumulate_with(grads, *b, |g| {
                        for (gc, row) in g.data_mut().iter_mut().zip(dy.data().chunks(positions)) {
                            *gc += row.iter().sum::<f64>();
                        }
                    });
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; k * positions];
                    gemm(
                        1.0,
                        MatRef::rm(wv.data(), c_out, k).t(),
                        MatRef::rm(dy.data(), c_out, positions),
                        0.0,
                        MatMut::rm(&mut dcols, k, positions),
                    );
                    let dx = col2im(&dcols, xv.shape(), kernel, geom, out_dims);
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx));
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xv = self.value(*x);
                let c = xv.dim(0);
                let inner = xv.len() / c;
                let s = self.value(*scale).data();
                self.accumulate_with(grads, *scale, |g| {
                    for ch in 0..c {
                        let range = ch * inner..(ch + 1) * inner;
                        g.data_mut()[ch] += dy.data()[range.clone()]
                            .iter()
                            .zip(&xv.data()[range])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                });
                self.accumulate_with(grads, *shift, |g| {
                    for ch in 0..c {
                        g.data_mut()[ch] +=
                            dy.data()[ch * inner..(ch + 1) * inner].iter().sum::<f64>();
                    }
                });
                if self.rg(*x) {
                    let mut dx = dy.clone();
                    for (ch, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                        for v in chunk.iter_mut() {
                            *v *= s[ch];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ChannelNorm { x, xhat, rstd } => {
                let c = rstd.len();
                let inner = xhat.len() / c;
                let mut dx = vec![0.0; xhat.len()];
                for ch in 0..c {
                    let r = ch * inner..(ch + 1) * inner;
                    let (dyc, hc) = (&dy.data()[r.clone()], &xhat[r.clone()]);
                    let mean_dy = dyc.iter().sum::<f64>() / inner as f64;
                    let mean_dyh =
                        dyc.iter().zip(hc).map(|(a, b)| a * b).sum::<f64>() / inner as f64;
                    for ((d, &g), &h) in dx[r].iter_mut().zip(dyc).zip(hc) {
                        *d = rstd[ch] * (g - mean_dy - h * mean_dyh);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(dy.shape(), dx));
            }
            Op::MaxPool3d { x, argmax } => {
                self.accumulate_with(grads, *x, |g| {
                    for (&idx, &d) in argmax.iter().zip(dy.data()) {
                        if idx != usize::MAX {
                            g.data_mut()[idx] += d;
                        }
                    }
                });
            }
            Op::SpatialMean(x) => {
                let s = self.value(*x).shape().to_vec();
                let (c, t, hw) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![0.0; c * t * hw];
                for ch in 0..c {
                    for ti in 0..t {
                        let g = dy.data()[ti * c + ch] / hw as f64;
                        dx[(ch * t + ti) * hw..(ch * t + ti + 1) * hw].fill(g);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&s, dx));
            }
            Op::TemporalPool { x, window } => {
                let s = self.value(*x).shape().to_vec();
                let c = s[0];
                let l = s.iter().product::<usize>() / c;
                let t = l / window;
                let mut dx = vec![0.0; c * l];
                for ch in 0..c {
                    for ti in 0..t {
                        let g = dy.data()[ti * c + ch] / *window as f64;
                        dx[ch * l + ti * window..ch * l + (ti + 1) * window].fill(g);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&s, dx));
            }
            Op::MaskedFillRows { x, token, mask } => {
                let d = dy.dim(1);
                if self.rg(*x) {
                    let mut dx = dy.clone();
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            dx.data_mut()[r * d..(r + 1) * d].fill(0.0);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate_with(grads, *token, |g| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for (gj, dj) in g.data_mut().iter_mut().zip(dy.row(r)) {
                                *gj += dj;
                            }
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let da = self.value(*a).dim(1);
                let db = self.value(*b).dim(1);
                let t = dy.dim(0);
                if self.rg(*a) {
                    let mut ga = Vec::with_capacity(t * da);
                    for r in 0..t {
                        ga.extend_from_slice(&dy.row(r)[..da]);
                    }
                    self.accumulate(grads, *a, Tensor::new(&[t, da], ga));
                }
                if self.rg(*b) {
                    let mut gb = Vec::with_capacity(t * db);
                    for r in 0..t {
                        gb.extend_from_slice(&dy.row(r)[da..]);
                    }
                    self.accumulate(grads, *b, Tensor::new(&[t, db], gb));
                }
            }
            Op::Embedding { table, ids } => {
                let d = dy.dim(1);
                self.accumulate_with(grads, *table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (gj, dj) in g.data_mut()[id * d..(id + 1) * d].iter_mut().zip(dy.row(r))
                        {
                            *gj += dj;
                        }
                    }
                });
            }
            Op::CosineLossSum { pred, target, rows } => {
                let pv = self.value(*pred);
                let scale = dy.item();
                self.accumulate_with(grads, *pred, |g| {
                    let d = pv.dim(1);
                    for &r in rows {
                        let gr = cosine_grad(pv.row(r), target.row(r));
                        for (gj, v) in g.data_mut()[r * d..(r + 1) * d].iter_mut().zip(gr) {
                            *gj -= scale * v;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).dim(1);
                let l = targets.len();
                let scale = dy.item() / l as f64;
                let mut g = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * v + t] -= 1.0;
                }
                for x in g.iter_mut() {
                    *x *= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(&[l, v], g));
            }
            Op::Ctc { logits, grad } => {
                let s = dy.item();
                self.accumulate(grads, *logits, grad.map(|g| g * s));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: ColSlice,
        k: ColSlice,
        v: ColSlice,
        dim: usize,
        heads: usize,
        probs: &[f64],
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let tq = dy.dim(0);
        let tk = self.value(k.var).dim(0);
        let mut dq = vec![0.0; tq * dim];
        let mut dk = vec![0.0; tk * dim];
        let mut dv = vec![0.0; tk * dim];
        let mut dp = vec![0.0; tq * tk];
        for h in 0..heads {
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            let dout_h = MatRef::rm(dy.data(), tq, dim).cols(h * dh, dh);
            // dV = P^T dO
            gemm(
                1.0,
                MatRef::rm(p, tq, tk).t(),
                dout_h,
                0.0,
                MatMut::rm(&mut dv, tk, dim).cols(h * dh, dh),
            );
            // dP = dO V^T
            gemm(
                1.0,
                dout_h,
                self.operand(v, dim).cols(h * dh, dh).t(),
                0.0,
                MatMut::rm(&mut dp, tq, tk),
            );
            // dS = P * (dP - rowsum(dP * P))
            for i in 0..tq {
                let pr = &p[i * tk..(i + 1) * tk];
                let dr = &mut dp[i * tk..(i + 1) * tk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (d, &pp) in dr.iter_mut().zip(pr) {
                    *d = pp * (*d - dot);
                }
            }
            gemm(
                scale,
                MatRef::rm(&dp, tq, tk),
                self.operand(k, dim).cols(h * dh, dh),
                0.0,
                MatMut::rm(&mut dq, tq, dim).cols(h * dh, dh),
            );
            gemm(
                scale,
                MatRef::rm(&dp, tq, tk).t(),
                self.operand(q, dim).cols(h * dh, dh),
                0.0,
                MatMut::rm(&mut dk, tk, dim).cols(h * dh, dh),
            );
        }
        for (slice, g, rows) in [(q, dq, tq), (k, dk, tk), (v, dv, tk)] {
            self.accumulate_with(grads, slice.var, |acc| {
                let width = acc.dim(1);
                for r in 0..rows {
                    let dst = &mut acc.data_mut()
                        [r * width + slice.offset..r * width + slice.offset + dim];
                    for (a, b) in dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                        *a += b;
                    }
                }
            });
        }
    }
}

const NORM_FLOOR: f64 = 1e-8;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    dot / (na * nb)
}

/// d cos(a, b) / d a.
fn cosine_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let na_raw = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let na = na_raw.max(NORM_FLOOR);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    let cos = cosine(a, b);
    let clamped = na_raw < NORM_FLOOR;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if clamped {
                y / (na * nb)
            } else {
                y / (na * nb) - cos * x / (na * na)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks analytic gradients of every trainable leaf against central
    /// differences of the scalar built by `build`.
    fn check_grads(leaves: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&leaves);
        let grads = g.backward(out);
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads
                .get(vars[li])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(leaf.shape()));
            for idx in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[idx] += eps;
                let mut minus = leaves.clone();
                minus[li].data_mut()[idx] -= eps;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * eps);
                let a = analytic.data()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    err < 1e-5,
                    "leaf {li} idx {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    /// Reduces any tensor to a scalar with fixed random weights.
    fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
        let n = g.value(x).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(Tensor::new(
            &[n, 1],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ));
        let flat = g.reshape(x, &[1, n]);
        g.linear(flat, w, None)
    }

    #[test]
    fn linear_layer_norm_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5]),
        ];
        check_grads(leaves, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            let y = g.layer_norm(y, v[3], v[4], 1e-5);
            let y = g.gelu(y);
            probe(g, y, 7)
        });
    }

    #[test]
    fn attention_gradients_self_and_cross() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![
            rand_tensor(&mut rng, &[4, 12]),
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[5, 8]),
        ];
        check_grads(leaves, |g, v| {
            let s = g.attention(
                ColSlice {
                    var: v[0],
                    offset: 0,
                },
                ColSlice {
                    var: v[0],
                    offset: 4,
                },
                ColSlice {
                    var: v[0],
                    offset: 8,
                },
                4,
                2,
                true,
            );
            let c = g.attention(
                v[1],
                ColSlice {
                    var: v[2],
                    offset: 0,
                },
                ColSlice {
                    var: v[2],
                    offset: 4,
                },
                4,
                2,
                false,
            );
            let a = probe(g, s, 3);
            let b = probe(g, c, 4);
            g.weighted_sum(&[(a, 1.0), (b, 0.5)])
        });
    }

    #[test]
    fn conv_pool_affine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            rand_tensor(&mut rng, &[2, 3, 6, 5]),
            rand_tensor(&mut rng, &[3, 2, 3, 3, 3]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[3]),
        ];
        check_grads(leaves, |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), ConvGeom::new([1, 2, 1], [1, 1, 1]));
            let y = g.channel_affine(y, v[3], v[4]);
            let y = g.relu(y);
            let p = g.max_pool3d(y, [1, 2, 2], ConvGeom::new([1, 1, 1], [0, 1, 0]));
            let m = g.spatial_mean(p);
            probe(g, m, 9)
        });
    }

    #[test]
    fn channel_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![
            rand_tensor(&mut rng, &[3, 2, 4, 3]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[3]),
        ];
        check_grads(leaves, |g, v| {
            let y = g.channel_norm(v[0], 1e-5);
            let y = g.channel_affine(y, v[1], v[2]);
            let y = g.gelu(y);
            probe(g, y, 10)
        });
    }

    #[test]
    fn temporal_pool_concat_embedding_fill_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![
            rand_tensor(&mut rng, &[3, 1, 1, 8]),
            rand_tensor(&mut rng, &[4, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        check_grads(leaves, |g, v| {
            let t = g.temporal_pool(v[0], 2); // [4, 3]
            let fill = Tensor::full(&[4, 3], 0.25);
            let m = g.masked_fill_rows(t, v[2], &[false, true, true, false], &fill);
            let e = g.embedding(v[1], &[0, 3, 3, 1]);
            let c = g.concat_cols(m, e);
            probe(g, c, 5)
        });
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = rand_tensor(&mut rng, &[4, 3]);
        let leaves = vec![
            rand_tensor(&mut rng, &[4, 3]),
            rand_tensor(&mut rng, &[5, 4]),
        ];
        check_grads(leaves, move |g, v| {
            let c = g.cosine_loss_sum(v[0], &target, &[0, 2, 3]);
            let ce = g.cross_entropy(v[1], &[1, 0, 3, 3, 2]);
            let ctc = g.ctc_loss(v[1], &[1, 1, 2]).unwrap();
            g.weighted_sum(&[(c, 1.0), (ce, 0.7), (ctc, 0.3)])
        });
    }

    #[test]
    fn targets_are_constants() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(&[1, 2], vec![1.0, 0.0]), true);
        let loss = g.cosine_loss_sum(p, &Tensor::new(&[1, 2], vec![0.0, 1.0]), &[0]);
        assert!((g.value(loss).item() - 1.0).abs() < 1e-12);
        let grads = g.backward(loss);
        assert!(grads.get(p).is_some());
    }

    #[test]
    fn ctc_infeasible_is_none() {
        let lp = log_softmax_rows(&Tensor::zeros(&[2, 3]));
        assert!(ctc_forward_backward(&lp, &[1, 1]).is_none());
        assert!(ctc_forward_backward(&lp, &[1, 2, 1]).is_none());
        assert!(ctc_forward_backward(&lp, &[1, 2]).is_some());
    }
}
