//! Reverse-mode automatic differentiation on an operation tape.
//!
//! Forward evaluation is eager: each builder method computes values
//! immediately and records the operation. `backward` walks the tape once in
//! reverse creation order; a tape is single-use and a second backward call is
//! an error. Gradients accumulate by summation, so sharing a `Var` across
//! several consumers is safe.

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dSpec, Conv3dSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive attention-mask constant for disallowed positions.
pub const MASK_VALUE: f64 = -1e30;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    MulScalarVar {
        x: Var,
        s: Var,
    },
    Transpose2 {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    SoftmaxLast {
        x: Var,
    },
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Gelu {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CeLabelSmoothed {
        logits: Var,
        targets: Vec<u32>,
        pad: u32,
        eps: S,
        probs: Vec<S>,
        n_active: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: Conv2dSpec,
        cols: Vec<S>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        spec: Conv3dSpec,
        cols: Vec<S>,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Arena of eagerly evaluated operations supporting one reverse sweep.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant input; no gradient will be computed for it.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable input (parameters, probe points).
    pub fn leaf_grad(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of a node after `backward`, if one was accumulated.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, ka, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.requires(x);
        Ok(self.push(out, Op::Scale { x, c }, rg))
    }

    /// Multiplies a tensor by a single-element variable (e.g. a head gain).
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item().map_err(|_| {
            Error::Shape(format!(
                "mul_scalar_var expects a single-element scalar, got {:?}",
                self.value(s).shape()
            ))
        })?;
        let out = self.value(x).map(|v| v * sv);
        let rg = self.requires(x) || self.requires(s);
        Ok(self.push(out, Op::MulScalarVar { x, s }, rg))
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose2 { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.requires(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Softmax over the last axis with max subtraction.
    ///
    /// Rejects non-finite inputs other than the [`MASK_VALUE`] convention
    /// (any finite value is accepted; NaN and infinities are not).
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().ok_or_else(|| {
            Error::Shape("softmax_last on rank-0 tensor".to_string())
        })?;
        let src = self.value(x).data();
        for (i, v) in src.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Validity(format!(
                    "softmax input has non-finite value {v:?} at flat index {i}"
                )));
            }
        }
        let rows = src.len() / d;
        let mut out = vec![S::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[r * d + j] = e;
                sum = sum + e;
            }
            let inv = S::one() / sum;
            for j in 0..d {
                out[r * d + j] = out[r * d + j] * inv;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxLast { x }, rg))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: S) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on rank-0 tensor".to_string()))?;
        if self.value(scale).shape() != [d] || self.value(shift).shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm scale/shift must be [{}], got {:?} and {:?}",
                d,
                self.value(scale).shape(),
                self.value(shift).shape()
            )));
        }
        let src = self.value(x).data();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let rows = src.len() / d;
        let inv_d = S::one() / S::from_f64_lossy(d as f64);
        let mut out = vec![S::zero(); src.len()];
        let mut xhat = vec![S::zero(); src.len()];
        let mut inv_std = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().cloned().sum::<S>() * inv_d;
            let mut var = S::zero();
            for &v in row {
                let dv = v - mean;
                var = var + dv * dv;
            }
            var = var * inv_d;
            let istd = S::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * sc[j] + sh[j];
            }
        }
        let rg = self.requires(x) || self.requires(scale) || self.requires(shift);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            let xf = v.to_f64_lossy();
            let u = GELU_C * (xf + GELU_A * xf * xf * xf);
            S::from_f64_lossy(0.5 * xf * (1.0 + u.tanh()))
        });
        let rg = self.requires(x);
        Ok(self.push(out, Op::Gelu { x }, rg))
    }

    /// Gathers rows of `table` at `ids`; output is [ids.len(), width].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, width) = self.value(table).dims2()?;
        for (pos, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::Index(format!(
                    "embedding id {id} at position {pos} exceeds table rows {rows}"
                )));
            }
        }
        let src = self.value(table).data();
        let mut out = vec![S::zero(); ids.len() * width];
        for (pos, &id) in ids.iter().enumerate() {
            out[pos * width..(pos + 1) * width]
                .copy_from_slice(&src[id * width..(id + 1) * width]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), width], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Label-smoothed cross-entropy averaged over non-PAD positions.
    ///
    /// The smoothed target is `(1 - eps) * onehot + eps / V`. Returns the
    /// scalar loss and the count of positions that entered the mean.
    pub fn ce_label_smoothed(
        &mut self,
        logits: Var,
        targets: &[u32],
        pad: u32,
        eps: S,
    ) -> Result<(Var, usize)> {
        let (t, v) = self.value(logits).dims2()?;
        if targets.len() != t {
            return Err(Error::Shape(format!(
                "ce targets length {} does not match {} logit rows",
                targets.len(),
                t
            )));
        }
        for (pos, &tid) in targets.iter().enumerate() {
            if tid as usize >= v {
                return Err(Error::Index(format!(
                    "ce target id {tid} at position {pos} exceeds vocab size {v}"
                )));
            }
        }
        let n_active = targets.iter().filter(|&&tid| tid != pad).count();
        if n_active == 0 {
            return Err(Error::Contract(
                "ce_label_smoothed: every target position is PAD".to_string(),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![S::zero(); t * v];
        let inv_v = S::one() / S::from_f64_lossy(v as f64);
        let mut total = S::zero();
        for (r, &tid) in targets.iter().enumerate() {
            if tid == pad {
                continue;
            }
            let row = &src[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for &x in row {
                sum = sum + (x - m).exp();
            }
            let lse = m + sum.ln();
            let row_sum = row.iter().cloned().sum::<S>();
            let loss = lse
                - (S::one() - eps) * row[tid as usize]
                - eps * inv_v * row_sum;
            total = total + loss;
            for (j, &x) in row.iter().enumerate() {
                probs[r * v + j] = (x - lse).exp();
            }
        }
        let mean = total / S::from_f64_lossy(n_active as f64);
        let rg = self.requires(logits);
        let out = self.push(
            Tensor::scalar(mean),
            Op::CeLabelSmoothed {
                logits,
                targets: targets.to_vec(),
                pad,
                eps,
                probs,
                n_active,
            },
            rg,
        );
        Ok((out, n_active))
    }

    /// 2D convolution via im2col. `x` is [cin, h, w], `w` is
    /// [cout, cin, kh, kw], `b` is [cout]; output is [cout, oh, ow].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (cin, h, wid) = match xs[..] {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d input must be [cin, h, w], got {xs:?}"
                )))
            }
        };
        let (cout, wcin, kh, kw) = match ws[..] {
            [co, ci, kh, kw] => (co, ci, kh, kw),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d weight must be [cout, cin, kh, kw], got {ws:?}"
                )))
            }
        };
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {xs:?} vs weight {ws:?}"
            )));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d bias must be [{}], got {:?}",
                cout,
                self.value(b).shape()
            )));
        }
        let spec = Conv2dSpec {
            cin,
            h,
            w: wid,
            cout,
            kh,
            kw,
            stride,
            padding,
        };
        let (oh, ow) = (spec.out_h(), spec.out_w());
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!(
                "conv2d produces empty output for input {xs:?} kernel {ws:?} stride {stride}"
            )));
        }
        let cols = kernels::im2col(self.value(x).data(), &spec);
        let n = oh * ow;
        let k = cin * kh * kw;
        let mut out = vec![S::zero(); cout * n];
        kernels::gemm_nn(self.value(w).data(), &cols, &mut out, cout, k, n);
        let bias = self.value(b).data();
        for co in 0..cout {
            let bv = bias[co];
            for p in &mut out[co * n..(co + 1) * n] {
                *p = *p + bv;
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            Tensor::new(vec![cout, oh, ow], out)?,
            Op::Conv2d { x, w, b, spec, cols },
            rg,
        ))
    }

    /// 3D convolution via vol2col. `x` is [cin, frames, h, w], `w` is
    /// [cout, cin, kt, kh, kw]; output is [cout, ot, oh, ow].
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride_t: usize,
        stride_s: usize,
        pad_t: usize,
        pad_s: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (cin, frames, h, wid) = match xs[..] {
            [c, f, h, w] => (c, f, h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "conv3d input must be [cin, frames, h, w], got {xs:?}"
                )))
            }
        };
        let (cout, wcin, kt, kh, kw) = match ws[..] {
            [co, ci, kt, kh, kw] => (co, ci, kt, kh, kw),
            _ => {
                return Err(Error::Shape(format!(
                    "conv3d weight must be [cout, cin, kt, kh, kw], got {ws:?}"
                )))
            }
        };
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv3d channel mismatch: input {xs:?} vs weight {ws:?}"
            )));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv3d bias must be [{}], got {:?}",
                cout,
                self.value(b).shape()
            )));
        }
        let spec = Conv3dSpec {
            cin,
            frames,
            h,
            w: wid,
            cout,
            kt,
            kh,
            kw,
            stride_t,
            stride_s,
            pad_t,
            pad_s,
        };
        let (ot, oh, ow) = (spec.out_t(), spec.out_h(), spec.out_w());
        if ot == 0 || oh == 0 || ow == 0 {
            return Err(Error::Shape(format!(
                "conv3d produces empty output for input {xs:?} kernel {ws:?}"
            )));
        }
        let cols = kernels::vol2col(self.value(x).data(), &spec);
        let n = ot * oh * ow;
        let k = cin * kt * kh * kw;
        let mut out = vec![S::zero(); cout * n];
        kernels::gemm_nn(self.value(w).data(), &cols, &mut out, cout, k, n);
        let bias = self.value(b).data();
        for co in 0..cout {
            let bv = bias[co];
            for p in &mut out[co * n..(co + 1) * n] {
                *p = *p + bv;
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            Tensor::new(vec![cout, ot, oh, ow], out)?,
            Op::Conv3d { x, w, b, spec, cols },
            rg,
        ))
    }

    /// Adds a bias vector to every row of a rank-2 tensor.
    ///
    /// This is the only broadcasting form the tape supports.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(b).shape() != [c] {
            return Err(Error::Shape(format!(
                "add_bias expects bias [{}] for input {:?}, got {:?}",
                c,
                self.value(x).shape(),
                self.value(b).shape()
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = out[i * c + j] + bias[j];
            }
        }
        let rg = self.requires(x) || self.requires(b);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::AddBias { x, b }, rg))
    }

    /// Copies columns [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(Error::Index(format!(
                "slice_cols [{start}, {}) exceeds {c} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![S::zero(); r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![r, len], out)?,
            Op::SliceCols { x, start, len },
            rg,
        ))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".to_string()));
        }
        let (r, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {:?} vs {:?}",
                    self.value(parts[0]).shape(),
                    self.value(p).shape()
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![S::zero(); r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".to_string()));
        }
        let (_, c) = self.value(parts[0]).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(Error::Shape(format!(
                    "concat_rows column mismatch: {:?} vs {:?}",
                    self.value(parts[0]).shape(),
                    self.value(p).shape()
                )));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().cloned().sum::<S>();
        let rg = self.requires(x);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { x }, rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::Contract("mean_all of empty tensor".to_string()));
        }
        let s = self.value(x).data().iter().cloned().sum::<S>()
            / S::from_f64_lossy(n as f64);
        let rg = self.requires(x);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll { x }, rg))
    }

    /// Reverse sweep from a scalar loss. Single use per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward called twice on the same tape".to_string(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn ensure_grad(grads: &mut [Option<Vec<S>>], j: usize, len: usize) -> &mut [S] {
        grads[j].get_or_insert_with(|| vec![S::zero(); len]).as_mut_slice()
    }

    fn backprop_node(&mut self, i: usize, g: &[S]) {
        // Split borrows: node values/ops are read-only here, grads are written.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let numel_of = |v: Var| nodes[v.0].value.numel();
        let rq = |v: Var| nodes[v.0].requires_grad;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.shape()[1];
                if rq(*a) {
                    let ga = Self::ensure_grad(grads, a.0, m * k);
                    kernels::gemm_nt(g, nodes[b.0].value.data(), ga, m, n, k);
                }
                if rq(*b) {
                    let gb = Self::ensure_grad(grads, b.0, k * n);
                    kernels::gemm_tn(nodes[a.0].value.data(), g, gb, m, k, n);
                }
            }
            Op::Add { a, b } => {
                for &v in [a, b].into_iter() {
                    if rq(v) {
                        let gv = Self::ensure_grad(grads, v.0, g.len());
                        for (dst, &src) in gv.iter_mut().zip(g) {
                            *dst = *dst + src;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if rq(*a) {
                    let bd = nodes[b.0].value.data();
                    let ga = Self::ensure_grad(grads, a.0, g.len());
                    for ((dst, &src), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *dst = *dst + src * bv;
                    }
                }
                if rq(*b) {
                    let ad = nodes[a.0].value.data();
                    let gb = Self::ensure_grad(grads, b.0, g.len());
                    for ((dst, &src), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *dst = *dst + src * av;
                    }
                }
            }
            Op::Scale { x, c } => {
                if rq(*x) {
                    let c = *c;
                    let gx = Self::ensure_grad(grads, x.0, g.len());
                    for (dst, &src) in gx.iter_mut().zip(g) {
                        *dst = *dst + src * c;
                    }
                }
            }
            Op::MulScalarVar { x, s } => {
                let sv = nodes[s.0].value.data()[0];
                if rq(*x) {
                    let gx = Self::ensure_grad(grads, x.0, g.len());
                    for (dst, &src) in gx.iter_mut().zip(g) {
                        *dst = *dst + src * sv;
                    }
                }
                if rq(*s) {
                    let xd = nodes[x.0].value.data();
                    let mut acc = S::zero();
                    for (&src, &xv) in g.iter().zip(xd) {
                        acc = acc + src * xv;
                    }
                    let gs = Self::ensure_grad(grads, s.0, 1);
                    gs[0] = gs[0] + acc;
                }
            }
            Op::Transpose2 { x } => {
                if rq(*x) {
                    let (r, c) = nodes[x.0].value.dims2().unwrap();
                    let gx = Self::ensure_grad(grads, x.0, r * c);
                    // g has shape [c, r]
                    for j in 0..c {
                        for index in 0..r {
                            gx[index * c + j] = gx[index * c + j] + g[j * r + index];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if rq(*x) {
                    let gx = Self::ensure_grad(grads, x.0, g.len());
                    for (dst, &src) in gx.iter_mut().zip(g) {
                        *dst = *dst + src;
                    }
                }
            }
            Op::SoftmaxLast { x } => {
                if rq(*x) {
                    let y = nodes[i].value.data();
                    let d = *nodes[i].value.shape().last().unwrap();
                    let gx = Self::ensure_grad(grads, x.0, g.len());
                    let rows = g.len() / d;
                    for r in 0..rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut dot = S::zero();
                        for (&yv, &gv) in yr.iter().zip(gr) {
                            dot = dot + yv * gv;
                        }
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = out[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let d = *nodes[i].value.shape().last().unwrap();
                let rows = g.len() / d;
                let sc = nodes[scale.0].value.data();
                let inv_d = S::one() / S::from_f64_lossy(d as f64);
                if rq(*x) {
                    let gx = Self::ensure_grad(grads, x.0, g.len());
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            let a = gr[j] * sc[j];
                            m1 = m1 + a;
                            m2 = m2 + a * xh[j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        let istd = inv_std[r];
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let a = gr[j] * sc[j];
                            out[j] = out[j] + istd * (a - m1 - xh[j] * m2);
                        }
                    }
                }
                if rq(*scale) {
                    let gs = Self::ensure_grad(grads, scale.0, d);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            gs[j] = gs[j] + gr[j] * xh[j];
                        }
                    }
                }
                if rq(*shift) {
                    let gb = Self::ensure_grad(grads, shift.0, d);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            gb[j] = gb[j] + gr[j];
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if rq(*x) {
                    let xd = nodes[x.0].value.data();
                    let gx = Self::ensure_grad(grads, x.0, g.len());
                    for ((dst, &src), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        let xf = xv.to_f64_lossy();
                        let u = GELU_C * (xf + GELU_A * xf * xf * xf);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * xf * xf);
                        let d = 0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * du;
                        *dst = *dst + src * S::from_f64_lossy(d);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if rq(*table) {
                    let (rows, width) = nodes[table.0].value.dims2().unwrap();
                    let gt = Self::ensure_grad(grads, table.0, rows * width);
                    for (pos, &id) in ids.iter().enumerate() {
                        let src = &g[pos * width..(pos + 1) * width];
                        let dst = &mut gt[id * width..(id + 1) * width];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::CeLabelSmoothed {
                logits,
                targets,
                pad,
                eps,
                probs,
                n_active,
            } => {
                if rq(*logits) {
                    let (t, v) = nodes[logits.0].value.dims2().unwrap();
                    let scale = g[0] / S::from_f64_lossy(*n_active as f64);
                    let inv_v = S::one() / S::from_f64_lossy(v as f64);
                    let gl = Self::ensure_grad(grads, logits.0, t * v);
                    for (r, &tid) in targets.iter().enumerate() {
                        if tid == *pad {
                            continue;
                        }
                        let pr = &probs[r * v..(r + 1) * v];
                        let out = &mut gl[r * v..(r + 1) * v];
                        for j in 0..v {
                            let mut q = *eps * inv_v;
                            if j == tid as usize {
                                q = q + (S::one() - *eps);
                            }
                            out[j] = out[j] + scale * (pr[j] - q);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, spec, cols } => {
                let n = spec.out_h() * spec.out_w();
                let k = spec.cin * spec.kh * spec.kw;
                if rq(*w) {
                    let gw = Self::ensure_grad(grads, w.0, spec.cout * k);
                    kernels::gemm_nt(g, cols, gw, spec.cout, n, k);
                }
                if rq(*b) {
                    let gb = Self::ensure_grad(grads, b.0, spec.cout);
                    for co in 0..spec.cout {
                        let mut acc = S::zero();
                        for &gv in &g[co * n..(co + 1) * n] {
                            acc = acc + gv;
                        }
                        gb[co] = gb[co] + acc;
                    }
                }
                if rq(*x) {
                    let mut dcols = vec![S::zero(); k * n];
                    kernels::gemm_tn(nodes[w.0].value.data(), g, &mut dcols, spec.cout, k, n);
                    let gx = Self::ensure_grad(grads, x.0, numel_of(*x));
                    kernels::col2im(&dcols, spec, gx);
                }
            }
            Op::Conv3d { x, w, b, spec, cols } => {
                let n = spec.out_t() * spec.out_h() * spec.out_w();
                let k = spec.cin * spec.kt * spec.kh * spec.kw;
                if rq(*w) {
                    let gw = Self::ensure_grad(grads, w.0, spec.cout * k);
                    kernels::gemm_nt(g, cols, gw, spec.cout, n, k);
                }
                if rq(*b) {
                    let gb = Self::ensure_grad(grads, b.0, spec.cout);
                    for co in 0..spec.cout {
                        let mut acc = S::zero();
                        for &gv in &g[co * n..(co + 1) * n] {
                            acc = acc + gv;
                        }
                        gb[co] = gb[co] + acc;
                    }
                }
                if rq(*x) {
                    let mut dcols = vec![S::zero(); k * n];
                    kernels::gemm_tn(nodes[w.0].value.data(), g, &mut dcols, spec.cout, k, n);
                    let gx = Self::ensure_grad(grads, x.0, numel_of(*x));
                    kernels::col2vol(&dcols, spec, gx);
                }
            }
            Op::AddBias { x, b } => {
                let (r, c) = nodes[x.0].value.dims2().unwrap();
                if rq(*x) {
                    let gx = Self::ensure_grad(grads, x.0, r * c);
                    for (dst, &src) in gx.iter_mut().zip(g) {
                        *dst = *dst + src;
                    }
                }
                if rq(*b) {
                    let gb = Self::ensure_grad(grads, b.0, c);
                    for i2 in 0..r {
                        for j in 0..c {
                            gb[j] = gb[j] + g[i2 * c + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if rq(*x) {
                    let (r, c) = nodes[x.0].value.dims2().unwrap();
                    let gx = Self::ensure_grad(grads, x.0, r * c);
                    for i2 in 0..r {
                        for j in 0..*len {
                            gx[i2 * c + start + j] = gx[i2 * c + start + j] + g[i2 * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = nodes[i].value.shape()[1];
                let r = nodes[i].value.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    if rq(p) {
                        let gp = Self::ensure_grad(grads, p.0, r * w);
                        for i2 in 0..r {
                            for j in 0..w {
                                gp[i2 * w + j] = gp[i2 * w + j] + g[i2 * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    if rq(p) {
                        let gp = Self::ensure_grad(grads, p.0, n);
                        for (dst, &src) in gp.iter_mut().zip(&g[off..off + n]) {
                            *dst = *dst + src;
                        }
                    }
                    off += n;
                }
            }
            Op::SumAll { x } => {
                if rq(*x) {
                    let gv = g[0];
                    let gx = Self::ensure_grad(grads, x.0, numel_of(*x));
                    for dst in gx.iter_mut() {
                        *dst = *dst + gv;
                    }
                }
            }
            Op::MeanAll { x } => {
                if rq(*x) {
                    let n = numel_of(*x);
                    let gv = g[0] / S::from_f64_lossy(n as f64);
                    let gx = Self::ensure_grad(grads, x.0, n);
                    for dst in gx.iter_mut() {
                        *dst = *dst + gv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn backward_of_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn elementwise_square_gradient() {
        // d/dx sum(x*x) = 2x
        let mut tape = Tape::new();
        let x = tape.leaf_grad(Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(Tensor::scalar(1.0f64));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        let err = tape.backward(s).unwrap_err();
        assert_eq!(err.kind(), "contract");
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(t2(1, 2, &[1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert_eq!(err.kind(), "contract");
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![4, 5]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn shared_var_accumulates_gradients() {
        // y = sum(x) + sum(x) so dy/dx = 2
        let mut tape = Tape::new();
        let x = tape.leaf_grad(Tensor::new(vec![3], vec![1.0f64, 1.0, 1.0]).unwrap());
        let s1 = tape.sum_all(x).unwrap();
        let s2 = tape.sum_all(x).unwrap();
        let y = tape.add(s1, s2).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_max_subtraction_holds() {
        let mut tape = Tape::new();
        // Large magnitudes would overflow a naive exp.
        let x = tape.leaf(t2(2, 3, &[1000.0, 1001.0, 1002.0, -1000.0, -1000.0, -1000.0]));
        let y = tape.softmax_last(x).unwrap();
        let d = tape.value(y).data();
        for r in 0..2 {
            let sum: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // Shift invariance: softmax(x + c) == softmax(x)
        let x2 = tape.leaf(t2(1, 3, &[1.0, 2.0, 3.0]));
        let x3 = tape.leaf(t2(1, 3, &[101.0, 102.0, 103.0]));
        let y2 = tape.softmax_last(x2).unwrap();
        let y3 = tape.softmax_last(x3).unwrap();
        for (a, b) in tape.value(y2).data().iter().zip(tape.value(y3).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.0f64, f64::NAN]).unwrap());
        let err = tape.softmax_last(x).unwrap_err();
        assert_eq!(err.kind(), "validity");
    }

    #[test]
    fn softmax_reference_values() {
        // Double-precision reference computed inline for [1, 2, 3].
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 3, &[1.0, 2.0, 3.0]));
        let y = tape.softmax_last(x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(e.iter().map(|v| v / z)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ce_uniform_logits_equals_ln_v() {
        for v in [2usize, 5, 17] {
            let mut tape = Tape::new();
            let logits = tape.leaf_grad(Tensor::full(vec![1, v], 0.3f64));
            let (loss, n) = tape.ce_label_smoothed(logits, &[1], 0, 0.1).unwrap();
            assert_eq!(n, 1);
            let got = tape.value(loss).item().unwrap();
            assert!((got - (v as f64).ln()).abs() < 1e-12, "V={v} got {got}");
        }
    }

    #[test]
    fn ce_hand_value_two_classes() {
        // logits [0, 1], target 0, eps 0.1:
        // lse = ln(1 + e), loss = lse - 0.9 * 0 - 0.05 * (0 + 1)
        let lse = (1.0f64.exp() + 1.0).ln();
        let expected = lse - 0.05;
        let mut tape = Tape::new();
        let logits = tape.leaf_grad(t2(1, 2, &[0.0, 1.0]));
        let (loss, _) = tape.ce_label_smoothed(logits, &[0], u32::MAX, 0.1).unwrap();
        let got = tape.value(loss).item().unwrap();
        assert!((got - expected).abs() < 1e-12, "got {got} want {expected}");
    }

    #[test]
    fn ce_ignores_pad_rows_and_counts_active() {
        let mut tape = Tape::new();
        let logits = tape.leaf_grad(t2(3, 4, &[
            0.0, 1.0, 2.0, 3.0, //
            9.0, 9.0, 9.0, 9.0, // PAD row, arbitrary junk
            3.0, 2.0, 1.0, 0.0,
        ]));
        let (loss, n) = tape.ce_label_smoothed(logits, &[3, 0, 1], 0, 0.1).unwrap();
        assert_eq!(n, 2);
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        assert!(g[4..8].iter().all(|&v| v == 0.0), "PAD row must get zero grad");
        // Gradient rows sum to zero since both p and q are distributions.
        for r in [0usize, 2] {
            let s: f64 = g[r * 4..(r + 1) * 4].iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn ce_rejects_all_pad_and_bad_ids() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t2(2, 3, &[0.0; 6]));
        assert_eq!(
            tape.ce_label_smoothed(logits, &[0, 0], 0, 0.1).unwrap_err().kind(),
            "contract"
        );
        assert_eq!(
            tape.ce_label_smoothed(logits, &[1, 3], 0, 0.1).unwrap_err().kind(),
            "index"
        );
        assert_eq!(
            tape.ce_label_smoothed(logits, &[1], 0, 0.1).unwrap_err().kind(),
            "shape"
        );
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(2, 4, &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]));
        let sc = tape.leaf(Tensor::full(vec![4], 1.0f64));
        let sh = tape.leaf(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, sc, sh, 1e-12).unwrap();
        let d = tape.value(y).data();
        for r in 0..2 {
            let row = &d[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row {r} var {var}");
        }
    }

    #[test]
    fn gelu_reference_points() {
        // gelu(0) = 0; gelu is odd-symmetric around 0 up to the x/2 term:
        // gelu(x) + gelu(-x) = x - x = 0... actually equals x * 1 = x*0.5*2.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.0f64, 2.0, -2.0]).unwrap());
        let y = tape.gelu(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.0);
        // gelu(x) + gelu(-x) = x * 0.5 * (1 + t) + (-x) * 0.5 * (1 - t) = x * t... check sum = x*t
        // Simpler: hand value for x = 2 with the tanh approximation.
        let u = GELU_C * (2.0 + GELU_A * 8.0);
        let want = 0.5 * 2.0 * (1.0 + u.tanh());
        assert!((d[1] - want).abs() < 1e-15);
        assert!((d[1] + d[2] - 2.0 * u.tanh()).abs() < 1e-12);
    }

    #[test]
    fn embedding_gathers_rows_and_scatters_grads() {
        let mut tape = Tape::new();
        let table = tape.leaf_grad(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let out = tape.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum_all(out).unwrap();
        tape.backward(s).unwrap();
        // Row 2 used twice, row 0 once, row 1 never.
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut tape = Tape::new();
        let table = tape.leaf(t2(3, 2, &[0.0; 6]));
        assert_eq!(tape.embedding(table, &[3]).unwrap_err().kind(), "index");
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(t2(2, 4, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let a = tape.slice_cols(x, 0, 2).unwrap();
        let b = tape.slice_cols(x, 2, 2).unwrap();
        let back = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
        let s = tape.sum_all(back).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn concat_rows_stacks_in_order() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(1, 2, &[1.0, 2.0]));
        let b = tape.leaf(t2(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[3, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn transpose_backward_routes_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let xt = tape.transpose2(x).unwrap();
        assert_eq!(tape.value(xt).shape(), &[3, 2]);
        let w = tape.leaf(t2(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let y = tape.mul(xt, w).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn values_are_pure_across_repeated_forward() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t2(2, 2, &[0.5, -0.25, 0.125, 2.0]));
            let y = tape.gelu(x).unwrap();
            let z = tape.softmax_last(y).unwrap();
            tape.value(z).data().to_vec()
        };
        assert_eq!(build(), build());
    }
}
