//! Forward definitions of the differentiable primitives.

use super::kernels;
use super::{Op, ReduceKind, Var};
use crate::error::{Result, WchError};
use crate::tensor::{gemm, Real, Tensor};

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    fn emit(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'t> {
        let rg = parents.iter().any(|&p| self.tape.requires_grad(p));
        self.tape.push(value, op, rg)
    }

    /// Matrix product of 2-D operands or batched product of 3-D operands.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(other, false, false)
    }

    /// Product `op(self) · op(other)` where `op` optionally transposes the
    /// last two axes. Both operands are 2-D, or both 3-D with equal batch.
    pub fn matmul_t(&self, other: Var<'t>, trans_a: bool, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(&other);
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        let bad = || WchError::dim("matmul", sa, sb);
        let (batch, ar, ac, br, bc) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => return Err(bad()),
        };
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[t * m * k..(t + 1) * m * k],
                trans_a,
                &b.data()[t * k * n..(t + 1) * k * n],
                trans_b,
                &mut out[t * m * n..(t + 1) * m * n],
                0.0,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            batch,
            m,
            k,
            n,
            trans_a,
            trans_b,
        };
        Ok(self.emit(Tensor::new(&shape, out)?, op, &[self.id, other.id]))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let r = self.value().ndim();
        if r < 2 {
            return Err(WchError::dim("transpose", &self.shape(), &[2]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let mut seen = vec![false; a.ndim()];
        if perm.len() != a.ndim()
            || perm
                .iter()
                .any(|&p| p >= a.ndim() || std::mem::replace(&mut seen[p], true))
        {
            return Err(WchError::dim("permute", a.shape(), perm));
        }
        let (data, shape) = kernels::permute(a.data(), a.shape(), perm);
        let op = Op::Permute {
            a: self.id,
            perm: perm.to_vec(),
        };
        Ok(self.emit(Tensor::new(&shape, data)?, op, &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let t = Tensor::clone(&a).reshape(shape)?;
        Ok(self.emit(t, Op::Reshape { a: self.id }, &[self.id]))
    }

    fn check_same(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(WchError::dim(op, &sa, &sb));
        }
        Ok(())
    }

    fn zip_with(&self, other: Var<'t>, f: impl Fn(Real, Real) -> Real) -> Tensor {
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data).expect("shape preserved")
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same(&other, "add")?;
        let t = self.zip_with(other, |x, y| x + y);
        Ok(self.emit(
            t,
            Op::Add {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same(&other, "sub")?;
        let t = self.zip_with(other, |x, y| x - y);
        Ok(self.emit(
            t,
            Op::Sub {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same(&other, "mul")?;
        let t = self.zip_with(other, |x, y| x * y);
        Ok(self.emit(
            t,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    /// `self + other` where `other`'s shape equals a trailing suffix of
    /// `self`'s shape (bias vectors, position tables).
    pub fn add_broadcast(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb || b.numel() == 0 {
            return Err(WchError::dim("add_broadcast", sa, sb));
        }
        let width = b.numel();
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(width) {
            for (x, &y) in chunk.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let t = Tensor::new(sa, data)?;
        Ok(self.emit(
            t,
            Op::AddBroadcast {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    pub fn scale(&self, factor: Real) -> Result<Var<'t>> {
        let t = self.value().map(|v| v * factor);
        Ok(self.emit(t, Op::Scale { a: self.id, factor }, &[self.id]))
    }

    pub fn add_scalar(&self, c: Real) -> Result<Var<'t>> {
        let t = self.value().map(|v| v + c);
        Ok(self.emit(t, Op::AddScalar { a: self.id }, &[self.id]))
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        let t = self.value().map(Real::abs);
        Ok(self.emit(t, Op::Abs { a: self.id }, &[self.id]))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(*self)
    }

    /// Softmax of `self / temperature` over the last axis.
    pub fn softmax(&self, temperature: Real) -> Result<Var<'t>> {
        if !(temperature > 0.0) {
            return Err(WchError::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let a = self.value();
        let cols = *a.shape().last().ok_or_else(|| WchError::dim("softmax", &[], &[1]))?;
        let data = kernels::softmax_rows(a.data(), cols.max(1), temperature);
        let t = Tensor::new(a.shape(), data)?;
        Ok(self.emit(
            t,
            Op::Softmax {
                a: self.id,
                temperature,
            },
            &[self.id],
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let a = self.value();
        let cols = *a
            .shape()
            .last()
            .ok_or_else(|| WchError::dim("log_softmax", &[], &[1]))?;
        let data = kernels::log_softmax_rows(a.data(), cols.max(1));
        let t = Tensor::new(a.shape(), data)?;
        Ok(self.emit(t, Op::LogSoftmax { a: self.id }, &[self.id]))
    }

    /// Reduce along `axis`, removing it. Max routes its gradient to the
    /// lowest-index maximum.
    pub fn reduce(&self, axis: usize, kind: ReduceKind) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(WchError::dim("reduce", shape, &[axis]));
        }
        let (outer, len, inner) = kernels::split_axis(shape, axis);
        let src = a.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(&src[base..base + inner]) {
                            *d += s;
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = 1.0 / len as Real;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceKind::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = src[o * len * inner + i];
                        let mut at = 0;
                        for l in 1..len {
                            let v = src[(o * len + l) * inner + i];
                            if v > best {
                                best = v;
                                at = l;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = at;
                    }
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let t = Tensor::new(&out_shape, out)?;
        let op = Op::Reduce {
            a: self.id,
            axis,
            kind,
            argmax,
        };
        Ok(self.emit(t, op, &[self.id]))
    }

    pub fn sum_all(&self) -> Result<Var<'t>> {
        self.reshape(&[self.value().numel()])?.reduce(0, ReduceKind::Sum)
    }

    pub fn mean_all(&self) -> Result<Var<'t>> {
        self.reshape(&[self.value().numel()])?.reduce(0, ReduceKind::Mean)
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>, eps: Real) -> Result<Var<'t>> {
        self.same_tape(&gain);
        self.same_tape(&bias);
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| WchError::dim("layer_norm", &[], &[1]))?;
        let (g, b) = (gain.value(), bias.value());
        if g.shape() != [d] || b.shape() != [d] {
            return Err(WchError::dim("layer_norm", x.shape(), g.shape()));
        }
        let rows = x.numel() / d.max(1);
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<Real>() / d as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let t = Tensor::new(x.shape(), out)?;
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            rstd,
        };
        Ok(self.emit(t, op, &[self.id, gain.id, bias.id]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'t>> {
        let t = self.value().map(kernels::gelu);
        Ok(self.emit(t, Op::Gelu { a: self.id }, &[self.id]))
    }

    /// Sign with `sign(0) = +1`; straight-through gradient, zeroed where
    /// `|x| > 1` when `clip` is set.
    pub fn ste_sign(&self, clip: bool) -> Result<Var<'t>> {
        let t = self.value().map(kernels::sign);
        Ok(self.emit(t, Op::SteSign { a: self.id, clip }, &[self.id]))
    }

    /// Divide every row `i` of a square matrix by its diagonal entry `(i, i)`.
    pub fn diag_normalize(&self) -> Result<Var<'t>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(WchError::dim("diag_normalize", s, &[s[0], s[0]]));
        }
        let n = s[0];
        let mut data = a.data().to_vec();
        for i in 0..n {
            let d = a.data()[i * n + i];
            if d == 0.0 || !d.is_finite() {
                return Err(WchError::Numeric(format!(
                    "diagonal entry {i} is {d}; cannot normalize row"
                )));
            }
            for v in &mut data[i * n..(i + 1) * n] {
                *v /= d;
            }
        }
        let t = Tensor::new(s, data)?;
        Ok(self.emit(t, Op::DiagNormalize { a: self.id }, &[self.id]))
    }

    /// Insert a new axis at `axis` and repeat the tensor `size` times along it.
    pub fn expand(&self, axis: usize, size: usize) -> Result<Var<'t>> {
        let a = self.value();
        let s = a.shape();
        if axis > s.len() {
            return Err(WchError::dim("expand", s, &[axis]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let mut data = Vec::with_capacity(a.numel() * size);
        for o in 0..outer {
            let block = &a.data()[o * inner..(o + 1) * inner];
            for _ in 0..size {
                data.extend_from_slice(block);
            }
        }
        let mut shape = s.to_vec();
        shape.insert(axis, size);
        let t = Tensor::new(&shape, data)?;
        Ok(self.emit(t, Op::Expand { a: self.id, axis, size }, &[self.id]))
    }

    /// Scale every last-axis row to unit Euclidean norm (norms floored at `eps`).
    pub fn unit_normalize(&self, eps: Real) -> Result<Var<'t>> {
        let a = self.value();
        let d = *a
            .shape()
            .last()
            .ok_or_else(|| WchError::dim("unit_normalize", &[], &[1]))?;
        let mut data = a.data().to_vec();
        let mut norms = Vec::with_capacity(a.numel() / d.max(1));
        for row in data.chunks_mut(d.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<Real>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let t = Tensor::new(a.shape(), data)?;
        Ok(self.emit(t, Op::UnitNormalize { a: self.id, norms }, &[self.id]))
    }

    /// Same values, cut out of gradient propagation.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(Tensor::clone(&self.value()))
    }
}
