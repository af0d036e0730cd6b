use super::kernels;
use super::{Op, ReduceKind, Tape, Var};
use crate::error::{Result, WchError};
use crate::tensor::{gemm, Real, Tensor};

/// Gradients of a scalar with respect to the leaves that require them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zeros if nothing flowed into it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

/// Lazily allocated gradient buffers, one per node.
struct Buffers<'a> {
    grads: Vec<Option<Vec<Real>>>,
    tape: &'a [super::Node],
}

impl Buffers<'_> {
    /// Mutable gradient slot for `id`, or `None` if it needs no gradient.
    fn slot(&mut self, id: usize) -> Option<&mut [Real]> {
        let node = &self.tape[id];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }
}

impl Tape {
    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(self, loss.tape), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(WchError::dim("backward", root.value.shape(), &[]));
        }
        let mut buf = Buffers {
            grads: vec![None; nodes.len()],
            tape: &nodes,
        };
        if let Some(g) = buf.slot(loss.id) {
            g[0] = 1.0;
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = buf.grads[id].take() else {
                continue;
            };
            propagate(&mut buf, &node.op, &node.value, &g);
        }
        let grads = buf
            .grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

fn propagate(buf: &mut Buffers<'_>, op: &Op, out: &Tensor, g: &[Real]) {
    let tape = buf.tape;
    match *op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_a,
            trans_b,
        } => {
            let av = &tape[a].value;
            let bv = &tape[b].value;
            if let Some(ga) = buf.slot(a) {
                for t in 0..batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let bt = &bv.data()[t * k * n..(t + 1) * k * n];
                    let dst = &mut ga[t * m * k..(t + 1) * m * k];
                    if trans_a {
                        // a stored k×m: dA = op(B) · Gᵀ
                        gemm(k, n, m, bt, trans_b, gt, true, dst, 1.0);
                    } else {
                        // dA = G · op(B)ᵀ
                        gemm(m, n, k, gt, false, bt, !trans_b, dst, 1.0);
                    }
                }
            }
            if let Some(gb) = buf.slot(b) {
                for t in 0..batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let at = &av.data()[t * m * k..(t + 1) * m * k];
                    let dst = &mut gb[t * k * n..(t + 1) * k * n];
                    if trans_b {
                        // b stored n×k: dB = Gᵀ · op(A)
                        gemm(n, m, k, gt, true, at, trans_a, dst, 1.0);
                    } else {
                        // dB = op(A)ᵀ · G
                        gemm(k, m, n, at, !trans_a, gt, false, dst, 1.0);
                    }
                }
            }
        }
        Op::Permute { a, ref perm } => {
            if let Some(ga) = buf.slot(a) {
                let (back, _) = kernels::permute(g, out.shape(), &kernels::inverse_perm(perm));
                add_into(ga, &back);
            }
        }
        Op::Reshape { a } | Op::AddScalar { a } => {
            if let Some(ga) = buf.slot(a) {
                add_into(ga, g);
            }
        }
        Op::Add { a, b } => {
            if let Some(ga) = buf.slot(a) {
                add_into(ga, g);
            }
            if let Some(gb) = buf.slot(b) {
                add_into(gb, g);
            }
        }
        Op::Sub { a, b } => {
            if let Some(ga) = buf.slot(a) {
                add_into(ga, g);
            }
            if let Some(gb) = buf.slot(b) {
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
            }
        }
        Op::Mul { a, b } => {
            let av = &tape[a].value;
            let bv = &tape[b].value;
            if let Some(ga) = buf.slot(a) {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *d += s * y;
                }
            }
            if let Some(gb) = buf.slot(b) {
                for ((d, &s), &x) in gb.iter_mut().zip(g).zip(av.data()) {
                    *d += s * x;
                }
            }
        }
        Op::AddBroadcast { a, b } => {
            if let Some(ga) = buf.slot(a) {
                add_into(ga, g);
            }
            if let Some(gb) = buf.slot(b) {
                let width = gb.len();
                for chunk in g.chunks(width) {
                    add_into(gb, chunk);
                }
            }
        }
        Op::Scale { a, factor } => {
            if let Some(ga) = buf.slot(a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * factor);
            }
        }
        Op::Abs { a } => {
            let av = &tape[a].value;
            if let Some(ga) = buf.slot(a) {
                for ((d, &s), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                    *d += s * kernels::sign(x);
                }
            }
        }
        Op::Softmax { a, temperature } => {
            if let Some(ga) = buf.slot(a) {
                let cols = *out.shape().last().unwrap();
                for ((gr, yr), dr) in g.chunks(cols).zip(out.data().chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: Real = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += yi * (gi - dot) / temperature;
                    }
                }
            }
        }
        Op::LogSoftmax { a } => {
            if let Some(ga) = buf.slot(a) {
                let cols = *out.shape().last().unwrap();
                for ((gr, yr), dr) in g.chunks(cols).zip(out.data().chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let total: Real = gr.iter().sum();
                    for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += gi - yi.exp() * total;
                    }
                }
            }
        }
        Op::Reduce {
            a,
            axis,
            kind,
            ref argmax,
        } => {
            let shape = tape[a].value.shape().to_vec();
            if let Some(ga) = buf.slot(a) {
                let (outer, len, inner) = kernels::split_axis(&shape, axis);
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let f = if kind == ReduceKind::Mean {
                            1.0 / len as Real
                        } else {
                            1.0
                        };
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                let base = (o * len + l) * inner;
                                for (d, &s) in ga[base..base + inner].iter_mut().zip(src) {
                                    *d += s * f;
                                }
                            }
                        }
                    }
                    ReduceKind::Max => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let l = argmax[o * inner + i];
                                ga[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            ref xhat,
            ref rstd,
        } => {
            let d = *out.shape().last().unwrap();
            let gv = &tape[gain].value;
            if let Some(gg) = buf.slot(gain) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((dst, &gi), &hi) in gg.iter_mut().zip(gr).zip(hr) {
                        *dst += gi * hi;
                    }
                }
            }
            if let Some(gb) = buf.slot(bias) {
                for gr in g.chunks(d) {
                    add_into(gb, gr);
                }
            }
            if let Some(gx) = buf.slot(x) {
                let inv_d = 1.0 / d as Real;
                let mut dh = vec![0.0; d];
                for (r, ((gr, hr), dr)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    for ((h, &gi), &w) in dh.iter_mut().zip(gr).zip(gv.data()) {
                        *h = gi * w;
                    }
                    let mean_dh = dh.iter().sum::<Real>() * inv_d;
                    let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<Real>() * inv_d;
                    for ((dst, &h), &hi) in dr.iter_mut().zip(&dh).zip(hr) {
                        *dst += rstd[r] * (h - mean_dh - hi * mean_dh_h);
                    }
                }
            }
        }
        Op::Gelu { a } => {
            let av = &tape[a].value;
            if let Some(ga) = buf.slot(a) {
                for ((d, &s), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                    *d += s * kernels::gelu_grad(x);
                }
            }
        }
        Op::SteSign { a, clip } => {
            let av = &tape[a].value;
            if let Some(ga) = buf.slot(a) {
                for ((d, &s), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                    if !clip || x.abs() <= 1.0 {
                        *d += s;
                    }
                }
            }
        }
        Op::DiagNormalize { a } => {
            let av = &tape[a].value;
            if let Some(ga) = buf.slot(a) {
                let n = av.shape()[0];
                let src = av.data();
                for i in 0..n {
                    let d = src[i * n + i];
                    let row_g = &g[i * n..(i + 1) * n];
                    let row_a = &src[i * n..(i + 1) * n];
                    let cross: Real = row_g.iter().zip(row_a).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        ga[i * n + j] += row_g[j] / d;
                    }
                    ga[i * n + i] -= cross / (d * d);
                }
            }
        }
        Op::Expand { a, axis, size } => {
            let shape = tape[a].value.shape().to_vec();
            if let Some(ga) = buf.slot(a) {
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis..].iter().product();
                for o in 0..outer {
                    let dst = &mut ga[o * inner..(o + 1) * inner];
                    for r in 0..size {
                        let base = (o * size + r) * inner;
                        add_into(dst, &g[base..base + inner]);
                    }
                }
            }
        }
        Op::UnitNormalize { a, ref norms } => {
            if let Some(ga) = buf.slot(a) {
                let d = *out.shape().last().unwrap();
                for (((gr, yr), dr), &norm) in g.chunks(d).zip(out.data().chunks(d)).zip(ga.chunks_mut(d)).zip(norms) {
                    let dot: Real = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((dst, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *dst += (gi - yi * dot) / norm;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [Real], src: &[Real]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
