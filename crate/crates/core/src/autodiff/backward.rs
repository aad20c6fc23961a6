use crate::error::TensorError;
use crate::tensor::{gemm_into, Float, Tensor};

use super::tape::{gelu_grad, rope_row, Op, Tape, Var};

/// Gradients of a scalar loss with respect to every node of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient for `v`; nodes the loss does not depend on have none.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn acc<'a, T: Float>(grads: &'a mut [Option<Vec<T>>], numel: &[usize], v: Var) -> &'a mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::ZERO; numel[v.0]])
}

impl<T: Float> Tape<T> {
    /// Reverse sweep from a scalar `loss`. Contributions are accumulated in
    /// reverse topological order, so results are reproducible run to run.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let numel: Vec<usize> = self.nodes.iter().map(|nd| nd.value.numel()).collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.rows(), av.cols());
                    let nn = out.cols();
                    let ga = acc(&mut grads, &numel, *a);
                    if *trans_b {
                        // c = a·bᵀ, b: [n×k]
                        gemm_into(&g, false, bv.data(), false, ga, m, nn, k, T::ONE);
                        let gb = acc(&mut grads, &numel, *b);
                        gemm_into(&g, true, av.data(), false, gb, nn, m, k, T::ONE);
                    } else {
                        gemm_into(&g, false, bv.data(), true, ga, m, nn, k, T::ONE);
                        let gb = acc(&mut grads, &numel, *b);
                        gemm_into(av.data(), true, &g, false, gb, k, m, nn, T::ONE);
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, &numel, *a), &g);
                    add_into(acc(&mut grads, &numel, *b), &g);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, &numel, *a), &g);
                    for (o, &x) in acc(&mut grads, &numel, *b).iter_mut().zip(&g) {
                        *o -= x;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    for ((o, &x), &y) in acc(&mut grads, &numel, *a).iter_mut().zip(&g).zip(bv) {
                        *o += x * y;
                    }
                    for ((o, &x), &y) in acc(&mut grads, &numel, *b).iter_mut().zip(&g).zip(av) {
                        *o += x * y;
                    }
                }
                Op::AddRow { x, row } => {
                    add_into(acc(&mut grads, &numel, *x), &g);
                    let d = out.cols();
                    let gr = acc(&mut grads, &numel, *row);
                    for chunk in g.chunks(d) {
                        add_into(gr, chunk);
                    }
                }
                Op::RowScale { x, s } => {
                    let d = out.cols();
                    let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                    let gx = acc(&mut grads, &numel, *x);
                    for (i, &c) in sv.iter().enumerate() {
                        for j in 0..d {
                            gx[i * d + j] += g[i * d + j] * c;
                        }
                    }
                    let gs = acc(&mut grads, &numel, *s);
                    for (i, o) in gs.iter_mut().enumerate() {
                        let mut t = T::ZERO;
                        for j in 0..d {
                            t += g[i * d + j] * xv[i * d + j];
                        }
                        *o += t;
                    }
                }
                Op::Scale(x, c) => {
                    for (o, &v) in acc(&mut grads, &numel, *x).iter_mut().zip(&g) {
                        *o += v * *c;
                    }
                }
                Op::AddMask(x) | Op::Reshape(x) => add_into(acc(&mut grads, &numel, *x), &g),
                Op::Softmax(x) => {
                    let d = out.cols();
                    let gx = acc(&mut grads, &numel, *x);
                    for (i, (gy, y)) in g.chunks(d).zip(out.data().chunks(d)).enumerate() {
                        let dot: T = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gx[i * d + j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = out.cols();
                    let gv = self.value(*gain).data().to_vec();
                    let inv_d = T::from_f64(1.0 / d as f64);
                    {
                        let gx = acc(&mut grads, &numel, *x);
                        for (i, &r) in rstd.iter().enumerate() {
                            let gy = &g[i * d..(i + 1) * d];
                            let h = &xhat[i * d..(i + 1) * d];
                            let dh: Vec<T> = gy.iter().zip(&gv).map(|(&a, &b)| a * b).collect();
                            let mean_dh = dh.iter().copied().sum::<T>() * inv_d;
                            let mean_dh_h = dh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                            for j in 0..d {
                                gx[i * d + j] += r * (dh[j] - mean_dh - h[j] * mean_dh_h);
                            }
                        }
                    }
                    let gg = acc(&mut grads, &numel, *gain);
                    for (gy, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gy[j] * h[j];
                        }
                    }
                    let gb = acc(&mut grads, &numel, *bias);
                    for gy in g.chunks(d) {
                        add_into(gb, gy);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    for ((o, &gy), &v) in acc(&mut grads, &numel, *x).iter_mut().zip(&g).zip(xv) {
                        *o += gy * gelu_grad(v);
                    }
                }
                Op::Sigmoid(x) => {
                    for ((o, &gy), &y) in acc(&mut grads, &numel, *x).iter_mut().zip(&g).zip(out.data()) {
                        *o += gy * y * (T::ONE - y);
                    }
                }
                Op::Rope { x, positions, n_heads } => {
                    let d = out.cols();
                    let gx = acc(&mut grads, &numel, *x);
                    let mut buf = vec![T::ZERO; d];
                    for (i, &p) in positions.iter().enumerate() {
                        buf.copy_from_slice(&g[i * d..(i + 1) * d]);
                        rope_row(&mut buf, p, *n_heads, -1.0);
                        add_into(&mut gx[i * d..(i + 1) * d], &buf);
                    }
                }
                Op::StackRows(sources) => {
                    let d = out.cols();
                    for (i, &(v, r)) in sources.iter().enumerate() {
                        let gv = acc(&mut grads, &numel, v);
                        add_into(&mut gv[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
                Op::SliceCols { x, start } => {
                    let (w, src_w) = (out.cols(), self.value(*x).cols());
                    let gx = acc(&mut grads, &numel, *x);
                    for (i, gy) in g.chunks(w).enumerate() {
                        add_into(&mut gx[i * src_w + start..i * src_w + start + w], gy);
                    }
                }
                Op::ConcatCols(parts) => {
                    let w = out.cols();
                    let mut off = 0;
                    for &p in parts {
                        let pw = self.value(p).cols();
                        let gp = acc(&mut grads, &numel, p);
                        for (i, gy) in g.chunks(w).enumerate() {
                            add_into(&mut gp[i * pw..(i + 1) * pw], &gy[off..off + pw]);
                        }
                        off += pw;
                    }
                }
                Op::Sum(x) => {
                    for o in acc(&mut grads, &numel, *x).iter_mut() {
                        *o += g[0];
                    }
                }
                Op::Mean(x) => {
                    let c = g[0] / T::from_f64(numel[x.0] as f64);
                    for o in acc(&mut grads, &numel, *x).iter_mut() {
                        *o += c;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let v = self.value(*logits).cols();
                    let c = g[0] / T::from_f64(targets.len() as f64);
                    let gl = acc(&mut grads, &numel, *logits);
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            gl[i * v + j] += c * probs[i * v + j];
                        }
                        gl[i * v + t] -= c;
                    }
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect(),
        })
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
