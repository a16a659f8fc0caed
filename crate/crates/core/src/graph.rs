//! Reverse-mode automatic differentiation over an eager tape.
//!
//! Ops are recorded as data, values are computed at insertion, and
//! `backward` walks the tape in reverse. The tape is generic over the
//! scalar type: f32 is the working precision, f64 instantiations are
//! used by the finite-difference oracle. Broadcast is deliberately
//! narrow: the right operand of `add`/`mul` may be a suffix of the left
//! operand's shape (leading-batch broadcast), nothing else.

use crate::error::{Error, Result};
use crate::tensor::{dot, mm, mm_nt, mm_tn, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, eps: f64 },
    Rope { x: Var, n_heads: usize, base: f64 },
    AttnScores { q: Var, k: Var, n_heads: usize },
    CausalSoftmax(Var),
    AttnMix { probs: Var, v: Var, n_heads: usize },
    Embed { table: Var, ids: Vec<u32> },
    Sum(Var),
    CrossEntropySum { logits: Var, targets: Vec<u32> },
}

struct Node<F: Scalar> {
    op: Op,
    value: Tensor<F>,
    needs_grad: bool,
}

/// Eagerly evaluated computation tape.
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<F: Scalar = f32> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].take()
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Elementwise sum; `b` may be a suffix-shaped broadcast of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_broadcast("add", va.shape(), vb.shape())?;
        let bt = vb.data();
        let data: Vec<F> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bt[i % bt.len()])
            .collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, needs))
    }

    /// Elementwise product; same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_broadcast("mul", va.shape(), vb.shape())?;
        let bt = vb.data();
        let data: Vec<F> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bt[i % bt.len()])
            .collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = F::from_f64(c);
        let va = self.value(a);
        let data: Vec<F> = va.data().iter().map(|&x| x * s).collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Scale(a, c), value, needs))
    }

    /// `[n,k] @ [k,m] -> [n,m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = mm(va.data(), vb.data(), n, k, m);
        let value = Tensor::from_vec(&[n, m], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), value, needs))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data: Vec<F> = va
            .data()
            .iter()
            .map(|&x| {
                let sig = F::ONE / (F::ONE + (-x).exp());
                x * sig
            })
            .collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Silu(a), value, needs))
    }

    /// Row-wise RMS normalization with learned gain: `y = gain * x / rms(x)`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let (sx, sg) = (vx.shape(), vg.shape());
        if sx.len() != 2 || sg.len() != 1 || sg[0] != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                lhs: sx.to_vec(),
                rhs: sg.to_vec(),
            });
        }
        let (t, d) = (sx[0], sx[1]);
        let epsv = F::from_f64(eps);
        let inv_d = F::from_f64(1.0 / d as f64);
        let mut data = vec![F::ZERO; t * d];
        let g = vg.data();
        for i in 0..t {
            let row = vx.row(i);
            let ms = dot(row, row) * inv_d;
            let inv_r = F::ONE / (ms + epsv).sqrt();
            for j in 0..d {
                data[i * d + j] = g[j] * row[j] * inv_r;
            }
        }
        let value = Tensor::from_vec(&[t, d], data)?;
        let needs = self.needs(x) || self.needs(gain);
        Ok(self.push(Op::RmsNorm { x, gain, eps }, value, needs))
    }

    /// Rotary position embedding applied per head with the half-split
    /// pairing: dims (c, c + hd/2) rotate by angle `pos * base^(-2c/hd)`.
    pub fn rope(&mut self, x: Var, n_heads: usize, base: f64) -> Result<Var> {
        let vx = self.value(x);
        let sx = vx.shape();
        if sx.len() != 2 || n_heads == 0 || sx[1] % n_heads != 0 || (sx[1] / n_heads) % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "rope",
                lhs: sx.to_vec(),
                rhs: vec![n_heads],
            });
        }
        let (t, d) = (sx[0], sx[1]);
        let hd = d / n_heads;
        let (cos_t, sin_t) = rope_tables::<F>(t, hd, base);
        let half = hd / 2;
        let mut data = vx.data().to_vec();
        for p in 0..t {
            for a in 0..n_heads {
                let off = p * d + a * hd;
                for c in 0..half {
                    let (u, w) = (data[off + c], data[off + c + half]);
                    let (cs, sn) = (cos_t[p * half + c], sin_t[p * half + c]);
                    data[off + c] = u * cs - w * sn;
                    data[off + c + half] = u * sn + w * cs;
                }
            }
        }
        let value = Tensor::from_vec(&[t, d], data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Rope { x, n_heads, base }, value, needs))
    }

    /// Scaled causal attention scores: `[h,t,t]` with entry `(a,i,j)` =
    /// `q_i . k_j / sqrt(hd)` for `j <= i`; the upper triangle is never
    /// read downstream and stays zero.
    pub fn attn_scores(&mut self, q: Var, k: Var, n_heads: usize) -> Result<Var> {
        let (vq, vk) = (self.value(q), self.value(k));
        if vq.shape() != vk.shape() || vq.shape().len() != 2 || vq.shape()[1] % n_heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "attn_scores",
                lhs: vq.shape().to_vec(),
                rhs: vk.shape().to_vec(),
            });
        }
        let (t, d) = (vq.shape()[0], vq.shape()[1]);
        let hd = d / n_heads;
        let alpha = F::from_f64(1.0 / (hd as f64).sqrt());
        let mut data = vec![F::ZERO; n_heads * t * t];
        for a in 0..n_heads {
            for i in 0..t {
                let qrow = &vq.data()[i * d + a * hd..i * d + (a + 1) * hd];
                let out = &mut data[a * t * t + i * t..a * t * t + i * t + i + 1];
                for (j, o) in out.iter_mut().enumerate() {
                    let krow = &vk.data()[j * d + a * hd..j * d + (a + 1) * hd];
                    *o = dot(qrow, krow) * alpha;
                }
            }
        }
        let value = Tensor::from_vec(&[n_heads, t, t], data)?;
        let needs = self.needs(q) || self.needs(k);
        Ok(self.push(Op::AttnScores { q, k, n_heads }, value, needs))
    }

    /// Row-wise softmax over the causal prefix `j <= i`; masked entries
    /// come out exactly zero.
    pub fn causal_softmax(&mut self, s: Var) -> Result<Var> {
        let vs = self.value(s);
        let sh = vs.shape();
        if sh.len() != 3 || sh[1] != sh[2] {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax",
                lhs: sh.to_vec(),
                rhs: vec![],
            });
        }
        let (h, t) = (sh[0], sh[1]);
        let mut data = vec![F::ZERO; h * t * t];
        for a in 0..h {
            for i in 0..t {
                let row = &vs.data()[a * t * t + i * t..a * t * t + i * t + i + 1];
                let out = &mut data[a * t * t + i * t..a * t * t + i * t + i + 1];
                let mut m = row[0];
                for &v in row.iter() {
                    if v > m {
                        m = v;
                    }
                }
                let mut z = F::ZERO;
                for (o, &v) in out.iter_mut().zip(row.iter()) {
                    let e = (v - m).exp();
                    *o = e;
                    z += e;
                }
                let inv = F::ONE / z;
                for o in out.iter_mut() {
                    *o = *o * inv;
                }
            }
        }
        let value = Tensor::from_vec(&[h, t, t], data)?;
        let needs = self.needs(s);
        Ok(self.push(Op::CausalSoftmax(s), value, needs))
    }

    /// Mix values with attention probabilities: `out[i, head a] =
    /// sum_{j<=i} probs[a,i,j] * v[j, head a]`.
    pub fn attn_mix(&mut self, probs: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (vp, vv) = (self.value(probs), self.value(v));
        let (sp, sv) = (vp.shape(), vv.shape());
        if sp.len() != 3
            || sv.len() != 2
            || sp[0] != n_heads
            || sp[1] != sv[0]
            || sp[1] != sp[2]
            || sv[1] % n_heads != 0
        {
            return Err(Error::ShapeMismatch {
                op: "attn_mix",
                lhs: sp.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        let (t, d) = (sv[0], sv[1]);
        let hd = d / n_heads;
        let mut data = vec![F::ZERO; t * d];
        for a in 0..n_heads {
            for i in 0..t {
                let prow = &vp.data()[a * t * t + i * t..a * t * t + i * t + i + 1];
                for (j, &p) in prow.iter().enumerate() {
                    let vrow = &vv.data()[j * d + a * hd..j * d + (a + 1) * hd];
                    let orow = &mut data[i * d + a * hd..i * d + (a + 1) * hd];
                    for (o, &vx) in orow.iter_mut().zip(vrow) {
                        *o += p * vx;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[t, d], data)?;
        let needs = self.needs(probs) || self.needs(v);
        Ok(self.push(Op::AttnMix { probs, v, n_heads }, value, needs))
    }

    /// Row gather: `out[p] = table[ids[p]]`.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let vt = self.value(table);
        let st = vt.shape();
        if st.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embed",
                lhs: st.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (vocab, d) = (st[0], st[1]);
        for (position, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange {
                    position,
                    id,
                    vocab,
                });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(vt.row(id as usize));
        }
        let value = Tensor::from_vec(&[ids.len(), d], data)?;
        let needs = self.needs(table);
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            value,
            needs,
        ))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut acc = F::ZERO;
        for &x in va.data() {
            acc += x;
        }
        let needs = self.needs(a);
        Ok(self.push(Op::Sum(a), Tensor::scalar(acc), needs))
    }

    /// Summed next-token cross entropy in nats: `sum_i -log p(targets[i])`
    /// over rows of `logits`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let vl = self.value(logits);
        let sl = vl.shape();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_sum",
                lhs: sl.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let vocab = sl[1];
        for (position, &id) in targets.iter().enumerate() {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange {
                    position,
                    id,
                    vocab,
                });
            }
        }
        let mut acc = F::ZERO;
        for (i, &tgt) in targets.iter().enumerate() {
            let row = vl.row(i);
            acc += row_lse(row) - row[tgt as usize];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::scalar(acc),
            needs,
        ))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        self.backward_scaled(loss, F::ONE)
    }

    /// Backward pass seeded with `scale` instead of 1 (used to fold the
    /// 1/total-token normalization into batched gradient accumulation).
    pub fn backward_scaled(&self, loss: Var, scale: F) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(scale));
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.accumulate_parents(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(
        &self,
        idx: usize,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let add_to = |v: Var, delta: Tensor<F>, grads: &mut [Option<Tensor<F>>]| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += *d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_to(*a, g.clone(), grads);
                }
                if self.needs(*b) {
                    add_to(*b, reduce_to_suffix(g, self.value(*b).len()), grads);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let bt = vb.data();
                    let data: Vec<F> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * bt[i % bt.len()])
                        .collect();
                    add_to(*a, Tensor::from_vec(g.shape(), data)?, grads);
                }
                if self.needs(*b) {
                    let n = vb.len();
                    let mut db = vec![F::ZERO; n];
                    for (i, (&gv, &av)) in g.data().iter().zip(va.data()).enumerate() {
                        db[i % n] += gv * av;
                    }
                    add_to(*b, Tensor::from_vec(vb.shape(), db)?, grads);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let s = F::from_f64(*c);
                    let data: Vec<F> = g.data().iter().map(|&gv| gv * s).collect();
                    add_to(*a, Tensor::from_vec(g.shape(), data)?, grads);
                }
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[1];
                if self.needs(*a) {
                    let da = mm_nt(g.data(), vb.data(), n, m, k);
                    add_to(*a, Tensor::from_vec(&[n, k], da)?, grads);
                }
                if self.needs(*b) {
                    let db = mm_tn(va.data(), g.data(), n, k, m);
                    add_to(*b, Tensor::from_vec(&[k, m], db)?, grads);
                }
            }
            Op::Silu(a) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    let data: Vec<F> = va
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| {
                            let sig = F::ONE / (F::ONE + (-x).exp());
                            gv * (sig + x * sig * (F::ONE - sig))
                        })
                        .collect();
                    add_to(*a, Tensor::from_vec(va.shape(), data)?, grads);
                }
            }
            Op::RmsNorm { x, gain, eps } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let (t, d) = (vx.shape()[0], vx.shape()[1]);
                let epsv = F::from_f64(*eps);
                let inv_d = F::from_f64(1.0 / d as f64);
                let gains = vg.data();
                let mut dx = vec![F::ZERO; t * d];
                let mut dg = vec![F::ZERO; d];
                for i in 0..t {
                    let row = vx.row(i);
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let ms = dot(row, row) * inv_d;
                    let r2 = ms + epsv;
                    let inv_r = F::ONE / r2.sqrt();
                    // s = sum_j g_j * gain_j * x_j
                    let mut s = F::ZERO;
                    for j in 0..d {
                        s += grow[j] * gains[j] * row[j];
                    }
                    let coef = s * inv_d / r2;
                    for j in 0..d {
                        dx[i * d + j] = inv_r * (grow[j] * gains[j] - row[j] * coef);
                        dg[j] += grow[j] * row[j] * inv_r;
                    }
                }
                if self.needs(*x) {
                    add_to(*x, Tensor::from_vec(&[t, d], dx)?, grads);
                }
                if self.needs(*gain) {
                    add_to(*gain, Tensor::from_vec(&[d], dg)?, grads);
                }
            }
            Op::Rope { x, n_heads, base } => {
                if self.needs(*x) {
                    let vx = self.value(*x);
                    let (t, d) = (vx.shape()[0], vx.shape()[1]);
                    let hd = d / n_heads;
                    let half = hd / 2;
                    let (cos_t, sin_t) = rope_tables::<F>(t, hd, *base);
                    let mut dx = g.data().to_vec();
                    for p in 0..t {
                        for a in 0..*n_heads {
                            let off = p * d + a * hd;
                            for c in 0..half {
                                let (du, dw) = (dx[off + c], dx[off + c + half]);
                                let (cs, sn) = (cos_t[p * half + c], sin_t[p * half + c]);
                                dx[off + c] = du * cs + dw * sn;
                                dx[off + c + half] = -du * sn + dw * cs;
                            }
                        }
                    }
                    add_to(*x, Tensor::from_vec(&[t, d], dx)?, grads);
                }
            }
            Op::AttnScores { q, k, n_heads } => {
                let (vq, vk) = (self.value(*q), self.value(*k));
                let (t, d) = (vq.shape()[0], vq.shape()[1]);
                let hd = d / n_heads;
                let alpha = F::from_f64(1.0 / (hd as f64).sqrt());
                let mut dq = vec![F::ZERO; t * d];
                let mut dk = vec![F::ZERO; t * d];
                for a in 0..*n_heads {
                    for i in 0..t {
                        let gsrow = &g.data()[a * t * t + i * t..a * t * t + i * t + i + 1];
                        for (j, &gs) in gsrow.iter().enumerate() {
                            let gsa = gs * alpha;
                            let krow = &vk.data()[j * d + a * hd..j * d + (a + 1) * hd];
                            let qrow = &vq.data()[i * d + a * hd..i * d + (a + 1) * hd];
                            let dqrow = &mut dq[i * d + a * hd..i * d + (a + 1) * hd];
                            for (o, &kv) in dqrow.iter_mut().zip(krow) {
                                *o += gsa * kv;
                            }
                            let dkrow = &mut dk[j * d + a * hd..j * d + (a + 1) * hd];
                            for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                                *o += gsa * qv;
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    add_to(*q, Tensor::from_vec(&[t, d], dq)?, grads);
                }
                if self.needs(*k) {
                    add_to(*k, Tensor::from_vec(&[t, d], dk)?, grads);
                }
            }
            Op::CausalSoftmax(s) => {
                if self.needs(*s) {
                    let vp = &self.nodes[idx].value;
                    let sh = vp.shape();
                    let (h, t) = (sh[0], sh[1]);
                    let mut ds = vec![F::ZERO; h * t * t];
                    for a in 0..h {
                        for i in 0..t {
                            let base = a * t * t + i * t;
                            let prow = &vp.data()[base..base + i + 1];
                            let grow = &g.data()[base..base + i + 1];
                            let mut inner = F::ZERO;
                            for (&p, &gv) in prow.iter().zip(grow) {
                                inner += p * gv;
                            }
                            let drow = &mut ds[base..base + i + 1];
                            for ((o, &p), &gv) in drow.iter_mut().zip(prow).zip(grow) {
                                *o = p * (gv - inner);
                            }
                        }
                    }
                    add_to(*s, Tensor::from_vec(sh, ds)?, grads);
                }
            }
            Op::AttnMix { probs, v, n_heads } => {
                let (vp, vv) = (self.value(*probs), self.value(*v));
                let (t, d) = (vv.shape()[0], vv.shape()[1]);
                let hd = d / n_heads;
                if self.needs(*probs) {
                    let mut dp = vec![F::ZERO; n_heads * t * t];
                    for a in 0..*n_heads {
                        for i in 0..t {
                            let grow = &g.data()[i * d + a * hd..i * d + (a + 1) * hd];
                            let drow = &mut dp[a * t * t + i * t..a * t * t + i * t + i + 1];
                            for (j, o) in drow.iter_mut().enumerate() {
                                let vrow = &vv.data()[j * d + a * hd..j * d + (a + 1) * hd];
                                *o = dot(grow, vrow);
                            }
                        }
                    }
                    add_to(*probs, Tensor::from_vec(&[*n_heads, t, t], dp)?, grads);
                }
                if self.needs(*v) {
                    let mut dv = vec![F::ZERO; t * d];
                    for a in 0..*n_heads {
                        for i in 0..t {
                            let prow = &vp.data()[a * t * t + i * t..a * t * t + i * t + i + 1];
                            let grow = &g.data()[i * d + a * hd..i * d + (a + 1) * hd];
                            for (j, &p) in prow.iter().enumerate() {
                                let dvrow = &mut dv[j * d + a * hd..j * d + (a + 1) * hd];
                                for (o, &gv) in dvrow.iter_mut().zip(grow) {
                                    *o += p * gv;
                                }
                            }
                        }
                    }
                    add_to(*v, Tensor::from_vec(&[t, d], dv)?, grads);
                }
            }
            Op::Embed { table, ids } => {
                if self.needs(*table) {
                    let vt = self.value(*table);
                    let d = vt.shape()[1];
                    let mut dt = vec![F::ZERO; vt.len()];
                    for (p, &id) in ids.iter().enumerate() {
                        let grow = &g.data()[p * d..(p + 1) * d];
                        let trow = &mut dt[id as usize * d..(id as usize + 1) * d];
                        for (o, &gv) in trow.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                    add_to(*table, Tensor::from_vec(vt.shape(), dt)?, grads);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    let gv = g.item();
                    let data = vec![gv; va.len()];
                    add_to(*a, Tensor::from_vec(va.shape(), data)?, grads);
                }
            }
            Op::CrossEntropySum { logits, targets } => {
                if self.needs(*logits) {
                    let vl = self.value(*logits);
                    let (t, vocab) = (vl.shape()[0], vl.shape()[1]);
                    let gv = g.item();
                    let mut dl = vec![F::ZERO; t * vocab];
                    for (i, &tgt) in targets.iter().enumerate() {
                        let row = vl.row(i);
                        let lse = row_lse(row);
                        let drow = &mut dl[i * vocab..(i + 1) * vocab];
                        for (o, &x) in drow.iter_mut().zip(row) {
                            *o = gv * (x - lse).exp();
                        }
                        drow[tgt as usize] += -gv;
                    }
                    add_to(*logits, Tensor::from_vec(&[t, vocab], dl)?, grads);
                }
            }
        }
        Ok(())
    }
}

/// Stable log-sum-exp of one logits row.
fn row_lse<F: Scalar>(row: &[F]) -> F {
    let mut m = row[0];
    for &v in row {
        if v > m {
            m = v;
        }
    }
    let mut z = F::ZERO;
    for &v in row {
        z += (v - m).exp();
    }
    m + z.ln()
}

fn rope_tables<F: Scalar>(t: usize, head_dim: usize, base: f64) -> (Vec<F>, Vec<F>) {
    let half = head_dim / 2;
    let mut cos_t = Vec::with_capacity(t * half);
    let mut sin_t = Vec::with_capacity(t * half);
    for p in 0..t {
        for c in 0..half {
            let theta = p as f64 * base.powf(-2.0 * c as f64 / head_dim as f64);
            cos_t.push(F::from_f64(theta.cos()));
            sin_t.push(F::from_f64(theta.sin()));
        }
    }
    (cos_t, sin_t)
}

/// Broadcast contract: identical shapes, or `rhs` a (strict or equal)
/// trailing suffix of `lhs`.
fn check_broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<()> {
    let ok = rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs;
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }
}

/// Sum `g` over its leading dims down to a buffer of `n` elements
/// (gradient of a suffix-broadcast operand).
fn reduce_to_suffix<F: Scalar>(g: &Tensor<F>, n: usize) -> Tensor<F> {
    let mut data = vec![F::ZERO; n];
    for (i, &gv) in g.data().iter().enumerate() {
        data[i % n] += gv;
    }
    let shape: Vec<usize> = if n == g.len() {
        g.shape().to_vec()
    } else {
        vec![n]
    };
    Tensor::from_vec(&shape, data).expect("suffix reduction shape")
}
