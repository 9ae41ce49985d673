use super::array::{axis_extents, row_major_strides, DenseArray, Real};
use super::conv;
use super::tape::{slot, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use rand::Rng;

/// GELU tanh-approximation constant sqrt(2/pi).
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// GELU tanh-approximation cubic coefficient.
pub const GELU_CUBIC: f64 = 0.044_715;

/// How the two operands of a matrix product are laid out in memory.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_shared: bool,
    b_shared: bool,
}

fn gelu_scalar(x: f64) -> (f64, f64) {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

impl<T: Real> Tape<'_, T> {
    /// Matrix product over the last two axes. Leading batch axes must match,
    /// or one operand must have no batch extent (it is then shared).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::shape(format!("matmul of {sa:?} and {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (na, nb): (usize, usize) = (ba.iter().product(), bb.iter().product());
        let (batch, batch_shape, a_shared, b_shared) = if nb == 1 {
            (na, ba.to_vec(), false, true)
        } else if na == 1 {
            (nb, bb.to_vec(), true, false)
        } else if ba == bb {
            (na, ba.to_vec(), false, false)
        } else {
            return Err(mismatch());
        };
        let plan = MatMulPlan {
            batch,
            m,
            k,
            n,
            a_shared,
            b_shared,
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            if b_shared {
                T::gemm(
                    batch * m,
                    k,
                    n,
                    T::one(),
                    av,
                    (k as isize, 1),
                    bv,
                    (n as isize, 1),
                    T::zero(),
                    &mut out,
                    (n as isize, 1),
                );
            } else {
                for i in 0..batch {
                    let ao = if a_shared { 0 } else { i * m * k };
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        &av[ao..ao + m * k],
                        (k as isize, 1),
                        &bv[i * k * n..(i + 1) * k * n],
                        (n as isize, 1),
                        T::zero(),
                        &mut out[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                    );
                }
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let rg = self.needs_grad(&[a, b]);
        self.push(DenseArray::new(shape, out)?, Op::MatMul(plan, a, b), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("transpose needs 2+ axes, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        transpose_blocks(src, &mut out, r, c);
        let mut shape = s.clone();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        let rg = self.needs_grad(&[x]);
        self.push(DenseArray::new(shape, out)?, Op::TransposeLast2(x), rg)
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("invalid permutation {axes:?} for shape {s:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let out = permute_data(self.value(x).data(), &s, axes);
        let rg = self.needs_grad(&[x]);
        self.push(DenseArray::new(out_shape, out)?, Op::Permute(x, axes.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a` when
    /// its shape is a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let suffix_ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !suffix_ok {
            return Err(Error::shape(format!("cannot add {sb:?} onto {sa:?}")));
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let mut out = self.value(a).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = *o + bv[i % nb];
        }
        let rg = self.needs_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "elementwise product of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * y;
        }
        let rg = self.needs_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * f);
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Scale(x, f), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v + c);
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("softmax axis {axis} for shape {s:?}")));
        }
        let (outer, len, inner) = axis_extents(&s, axis);
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(d[idx(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (d[idx(j)] - max).exp();
                    d[idx(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    d[idx(j)] = d[idx(j)] / sum;
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Softmax(x, axis), rg)
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    /// Uses the biased variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(format!(
                "layer_norm over {s:?} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let (xv, gv, bv) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut stats = Vec::with_capacity(xv.len() / d);
        for (row, orow) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                orow[j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
            stats.push((mean, rstd));
        }
        let rg = self.needs_grad(&[x, gain, bias]);
        self.push(
            DenseArray::new(s, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        )
    }

    /// Gaussian error linear unit, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = T::of(gelu_scalar(v.as_f64()).0));
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Inverted dropout. Identity when the tape is not in training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o = *o * m;
        }
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::Dropout(x, mask), rg)
    }

    /// Maximum along `axis`, which is removed from the shape. The gradient
    /// flows to the first maximal index only.
    pub fn max_pool_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("max axis {axis} for shape {s:?}")));
        }
        let (outer, len, inner) = axis_extents(&s, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = xv[o * len * inner + i];
                for j in 1..len {
                    let v = xv[(o * len + j) * inner + i];
                    if v > bv {
                        bv = v;
                        best = j;
                    }
                }
                out.push(bv);
                argmax.push(best);
            }
        }
        let rg = self.needs_grad(&[x]);
        self.push(
            DenseArray::new(reduced_shape(&s, axis), out)?,
            Op::MaxAxis { x, axis, argmax },
            rg,
        )
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("mean axis {axis} for shape {s:?}")));
        }
        let (outer, len, inner) = axis_extents(&s, axis);
        let xv = self.value(x).data();
        let inv = T::of(1.0 / len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xv[(o * len + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let rg = self.needs_grad(&[x]);
        self.push(DenseArray::new(reduced_shape(&s, axis), out)?, Op::MeanAxis(x, axis), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.needs_grad(&[x]);
        self.push(DenseArray::scalar(total), Op::SumAll(x), rg)
    }

    /// Row gather from a 2-D array; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("gather_rows needs a 2-D array, got {s:?}")));
        }
        if indices.is_empty() {
            return Err(Error::shape("gather_rows with no indices"));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index { index: bad, len: rows });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        let rg = self.needs_grad(&[x]);
        self.push(
            DenseArray::new(vec![indices.len(), cols], out)?,
            Op::GatherRows(x, indices.to_vec()),
            rg,
        )
    }

    /// Embedding-table lookup: `table[indices]`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.gather_rows(table, indices)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::shape(format!("concat axis {axis} for shape {s0:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat of {s0:?} and {s:?} along {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let xv = self.value(v).data();
                out.extend_from_slice(&xv[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.needs_grad(inputs);
        self.push(DenseArray::new(shape, out)?, Op::Concat(inputs.to_vec(), axis), rg)
    }

    /// Divides each row of a 2-D array by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("l2_normalize_rows needs 2-D, got {s:?}")));
        }
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(s[0]);
        for (r, row) in out.data_mut().chunks_mut(s[1]).enumerate() {
            let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            if norm <= T::zero() {
                return Err(Error::DegenerateEmbedding(format!("row {r}")));
            }
            row.iter_mut().for_each(|v| *v = *v / norm);
            norms.push(norm);
        }
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::L2NormalizeRows(x, norms), rg)
    }

    /// Per-frame 2-D convolution: `[T, Cin, H, W] * [Cout, Cin, kh, kw]`.
    pub fn spatial_conv(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geo = conv::ConvGeometry::spatial(self.shape(x), self.shape(w), stride, pad)?;
        let out = conv::spatial_forward(&geo, self.value(x).data(), self.value(w).data());
        let rg = self.needs_grad(&[x, w]);
        self.push(DenseArray::new(geo.out_shape(), out)?, Op::SpatialConv(x, w, geo), rg)
    }

    /// 1-D convolution over time: `[T, Cin, H, W] * [Cout, Cin, kt]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geo = conv::ConvGeometry::temporal(self.shape(x), self.shape(w), stride, pad)?;
        let out = conv::temporal_forward(&geo, self.value(x).data(), self.value(w).data());
        let rg = self.needs_grad(&[x, w]);
        self.push(DenseArray::new(geo.out_shape(), out)?, Op::TemporalConv(x, w, geo), rg)
    }
}

fn reduced_shape(s: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = s.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn transpose_blocks<T: Copy>(src: &[T], dst: &mut [T], r: usize, c: usize) {
    for (sb, db) in src.chunks(r * c).zip(dst.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                db[j * r + i] = sb[i * c + j];
            }
        }
    }
}

fn permute_data<T: Copy + Default>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride in the source for each output axis
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Applies the backward rule of node `i` given its output gradient `g`.
pub(crate) fn backward_node<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let shape = |v: Var| nodes[v.0].value.shape();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf | Op::Param => {}
        &Op::MatMul(p, a, b) => {
            let (m, k, n) = (p.m, p.k, p.n);
            let (av, bv) = (val(a), val(b));
            if let Some(ga) = slot(nodes, grads, a) {
                if p.b_shared {
                    // dA = dC @ B^T
                    T::gemm(p.batch * m, n, k, T::one(), g, (n as isize, 1), bv, (1, n as isize), T::one(), ga, (k as isize, 1));
                } else {
                    for bi in 0..p.batch {
                        let ao = if p.a_shared { 0 } else { bi * m * k };
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            &bv[bi * k * n..(bi + 1) * k * n],
                            (1, n as isize),
                            T::one(),
                            &mut ga[ao..ao + m * k],
                            (k as isize, 1),
                        );
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                if p.b_shared {
                    // dB = A^T @ dC over the flattened batch
                    T::gemm(k, p.batch * m, n, T::one(), av, (1, k as isize), g, (n as isize, 1), T::one(), gb, (n as isize, 1));
                } else {
                    for bi in 0..p.batch {
                        let ao = if p.a_shared { 0 } else { bi * m * k };
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av[ao..ao + m * k],
                            (1, k as isize),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            T::one(),
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            (n as isize, 1),
                        );
                    }
                }
            }
        }
        &Op::TransposeLast2(x) => {
            let s = shape(x);
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            if let Some(gx) = slot(nodes, grads, x) {
                let mut tmp = vec![T::zero(); g.len()];
                transpose_blocks(g, &mut tmp, c, r);
                add_into(gx, &tmp);
            }
        }
        Op::Permute(x, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let out_shape = nodes[i].value.shape();
            let back = permute_data(g, out_shape, &inverse);
            if let Some(gx) = slot(nodes, grads, *x) {
                add_into(gx, &back);
            }
        }
        &Op::Reshape(x) | &Op::AddScalar(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                add_into(gx, g);
            }
        }
        &Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                let nb = gb.len();
                for (j, &gv) in g.iter().enumerate() {
                    gb[j % nb] = gb[j % nb] + gv;
                }
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if let Some(ga) = slot(nodes, grads, a) {
                for j in 0..g.len() {
                    ga[j] = ga[j] + g[j] * bv[j];
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for j in 0..g.len() {
                    gb[j] = gb[j] + g[j] * av[j];
                }
            }
        }
        &Op::Scale(x, f) => {
            if let Some(gx) = slot(nodes, grads, x) {
                for (d, &gv) in gx.iter_mut().zip(g) {
                    *d = *d + gv * f;
                }
            }
        }
        &Op::Softmax(x, axis) => {
            let (outer, len, inner) = axis_extents(shape(x), axis);
            if let Some(gx) = slot(nodes, grads, x) {
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let dot = (0..len).fold(T::zero(), |acc, j| acc + g[idx(j)] * out[idx(j)]);
                        for j in 0..len {
                            gx[idx(j)] = gx[idx(j)] + out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, stats } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let d = *shape(x).last().unwrap();
            let dn = T::of(d as f64);
            let (xv, gv) = (val(x), val(gain));
            let xhat = |r: usize, j: usize| (xv[r * d + j] - stats[r].0) * stats[r].1;
            if let Some(gg) = slot(nodes, grads, gain) {
                for r in 0..stats.len() {
                    for j in 0..d {
                        gg[j] = gg[j] + g[r * d + j] * xhat(r, j);
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, bias) {
                for r in 0..stats.len() {
                    for j in 0..d {
                        gb[j] = gb[j] + g[r * d + j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, x) {
                for (r, &(_, rstd)) in stats.iter().enumerate() {
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = g[r * d + j] * gv[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xhat(r, j);
                    }
                    mean_dxh = mean_dxh / dn;
                    mean_dxh_xh = mean_dxh_xh / dn;
                    for j in 0..d {
                        let dxh = g[r * d + j] * gv[j];
                        gx[r * d + j] = gx[r * d + j] + rstd * (dxh - mean_dxh - xhat(r, j) * mean_dxh_xh);
                    }
                }
            }
        }
        &Op::Gelu(x) => {
            let xv = val(x);
            if let Some(gx) = slot(nodes, grads, x) {
                for j in 0..g.len() {
                    gx[j] = gx[j] + g[j] * T::of(gelu_scalar(xv[j].as_f64()).1);
                }
            }
        }
        &Op::Relu(x) => {
            let xv = val(x);
            if let Some(gx) = slot(nodes, grads, x) {
                for j in 0..g.len() {
                    if xv[j] > T::zero() {
                        gx[j] = gx[j] + g[j];
                    }
                }
            }
        }
        &Op::Sigmoid(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                for j in 0..g.len() {
                    gx[j] = gx[j] + g[j] * out[j] * (T::one() - out[j]);
                }
            }
        }
        Op::Dropout(x, mask) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    gx[j] = gx[j] + g[j] * mask[j];
                }
            }
        }
        Op::MaxAxis { x, axis, argmax } => {
            let (_, len, inner) = axis_extents(shape(*x), *axis);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (j, (&gv, &am)) in g.iter().zip(argmax).enumerate() {
                    let (o, ii) = (j / inner, j % inner);
                    let idx = (o * len + am) * inner + ii;
                    gx[idx] = gx[idx] + gv;
                }
            }
        }
        &Op::MeanAxis(x, axis) => {
            let (outer, len, inner) = axis_extents(shape(x), axis);
            let inv = T::of(1.0 / len as f64);
            if let Some(gx) = slot(nodes, grads, x) {
                for o in 0..outer {
                    for jj in 0..len {
                        for ii in 0..inner {
                            let idx = (o * len + jj) * inner + ii;
                            gx[idx] = gx[idx] + g[o * inner + ii] * inv;
                        }
                    }
                }
            }
        }
        &Op::SumAll(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().for_each(|v| *v = *v + g[0]);
            }
        }
        Op::GatherRows(x, indices) => {
            let cols = shape(*x)[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &src) in indices.iter().enumerate() {
                    add_into(&mut gx[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
        }
        Op::Concat(inputs, axis) => {
            let s0 = nodes[i].value.shape();
            let (outer, total, inner) = axis_extents(s0, *axis);
            let mut start = 0;
            for &v in inputs {
                let len = shape(v)[*axis];
                if let Some(gv) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                        add_into(&mut gv[o * len * inner..(o + 1) * len * inner], src);
                    }
                }
                start += len;
            }
        }
        Op::SpatialConv(x, w, geo) => {
            let (xv, wv) = (val(*x), val(*w));
            if let Some(gw) = slot(nodes, grads, *w) {
                conv::spatial_backward_weight(geo, xv, g, gw);
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                conv::spatial_backward_input(geo, wv, g, gx);
            }
        }
        Op::TemporalConv(x, w, geo) => {
            let (xv, wv) = (val(*x), val(*w));
            if let Some(gw) = slot(nodes, grads, *w) {
                conv::temporal_backward_weight(geo, xv, g, gw);
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                conv::temporal_backward_input(geo, wv, g, gx);
            }
        }
        Op::L2NormalizeRows(x, norms) => {
            let cols = shape(*x)[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &norm) in norms.iter().enumerate() {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gy = &g[r * cols..(r + 1) * cols];
                    let dot = y.iter().zip(gy).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for j in 0..cols {
                        gx[r * cols + j] = gx[r * cols + j] + (gy[j] - y[j] * dot) / norm;
                    }
                }
            }
        }
        Op::Custom(inputs, op) => {
            let ins: Vec<&DenseArray<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            let mut local: Vec<Vec<T>> = ins.iter().map(|a| vec![T::zero(); a.numel()]).collect();
            op.backward(&ins, &nodes[i].value, g, &mut local);
            for (&v, lg) in inputs.iter().zip(&local) {
                if let Some(gv) = slot(nodes, grads, v) {
                    add_into(gv, lg);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(rows: &[&[f64]]) -> DenseArray<f64> {
        DenseArray::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_arithmetic() {
        let mut t = Tape::<f64>::new();
        let i = t.constant(arr(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let v = t.constant(arr(&[&[3.0], &[4.0]])).unwrap();
        let r = t.matmul(i, v).unwrap();
        assert_eq!(t.value(r).data(), &[3.0, 4.0]);
        let a = t.constant(arr(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = t.constant(arr(&[&[5.0], &[6.0]])).unwrap();
        let r = t.matmul(a, b).unwrap();
        assert_eq!(t.value(r).data(), &[17.0, 39.0]);
        assert_eq!(t.shape(r), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(DenseArray::zeros(&[2, 3])).unwrap();
        let b = t.constant(DenseArray::zeros(&[2, 3])).unwrap();
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn batched_matmul_broadcasts_shared_operand() {
        let mut t = Tape::<f64>::new();
        let a = t
            .constant(DenseArray::from_f64(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let b = t.constant(arr(&[&[1.0], &[1.0]])).unwrap();
        let r = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(r), &[2, 1, 1]);
        assert_eq!(t.value(r).data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(arr(&[&[0.0, 0.0], &[1000.0, 1000.0]])).unwrap();
        let y = t.softmax(x, 1).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
        let mut t32 = Tape::<f32>::new();
        let x = t32
            .constant(DenseArray::from_f64(&[3], &[1000.0, -1000.0, 999.0]).unwrap())
            .unwrap();
        let y = t32.softmax(x, 0).unwrap();
        let s: f32 = t32.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_edge_rows() {
        let mut t = Tape::<f64>::new();
        let g = t.constant(DenseArray::filled(&[4], 1.0)).unwrap();
        let b = t.constant(DenseArray::zeros(&[4])).unwrap();
        let x = t.constant(arr(&[&[5.0, 5.0, 5.0, 5.0]])).unwrap();
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.0; 4]);

        let g = t.constant(DenseArray::filled(&[2], 1.0)).unwrap();
        let b = t.constant(DenseArray::zeros(&[2])).unwrap();
        let x = t.constant(arr(&[&[1.0, -1.0]])).unwrap();
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        let v = t.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_center_and_asymptote() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(DenseArray::from_f64(&[2], &[0.0, 10.0]).unwrap()).unwrap();
        let y = t.gelu(x).unwrap();
        let v = t.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn max_pool_values_and_tie_routing() {
        let mut t = Tape::<f64>::new();
        let x = t.input(arr(&[&[1.0, 5.0], &[3.0, 2.0]])).unwrap();
        let y = t.max_pool_over_axis(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 5.0]);

        let single = t.input(arr(&[&[4.0, -1.0]])).unwrap();
        let id = t.max_pool_over_axis(single, 0).unwrap();
        assert_eq!(t.value(id).data(), &[4.0, -1.0]);

        let tie = t.input(arr(&[&[2.0], &[2.0]])).unwrap();
        let m = t.max_pool_over_axis(tie, 0).unwrap();
        let s = t.sum(m).unwrap();
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.wrt(tie).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn embedding_lookup_gathers_and_scatter_adds() {
        let mut t = Tape::<f64>::new();
        let table = t
            .input(arr(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]))
            .unwrap();
        let first = t.embedding_lookup(table, &[0]).unwrap();
        assert_eq!(t.value(first).data(), &[1.0, 0.0, 0.0]);
        let rep = t.embedding_lookup(table, &[2, 2]).unwrap();
        assert_eq!(t.value(rep).row(0), t.value(rep).row(1));
        let s = t.sum(rep).unwrap();
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.wrt(table).unwrap(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
        match t.embedding_lookup(table, &[3]) {
            Err(Error::Index { index: 3, len: 3 }) => {}
            other => panic!("expected index error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn permute_roundtrip() {
        let mut t = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = t.constant(DenseArray::from_f64(&[2, 3, 4], &data).unwrap()).unwrap();
        let p = t.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape(p), &[4, 2, 3]);
        // out[k, i, j] = x[i, j, k]
        assert_eq!(t.value(p).data()[6 + 3 + 2], data[12 + 2 * 4 + 1]);
        let back = t.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(t.value(back).data(), &data[..]);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut t = Tape::<f64>::new();
        assert!(matches!(
            t.constant(DenseArray::from_f64(&[1], &[f64::NAN]).unwrap()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn zero_norm_row_is_degenerate() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(arr(&[&[0.0, 0.0]])).unwrap();
        assert!(matches!(t.l2_normalize_rows(x), Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn dropout_is_identity_outside_training() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(arr(&[&[1.0, 2.0]])).unwrap();
        assert_eq!(t.dropout(x, 0.1).unwrap(), x);
        let mut tt = Tape::<f64>::new().training(3);
        let x = tt.constant(DenseArray::filled(&[1000], 1.0)).unwrap();
        let y = tt.dropout(x, 0.5).unwrap();
        let zeros = tt.value(y).data().iter().filter(|&&v| v == 0.0).count();
        assert!((400..600).contains(&zeros));
    }
}
