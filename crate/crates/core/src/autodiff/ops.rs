//! Forward kernels and their vector-Jacobian products.

use super::graph::{Graph, Var};
use super::{Array, AutodiffError, Scalar};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Geometry of a time-major 1D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub len_in: usize,
    pub len_out: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Geometry of an HWC 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

/// Output length of a strided, padded convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(super) enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv1dGeom,
        cols: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
        cols: Vec<T>,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    InterpRows {
        x: Var,
        taps: Vec<(usize, usize, T)>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse(Var, Var),
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn mismatch(kernel: &'static str, left: &[usize], right: &[usize]) -> AutodiffError {
    AutodiffError::Shape {
        kernel,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// Gradient buffer for `v`, allocated on first use. `None` when `v` does not
/// take gradients.
fn slot<'a, T: Scalar>(
    graph: &Graph<'_, T>,
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut [T]> {
    let node = &graph.nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![T::zero(); len])
            .as_mut_slice(),
    )
}

impl<T: Scalar> Op<T> {
    pub(super) fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::MatMul(a, b)
            | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Narrow { x, .. }
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::InterpRows { x, .. }
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv1d { x, w, b, .. } | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Propagates `g` (gradient of this node's output) into its parents.
    pub(super) fn backward(
        &self,
        graph: &Graph<'_, T>,
        out: &Array<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let val = |v: &Var| graph.nodes[v.0].value.data();
        match self {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                for p in [a, b] {
                    if let Some(d) = slot(graph, grads, *p) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d = *d + *g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = slot(graph, grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d = *d + *g);
                }
                if let Some(d) = slot(graph, grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d = *d - *g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).to_vec(), val(b).to_vec());
                if let Some(d) = slot(graph, grads, *a) {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * bv[i];
                    }
                }
                if let Some(d) = slot(graph, grads, *b) {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * av[i];
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(d) = slot(graph, grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d = *d + *g);
                }
                if let Some(d) = slot(graph, grads, *b) {
                    let n = d.len();
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d = *d + *g);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = slot(graph, grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d = *d + *g * *c);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = graph.nodes[a.0].value.dims2().unwrap();
                let n = last_dim(out.shape());
                let av = val(a);
                let bv = val(b);
                if graph.nodes[a.0].requires_grad {
                    let d = slot(graph, grads, *a).unwrap();
                    T::gemm(m, n, k, T::one(), g, (n, 1), bv, (1, n), T::one(), d, k);
                }
                if graph.nodes[b.0].requires_grad {
                    let d = slot(graph, grads, *b).unwrap();
                    T::gemm(k, m, n, T::one(), av, (1, k), g, (n, 1), T::one(), d, n);
                }
            }
            Op::Transpose(x) => {
                if let Some(d) = slot(graph, grads, *x) {
                    let (r, c) = graph.nodes[x.0].value.dims2().unwrap();
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = d[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = slot(graph, grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d = *d + *g);
                }
            }
            Op::Narrow { x, axis, start } => {
                if let Some(d) = slot(graph, grads, *x) {
                    let (outer, ext, inner) = split_axis(graph.nodes[x.0].value.shape(), *axis);
                    let len = out.shape()[*axis];
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let dst =
                            &mut d[(o * ext + start) * inner..(o * ext + start + len) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, g)| *d = *d + *g);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let ext = graph.nodes[p.0].value.shape()[*axis];
                    if let Some(d) = slot(graph, grads, *p) {
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            let dst = &mut d[o * ext * inner..(o + 1) * ext * inner];
                            dst.iter_mut().zip(src).for_each(|(d, g)| *d = *d + *g);
                        }
                    }
                    offset += ext;
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let kc = geom.kernel * geom.c_in;
                conv_weight_grads(graph, grads, *w, *b, cols, g, geom.len_out, kc, geom.c_out);
                if graph.nodes[x.0].requires_grad {
                    let dcols = conv_col_grads(val(w), g, geom.len_out, kc, geom.c_out);
                    let d = slot(graph, grads, *x).unwrap();
                    for o in 0..geom.len_out {
                        for k in 0..geom.kernel {
                            let Some(src) = tap(o, k, geom.stride, geom.pad, geom.len_in) else {
                                continue;
                            };
                            let from = &dcols[o * kc + k * geom.c_in..o * kc + (k + 1) * geom.c_in];
                            let to = &mut d[src * geom.c_in..(src + 1) * geom.c_in];
                            to.iter_mut().zip(from).for_each(|(d, g)| *d = *d + *g);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (kh, kw) = geom.kernel;
                let kc = kh * kw * geom.c_in;
                let positions = geom.h_out * geom.w_out;
                conv_weight_grads(graph, grads, *w, *b, cols, g, positions, kc, geom.c_out);
                if graph.nodes[x.0].requires_grad {
                    let dcols = conv_col_grads(val(w), g, positions, kc, geom.c_out);
                    let d = slot(graph, grads, *x).unwrap();
                    let ci = geom.c_in;
                    for oy in 0..geom.h_out {
                        for ky in 0..kh {
                            let Some(iy) = tap(oy, ky, geom.stride.0, geom.pad.0, geom.h_in) else {
                                continue;
                            };
                            for ox in 0..geom.w_out {
                                let row = (oy * geom.w_out + ox) * kc;
                                for kx in 0..kw {
                                    let Some(ix) =
                                        tap(ox, kx, geom.stride.1, geom.pad.1, geom.w_in)
                                    else {
                                        continue;
                                    };
                                    let from = &dcols
                                        [row + (ky * kw + kx) * ci..row + (ky * kw + kx + 1) * ci];
                                    let at = (iy * geom.w_in + ix) * ci;
                                    d[at..at + ci]
                                        .iter_mut()
                                        .zip(from)
                                        .for_each(|(d, g)| *d = *d + *g);
                                }
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = slot(graph, grads, *x) {
                    let y = out.data();
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = slot(graph, grads, *x) {
                    let y = out.data();
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * (T::one() - y[i] * y[i]);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(d) = slot(graph, grads, *x) {
                    let y = out.data();
                    for i in 0..d.len() {
                        if y[i] > T::zero() {
                            d[i] = d[i] + g[i];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(d) = slot(graph, grads, *x) {
                    let n = last_dim(out.shape());
                    for ((drow, grow), yrow) in
                        d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(g, y)| *g * *y).sum();
                        for i in 0..n {
                            drow[i] = drow[i] + yrow[i] * (grow[i] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = last_dim(out.shape());
                if let Some(d) = slot(graph, grads, *beta) {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d = *d + *g);
                    }
                }
                if let Some(d) = slot(graph, grads, *gamma) {
                    for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for i in 0..n {
                            d[i] = d[i] + grow[i] * xrow[i];
                        }
                    }
                }
                if graph.nodes[x.0].requires_grad {
                    let gam = val(gamma).to_vec();
                    let d = slot(graph, grads, *x).unwrap();
                    let inv_n = T::one() / T::of(n as f64);
                    for (r, ((drow, grow), xrow)) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let dxhat: Vec<T> = (0..n).map(|i| grow[i] * gam[i]).collect();
                        let mean_d: T = dxhat.iter().copied().sum::<T>() * inv_n;
                        let mean_dx: T =
                            dxhat.iter().zip(xrow).map(|(a, b)| *a * *b).sum::<T>() * inv_n;
                        for i in 0..n {
                            drow[i] = drow[i] + rstd[r] * (dxhat[i] - mean_d - xrow[i] * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(d) = slot(graph, grads, *table) {
                    let n = last_dim(out.shape());
                    for (row, id) in ids.iter().enumerate() {
                        let dst = &mut d[id * n..(id + 1) * n];
                        dst.iter_mut()
                            .zip(&g[row * n..(row + 1) * n])
                            .for_each(|(d, g)| *d = *d + *g);
                    }
                }
            }
            Op::InterpRows { x, taps } => {
                if let Some(d) = slot(graph, grads, *x) {
                    let n = last_dim(out.shape());
                    for (row, &(i0, i1, frac)) in taps.iter().enumerate() {
                        let grow = &g[row * n..(row + 1) * n];
                        let w0 = T::one() - frac;
                        for j in 0..n {
                            d[i0 * n + j] = d[i0 * n + j] + w0 * grow[j];
                            d[i1 * n + j] = d[i1 * n + j] + frac * grow[j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = slot(graph, grads, *x) {
                    d.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = slot(graph, grads, *x) {
                    let s = g[0] / T::of(d.len() as f64);
                    d.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(d) = slot(graph, grads, *logits) {
                    let v = probs.len() / targets.len();
                    let s = g[0] / T::of(targets.len() as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            d[r * v + j] = d[r * v + j] + s * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(a).to_vec(), val(b).to_vec());
                let s = g[0] * T::of(2.0) / T::of(av.len() as f64);
                if let Some(d) = slot(graph, grads, *a) {
                    for i in 0..d.len() {
                        d[i] = d[i] + s * (av[i] - bv[i]);
                    }
                }
                if let Some(d) = slot(graph, grads, *b) {
                    for i in 0..d.len() {
                        d[i] = d[i] - s * (av[i] - bv[i]);
                    }
                }
            }
        }
    }
}

/// Input index read by output position `o` at kernel tap `k`, if inside the
/// unpadded input.
#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let pos = (o * stride + k).checked_sub(pad)?;
    (pos < len).then_some(pos)
}

#[allow(clippy::too_many_arguments)]
fn conv_weight_grads<T: Scalar>(
    graph: &Graph<'_, T>,
    grads: &mut [Option<Vec<T>>],
    w: Var,
    b: Var,
    cols: &[T],
    g: &[T],
    rows: usize,
    kc: usize,
    c_out: usize,
) {
    if let Some(d) = slot(graph, grads, w) {
        T::gemm(
            kc,
            rows,
            c_out,
            T::one(),
            cols,
            (1, kc),
            g,
            (c_out, 1),
            T::one(),
            d,
            c_out,
        );
    }
    if let Some(d) = slot(graph, grads, b) {
        for row in g.chunks(c_out) {
            d.iter_mut().zip(row).for_each(|(d, g)| *d = *d + *g);
        }
    }
}

fn conv_col_grads<T: Scalar>(w: &[T], g: &[T], rows: usize, kc: usize, c_out: usize) -> Vec<T> {
    let mut dcols = vec![T::zero(); rows * kc];
    T::gemm(
        rows,
        c_out,
        kc,
        T::one(),
        g,
        (c_out, 1),
        w,
        (1, c_out),
        T::zero(),
        &mut dcols,
        kc,
    );
    dcols
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        (k, 1),
        b,
        (n, 1),
        T::zero(),
        &mut c,
        n,
    );
    c
}

fn add_bias_rows<T: Scalar>(y: &mut [T], bias: &[T]) {
    for row in y.chunks_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(y, b)| *y = *y + *b);
    }
}

impl<T: Scalar> Graph<'_, T> {
    fn same_shape(&self, kernel: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(kernel, sa, sb));
        }
        self.check_finite(kernel, &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Array<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Array::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Array<T> {
        let xv = self.value(x);
        Array::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| f(*v)).collect(),
        )
        .expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `x + bias` broadcast along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.is_empty() || last_dim(sx) != sb[0] {
            return Err(mismatch("add_bias", sx, sb));
        }
        self.check_finite("add_bias", &[x, bias])?;
        let mut v = self.value(x).clone();
        add_bias_rows(v.data_mut(), self.value(bias).data());
        Ok(self.push(v, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, AutodiffError> {
        self.check_finite("scale", &[x])?;
        let v = self.map(x, |v| v * c);
        Ok(self.push(v, Op::Scale(x, c)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(mismatch("matmul", &sa, &sb)),
        };
        self.check_finite("matmul", &[a, b])?;
        let c = matmul_into(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Array::new(vec![m, n], c)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let Some((r, c)) = self.value(x).dims2() else {
            return Err(mismatch("transpose", self.shape(x), &[]));
        };
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv[i * c + j];
            }
        }
        Ok(self.push(Array::new(vec![c, r], data)?, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let v = Array::new(shape.to_vec(), self.value(x).data().to_vec())?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(AutodiffError::Index {
                kernel: "narrow",
                index: start + len,
                extent: shape.get(axis).copied().unwrap_or(0),
            });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&xv[(o * ext + start) * inner..(o * ext + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Array::new(out_shape, data)?, Op::Narrow { x, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or(AutodiffError::Empty { kernel: "concat" })?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(mismatch("concat", &first, &[]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        self.check_finite("concat", parts)?;
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let ext = self.shape(*p)[axis];
                data.extend_from_slice(
                    &self.value(*p).data()[o * ext * inner..(o + 1) * ext * inner],
                );
            }
        }
        Ok(self.push(
            Array::new(out_shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Time-major convolution: `x` is `[len, c_in]`, `w` is
    /// `[kernel, c_in, c_out]`, `b` is `[c_out]`; output `[len_out, c_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutodiffError> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        let (len_in, c_in, kernel, c_out) = match (sx.as_slice(), sw.as_slice()) {
            ([l, c], [k, c2, o]) if c == c2 => (*l, *c, *k, *o),
            _ => return Err(mismatch("conv1d", &sx, &sw)),
        };
        if sb != [c_out] {
            return Err(mismatch("conv1d", &sw, &sb));
        }
        let len_out = conv_out_len(len_in, kernel, stride, pad)
            .ok_or_else(|| mismatch("conv1d", &sx, &sw))?;
        self.check_finite("conv1d", &[x, w, b])?;
        let geom = Conv1dGeom {
            len_in,
            len_out,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        };
        let kc = kernel * c_in;
        let xv = self.value(x).data();
        let mut cols = vec![T::zero(); len_out * kc];
        for o in 0..len_out {
            for k in 0..kernel {
                if let Some(src) = tap(o, k, stride, pad, len_in) {
                    cols[o * kc + k * c_in..o * kc + (k + 1) * c_in]
                        .copy_from_slice(&xv[src * c_in..(src + 1) * c_in]);
                }
            }
        }
        let mut y = matmul_into(&cols, self.value(w).data(), len_out, kc, c_out);
        add_bias_rows(&mut y, self.value(b).data());
        let v = Array::new(vec![len_out, c_out], y)?;
        Ok(self.push(
            v,
            Op::Conv1d {
                x,
                w,
                b,
                geom,
                cols,
            },
        ))
    }

    /// HWC convolution: `x` is `[h, w, c_in]`, `w` is
    /// `[kh, kw, c_in, c_out]`, `b` is `[c_out]`; output `[h_out, w_out, c_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var, AutodiffError> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        let (h_in, w_in, c_in, kh, kw, c_out) = match (sx.as_slice(), sw.as_slice()) {
            ([h, wd, c], [kh, kw, c2, o]) if c == c2 => (*h, *wd, *c, *kh, *kw, *o),
            _ => return Err(mismatch("conv2d", &sx, &sw)),
        };
        if sb != [c_out] {
            return Err(mismatch("conv2d", &sw, &sb));
        }
        let h_out =
            conv_out_len(h_in, kh, stride.0, pad.0).ok_or_else(|| mismatch("conv2d", &sx, &sw))?;
        let w_out =
            conv_out_len(w_in, kw, stride.1, pad.1).ok_or_else(|| mismatch("conv2d", &sx, &sw))?;
        self.check_finite("conv2d", &[x, w, b])?;
        let geom = Conv2dGeom {
            h_in,
            w_in,
            h_out,
            w_out,
            c_in,
            c_out,
            kernel: (kh, kw),
            stride,
            pad,
        };
        let kc = kh * kw * c_in;
        let xv = self.value(x).data();
        let mut cols = vec![T::zero(); h_out * w_out * kc];
        for oy in 0..h_out {
            for ky in 0..kh {
                let Some(iy) = tap(oy, ky, stride.0, pad.0, h_in) else {
                    continue;
                };
                for ox in 0..w_out {
                    let row = (oy * w_out + ox) * kc;
                    for kx in 0..kw {
                        let Some(ix) = tap(ox, kx, stride.1, pad.1, w_in) else {
                            continue;
                        };
                        let at = (iy * w_in + ix) * c_in;
                        cols[row + (ky * kw + kx) * c_in..row + (ky * kw + kx + 1) * c_in]
                            .copy_from_slice(&xv[at..at + c_in]);
                    }
                }
            }
        }
        let mut y = matmul_into(&cols, self.value(w).data(), h_out * w_out, kc, c_out);
        add_bias_rows(&mut y, self.value(b).data());
        let v = Array::new(vec![h_out, w_out, c_out], y)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.check_finite("sigmoid", &[x])?;
        let v = self.map(x, |v| T::one() / (T::one() + (-v).exp()));
        Ok(self.push(v, Op::Sigmoid(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.check_finite("tanh", &[x])?;
        let v = self.map(x, |v| v.tanh());
        Ok(self.push(v, Op::Tanh(x)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.check_finite("relu", &[x])?;
        let v = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(v, Op::Relu(x)))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.check_finite("softmax", &[x])?;
        let mut v = self.value(x).clone();
        let n = last_dim(v.shape());
        for row in v.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(v, Op::Softmax(x)))
    }

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        let n = last_dim(self.shape(x));
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(mismatch("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        self.check_finite("layer_norm", &[x, gamma, beta])?;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / n;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut y = Vec::with_capacity(xv.len());
        let inv_n = T::one() / T::of(n as f64);
        for row in xv.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            rstd.push(r);
            for (i, v) in row.iter().enumerate() {
                let h = (*v - mean) * r;
                xhat.push(h);
                y.push(h * gv[i] + bv[i]);
            }
        }
        let v = Array::new(xv.shape().to_vec(), y)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Rows of `table` (`[vocab, width]`) selected by `ids`; output `[ids.len(), width]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let Some((rows, width)) = self.value(table).dims2() else {
            return Err(mismatch("embedding", self.shape(table), &[]));
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::Index {
                kernel: "embedding",
                index: bad,
                extent: rows,
            });
        }
        self.check_finite("embedding", &[table])?;
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let v = Array::new(vec![ids.len(), width], data)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Linear interpolation between rows of `x` (`[n, width]`) at fractional
    /// row coordinates, clamped to `[0, n - 1]`. Output `[coords.len(), width]`.
    pub fn interp_rows(&mut self, x: Var, coords: &[T]) -> Result<Var, AutodiffError> {
        let Some((rows, width)) = self.value(x).dims2() else {
            return Err(mismatch("interp_rows", self.shape(x), &[]));
        };
        if rows == 0 {
            return Err(AutodiffError::Empty {
                kernel: "interp_rows",
            });
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(AutodiffError::NonFinite {
                kernel: "interp_rows",
            });
        }
        self.check_finite("interp_rows", &[x])?;
        let last = rows - 1;
        let taps: Vec<(usize, usize, T)> = coords
            .iter()
            .map(|&c| {
                let c = c.max(T::zero()).min(T::of(last as f64));
                let i0 = c.floor().to_usize().unwrap_or(0).min(last);
                if i0 == last {
                    (last, last, T::zero())
                } else {
                    (i0, i0 + 1, c - T::of(i0 as f64))
                }
            })
            .collect();
        let xv = self.value(x);
        let mut data = Vec::with_capacity(coords.len() * width);
        for &(i0, i1, frac) in &taps {
            let (a, b) = (xv.row(i0), xv.row(i1));
            let w0 = T::one() - frac;
            data.extend(a.iter().zip(b).map(|(a, b)| w0 * *a + frac * *b));
        }
        let v = Array::new(vec![coords.len(), width], data)?;
        Ok(self.push(v, Op::InterpRows { x, taps }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.check_finite("sum", &[x])?;
        let s = self.value(x).data().iter().copied().sum();
        Ok(self.push(Array::scalar(s), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(AutodiffError::Empty { kernel: "mean" });
        }
        self.check_finite("mean", &[x])?;
        let s: T = self.value(x).data().iter().copied().sum();
        Ok(self.push(Array::scalar(s / T::of(n as f64)), Op::Mean(x)))
    }

    /// Mean over rows of `-log softmax(logits)[target]`; `logits` is `[rows, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let Some((rows, classes)) = self.value(logits).dims2() else {
            return Err(mismatch(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        };
        if rows != targets.len() || rows == 0 {
            return Err(mismatch(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(AutodiffError::Index {
                kernel: "cross_entropy",
                index: bad,
                extent: classes,
            });
        }
        self.check_finite("cross_entropy", &[logits])?;
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = T::zero();
        for (row, &t) in lv.chunks(classes).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[t]);
            probs.extend(row.iter().map(|v| (*v - lse).exp()));
        }
        let loss = total / T::of(rows as f64);
        Ok(self.push(
            Array::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(AutodiffError::Empty { kernel: "mse" });
        }
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (*x - *y) * (*x - *y))
            .sum();
        Ok(self.push(Array::scalar(s / T::of(n as f64)), Op::Mse(a, b)))
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
