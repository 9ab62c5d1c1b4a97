//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! Every forward pass records its operations on a fresh [`Graph`]; calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every node that depends on a parameter or variable.

use std::collections::HashMap;

use crate::kernels::{col2im, im2col, sparse_cols, sparse_cols_adjoint, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MeanN(Vec<Var>),
    Film { x: Var, gamma: Var, beta: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Concat(Vec<Var>),
    Reshape(Var),
    Slice { x: Var, offset: usize },
    AvgPool2(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Gather { x: Var, idx: Vec<usize> },
    SparseConv { map: Var, w: Var, centers: Vec<(usize, usize)>, dil: usize },
    MeanCols(Var),
    Softmax(Var),
    Outer(Var, Var),
    ScatterCells { map: Var, rows: Var, cells: Vec<usize> },
    SoftmaxCe { logits: Var, target: usize },
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op,
    needs_grad: bool,
}

/// Tape of one forward computation.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Scalar> Gradients<F> {
    pub fn of(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// Accumulate parameter gradients into `acc` (indexed by [`ParamId`]).
    pub fn accumulate_params(&self, acc: &mut [Tensor<F>]) {
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                acc[id.0].add_assign(g);
            }
        }
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> ! {
    panic!("{op}: incompatible shapes {a:?} and {b:?}")
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked (used by gradient checks on inputs).
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Param, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// 2-D convolution of a `[C, H, W]` map with `[O, C, kh, kw]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, dil: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            shape_err("conv2d", &xs, &ws);
        }
        let geom = ConvGeom { c: xs[0], h: xs[1], w: xs[2], kh: ws[2], kw: ws[3], stride, pad, dil };
        let (ho, wo) = geom.out_hw();
        let p = ho * wo;
        let o = ws[0];
        let mut out = vec![F::zero(); o * p];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), o, "conv2d bias length");
            for (oc, row) in out.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[oc]);
            }
        }
        let k = geom.patch();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if geom.is_pointwise() {
            F::gemm(o, k, p, F::one(), wv, k as isize, 1, xv, p as isize, 1, F::one(), &mut out, p as isize, 1);
        } else {
            let cols = im2col(xv, &geom);
            F::gemm(o, k, p, F::one(), wv, k as isize, 1, &cols, p as isize, 1, F::one(), &mut out, p as isize, 1);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(&[o, ho, wo], out), Op::Conv2d { x, w, b, geom }, &inputs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = F::of(slope);
        let out = self.value(x).map(|v| if v > F::zero() { v } else { v * s });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    fn zip(&self, a: Var, b: Var, op: &str, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            shape_err(op, ta.shape(), tb.shape());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, "add", |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, "sub", |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, "mul", |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let f = F::of(s);
        let out = self.value(x).map(|v| v * f);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Arithmetic mean of equally shaped tensors.
    pub fn mean_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "mean_n of nothing");
        let mut acc = self.value(xs[0]).clone();
        for &v in &xs[1..] {
            let t = self.value(v);
            if t.shape() != acc.shape() {
                shape_err("mean_n", acc.shape(), t.shape());
            }
            acc.add_assign(t);
        }
        acc.scale(F::one() / F::of(xs.len() as f64));
        self.push(acc, Op::MeanN(xs.to_vec()), xs)
    }

    /// `out[c, ..] = gamma[c] * x[c, ..] + beta[c]` (channel-major broadcast).
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let c = xs[0];
        assert_eq!(self.value(gamma).len(), c, "film: gamma length must equal channels");
        assert_eq!(self.value(beta).len(), c, "film: beta length must equal channels");
        let per = self.value(x).len() / c;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Vec::with_capacity(xv.len());
        for ch in 0..c {
            let (g, b) = (gv[ch], bv[ch]);
            out.extend(xv[ch * per..(ch + 1) * per].iter().map(|&v| g * v + b));
        }
        self.push(Tensor::new(&xs, out), Op::Film { x, gamma, beta }, &[x, gamma, beta])
    }

    /// Affine map on a vector `[in]` or on rows `[R, in]`: `x Wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let n_in = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != n_in {
            shape_err("linear", &xs, &ws);
        }
        let rows = self.value(x).len() / n_in;
        let n_out = ws[0];
        let mut out = vec![F::zero(); rows * n_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in out.chunks_mut(n_out) {
                r.copy_from_slice(bias);
            }
        }
        F::gemm(
            rows,
            n_in,
            n_out,
            F::one(),
            self.value(x).data(),
            n_in as isize,
            1,
            self.value(w).data(),
            1,
            n_in as isize,
            F::one(),
            &mut out,
            n_out as isize,
            1,
        );
        let shape = if xs.len() == 1 { vec![n_out] } else { vec![rows, n_out] };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(&shape, out), Op::Linear { x, w, b }, &inputs)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs 2-D operands");
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            shape_err("matmul", &sa, &sb);
        }
        let (rsa, csa) = if ta { (1, sa[1] as isize) } else { (sa[1] as isize, 1) };
        let (rsb, csb) = if tb { (1, sb[1] as isize) } else { (sb[1] as isize, 1) };
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            ka,
            n,
            F::one(),
            self.value(a).data(),
            rsa,
            csa,
            self.value(b).data(),
            rsb,
            csb,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.push(Tensor::new(&[m, n], out), Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let first = self.shape(xs[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.value(v);
            if t.shape()[1..] != first[1..] {
                shape_err("concat", &first, t.shape());
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = lead;
        self.push(Tensor::new(&shape, data), Op::Concat(xs.to_vec()), xs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Contiguous flat slice `[offset, offset + prod(shape))` reshaped to `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        let data = self.value(x).data()[offset..offset + n].to_vec();
        self.push(Tensor::new(shape, data), Op::Slice { x, offset }, &[x])
    }

    /// 2x2 average pooling of a `[C, H, W]` map (H, W even).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sizes");
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let quarter = F::of(0.25);
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let sum = xv.at3(ch, 2 * i, 2 * j)
                        + xv.at3(ch, 2 * i, 2 * j + 1)
                        + xv.at3(ch, 2 * i + 1, 2 * j)
                        + xv.at3(ch, 2 * i + 1, 2 * j + 1);
                    out.push(sum * quarter);
                }
            }
        }
        self.push(Tensor::new(&[c, ho, wo], out), Op::AvgPool2(x), &[x])
    }

    /// 2x2 max pooling of a `[C, H, W]` map (H, W even). Gradient goes to
    /// the first maximal element of each window.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even sizes");
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = (ch * h + 2 * i) * w + 2 * j;
                    let best = [base, base + 1, base + w, base + w + 1]
                        .into_iter()
                        .reduce(|a, b| if xv[b] > xv[a] { b } else { a })
                        .expect("non-empty window");
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(Tensor::new(&[c, ho, wo], out), Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` map.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(c * h * w * 4);
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out.push(xv.at3(ch, i / 2, j / 2));
                }
            }
        }
        self.push(Tensor::new(&[c, 2 * h, 2 * w], out), Op::Upsample2(x), &[x])
    }

    /// Pick flat elements; result has shape `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x).data();
        let data = idx.iter().map(|&i| xv[i]).collect();
        self.push(Tensor::new(&[idx.len()], data), Op::Gather { x, idx: idx.to_vec() }, &[x])
    }

    /// 3x3 dilated convolution (no bias, zero padding) of a `[C, H, W]` map
    /// evaluated only at `centers`; output `[O, K]`.
    pub fn sparse_conv(&mut self, map: Var, w: Var, centers: &[(usize, usize)], dil: usize) -> Var {
        let ms = self.shape(map).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != ms[0] || ws[2] != 3 || ws[3] != 3 {
            shape_err("sparse_conv", &ms, &ws);
        }
        let dims = (ms[0], ms[1], ms[2]);
        let k = centers.len();
        let cols = sparse_cols(self.value(map).data(), dims, centers, dil);
        let o = ws[0];
        let kk = ms[0] * 9;
        let mut out = vec![F::zero(); o * k];
        F::gemm(o, kk, k, F::one(), self.value(w).data(), kk as isize, 1, &cols, k as isize, 1, F::zero(), &mut out, k as isize, 1);
        let op = Op::SparseConv { map, w, centers: centers.to_vec(), dil };
        self.push(Tensor::new(&[o, k], out), op, &[map, w])
    }

    /// Mean over the columns of `[C, K]`, giving `[C]`.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, k) = (s[0], s[1]);
        let xv = self.value(x).data();
        let inv = F::one() / F::of(k as f64);
        let data = (0..c).map(|r| xv[r * k..(r + 1) * k].iter().copied().sum::<F>() * inv).collect();
        self.push(Tensor::new(&[c], data), Op::MeanCols(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax(self.value(x));
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Outer product of two vectors: `out[i, j] = a[i] * b[j]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(av.len() * bv.len());
        for &x in av {
            data.extend(bv.iter().map(|&y| x * y));
        }
        let shape = [av.len(), bv.len()];
        self.push(Tensor::new(&shape, data), Op::Outer(a, b), &[a, b])
    }

    /// `map` (`[C, H, W]`) plus column k of `rows` (`[C, K]`) added at flat
    /// spatial cell `cells[k]`.
    pub fn scatter_cells(&mut self, map: Var, rows: Var, cells: &[usize]) -> Var {
        let ms = self.shape(map).to_vec();
        let rs = self.shape(rows).to_vec();
        if rs.len() != 2 || rs[0] != ms[0] || rs[1] != cells.len() {
            shape_err("scatter_cells", &ms, &rs);
        }
        let hw = ms[1] * ms[2];
        let mut out = self.value(map).clone();
        let rv = self.value(rows).data();
        let k = cells.len();
        for c in 0..ms[0] {
            for (n, &cell) in cells.iter().enumerate() {
                out.data_mut()[c * hw + cell] += rv[c * k + n];
            }
        }
        let op = Op::ScatterCells { map, rows, cells: cells.to_vec() };
        self.push(out, op, &[map, rows])
    }

    /// Softmax cross-entropy of a logit vector against one true class.
    pub fn softmax_ce(&mut self, logits: Var, target: usize) -> Var {
        let lv = self.value(logits).data();
        assert!(target < lv.len(), "softmax_ce target out of range");
        let loss = log_sum_exp(lv) - lv[target];
        self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, target }, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![F::one()]));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let acc = |grads: &mut [Option<Tensor<F>>], v: Var, t: Tensor<F>| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, geom } => {
                let (ho, wo) = geom.out_hw();
                let p = ho * wo;
                let o = self.shape(*w)[0];
                let k = geom.patch();
                let xv = self.value(*x).data();
                let cols_owned;
                let cols: &[F] = if geom.is_pointwise() {
                    xv
                } else {
                    cols_owned = im2col(xv, geom);
                    &cols_owned
                };
                if self.wants(*w) {
                    let mut dw = vec![F::zero(); o * k];
                    F::gemm(o, p, k, F::one(), gd, p as isize, 1, cols, 1, p as isize, F::zero(), &mut dw, k as isize, 1);
                    acc(grads, *w, Tensor::new(self.shape(*w), dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = gd.chunks(p).map(|r| r.iter().copied().sum()).collect();
                        acc(grads, *b, Tensor::new(&[o], db));
                    }
                }
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    let mut dcols = vec![F::zero(); k * p];
                    F::gemm(k, o, p, F::one(), wv, 1, k as isize, gd, p as isize, 1, F::zero(), &mut dcols, p as isize, 1);
                    let dx = if geom.is_pointwise() {
                        dcols
                    } else {
                        let mut dx = vec![F::zero(); geom.c * geom.h * geom.w];
                        col2im(&dcols, geom, &mut dx);
                        dx
                    };
                    acc(grads, *x, Tensor::new(self.shape(*x), dx));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let s = F::of(*slope);
                let xv = self.value(*x).data();
                let d = xv.iter().zip(gd).map(|(&v, &gv)| if v > F::zero() { gv } else { gv * s }).collect();
                acc(grads, *x, Tensor::new(g.shape(), d));
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.data();
                let d = y.iter().zip(gd).map(|(&s, &gv)| gv * s * (F::one() - s)).collect();
                acc(grads, *x, Tensor::new(g.shape(), d));
            }
            Op::Tanh(x) => {
                let y = self.nodes[idx].value.data();
                let d = y.iter().zip(gd).map(|(&t, &gv)| gv * (F::one() - t * t)).collect();
                acc(grads, *x, Tensor::new(g.shape(), d));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let d = gd.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    acc(grads, *a, Tensor::new(g.shape(), d));
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let d = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    acc(grads, *b, Tensor::new(g.shape(), d));
                }
            }
            Op::Scale(x, s) => {
                let f = F::of(*s);
                acc(grads, *x, g.map(|v| v * f));
            }
            Op::MeanN(xs) => {
                let f = F::one() / F::of(xs.len() as f64);
                for &v in xs {
                    if self.wants(v) {
                        acc(grads, v, g.map(|t| t * f));
                    }
                }
            }
            Op::Film { x, gamma, beta } => {
                let c = self.shape(*x)[0];
                let per = g.len() / c;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut d = Vec::with_capacity(gd.len());
                    for ch in 0..c {
                        d.extend(gd[ch * per..(ch + 1) * per].iter().map(|&t| t * gv[ch]));
                    }
                    acc(grads, *x, Tensor::new(g.shape(), d));
                }
                if self.wants(*gamma) {
                    let d = (0..c)
                        .map(|ch| {
                            let r = ch * per..(ch + 1) * per;
                            gd[r.clone()].iter().zip(&xv[r]).map(|(&a, &b)| a * b).sum()
                        })
                        .collect();
                    acc(grads, *gamma, Tensor::new(self.shape(*gamma), d));
                }
                if self.wants(*beta) {
                    let d = (0..c).map(|ch| gd[ch * per..(ch + 1) * per].iter().copied().sum()).collect();
                    acc(grads, *beta, Tensor::new(self.shape(*beta), d));
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (n_out, n_in) = (ws[0], ws[1]);
                let rows = g.len() / n_out;
                if self.wants(*x) {
                    let mut dx = vec![F::zero(); rows * n_in];
                    F::gemm(rows, n_out, n_in, F::one(), gd, n_out as isize, 1, self.value(*w).data(), n_in as isize, 1, F::zero(), &mut dx, n_in as isize, 1);
                    acc(grads, *x, Tensor::new(self.shape(*x), dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![F::zero(); n_out * n_in];
                    F::gemm(n_out, rows, n_in, F::one(), gd, 1, n_out as isize, self.value(*x).data(), n_in as isize, 1, F::zero(), &mut dw, n_in as isize, 1);
                    acc(grads, *w, Tensor::new(ws, dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![F::zero(); n_out];
                        for r in gd.chunks(n_out) {
                            for (d, &v) in db.iter_mut().zip(r) {
                                *d += v;
                            }
                        }
                        acc(grads, *b, Tensor::new(&[n_out], db));
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let k = if *ta { sa[0] } else { sa[1] };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    // dA_eff = G B_effᵀ with A_eff (m x k); store in A's own layout.
                    let (rsb, csb) = if *tb { (1isize, sb[1] as isize) } else { (sb[1] as isize, 1isize) };
                    let mut da = vec![F::zero(); av.len()];
                    let (rsc, csc) = if *ta { (1isize, sa[1] as isize) } else { (sa[1] as isize, 1isize) };
                    // B_effᵀ[j, p] = B_eff[p, j]: row stride csb, col stride rsb
                    F::gemm(m, n, k, F::one(), gd, n as isize, 1, bv, csb, rsb, F::zero(), &mut da, rsc, csc);
                    acc(grads, *a, Tensor::new(&sa, da));
                }
                if self.wants(*b) {
                    let (rsa, csa) = if *ta { (1isize, sa[1] as isize) } else { (sa[1] as isize, 1isize) };
                    let mut db = vec![F::zero(); bv.len()];
                    let (rsc, csc) = if *tb { (1isize, sb[1] as isize) } else { (sb[1] as isize, 1isize) };
                    F::gemm(k, m, n, F::one(), av, csa, rsa, gd, n as isize, 1, F::zero(), &mut db, rsc, csc);
                    acc(grads, *b, Tensor::new(&sb, db));
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    if self.wants(v) {
                        acc(grads, v, Tensor::new(self.shape(v), gd[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::Reshape(x) => {
                acc(grads, *x, g.clone().reshaped(self.shape(*x)));
            }
            Op::Slice { x, offset } => {
                let mut d = Tensor::zeros(self.shape(*x));
                d.data_mut()[*offset..*offset + g.len()].copy_from_slice(gd);
                acc(grads, *x, d);
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h / 2, w / 2);
                let q = F::of(0.25);
                let mut d = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            d[(ch * h + i) * w + j] = gd[(ch * ho + i / 2) * wo + j / 2] * q;
                        }
                    }
                }
                acc(grads, *x, Tensor::new(&s, d));
            }
            Op::MaxPool2 { x, argmax } => {
                let s = self.shape(*x).to_vec();
                let mut d = vec![F::zero(); s.iter().product()];
                for (&i, &gv) in argmax.iter().zip(gd) {
                    d[i] += gv;
                }
                acc(grads, *x, Tensor::new(&s, d));
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut d = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            d[(ch * h + i / 2) * w + j / 2] += gd[(ch * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
                acc(grads, *x, Tensor::new(&s, d));
            }
            Op::Gather { x, idx } => {
                let mut d = Tensor::zeros(self.shape(*x));
                for (&i, &v) in idx.iter().zip(gd) {
                    d.data_mut()[i] += v;
                }
                acc(grads, *x, d);
            }
            Op::SparseConv { map, w, centers, dil } => {
                let ms = self.shape(*map).to_vec();
                let dims = (ms[0], ms[1], ms[2]);
                let k = centers.len();
                let o = self.shape(*w)[0];
                let kk = ms[0] * 9;
                if self.wants(*w) {
                    let cols = sparse_cols(self.value(*map).data(), dims, centers, *dil);
                    let mut dw = vec![F::zero(); o * kk];
                    F::gemm(o, k, kk, F::one(), gd, k as isize, 1, &cols, 1, k as isize, F::zero(), &mut dw, kk as isize, 1);
                    acc(grads, *w, Tensor::new(self.shape(*w), dw));
                }
                if self.wants(*map) {
                    let mut dcols = vec![F::zero(); kk * k];
                    F::gemm(kk, o, k, F::one(), self.value(*w).data(), 1, kk as isize, gd, k as isize, 1, F::zero(), &mut dcols, k as isize, 1);
                    let mut dm = vec![F::zero(); ms.iter().product()];
                    sparse_cols_adjoint(&dcols, dims, centers, *dil, &mut dm);
                    acc(grads, *map, Tensor::new(&ms, dm));
                }
            }
            Op::MeanCols(x) => {
                let s = self.shape(*x).to_vec();
                let inv = F::one() / F::of(s[1] as f64);
                let mut d = Vec::with_capacity(s[0] * s[1]);
                for &v in gd {
                    d.extend(std::iter::repeat(v * inv).take(s[1]));
                }
                acc(grads, *x, Tensor::new(&s, d));
            }
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.data();
                let dot: F = y.iter().zip(gd).map(|(&a, &b)| a * b).sum();
                let d = y.iter().zip(gd).map(|(&yi, &gi)| yi * (gi - dot)).collect();
                acc(grads, *x, Tensor::new(g.shape(), d));
            }
            Op::Outer(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let n = bv.len();
                if self.wants(*a) {
                    let d = (0..av.len()).map(|i| (0..n).map(|j| gd[i * n + j] * bv[j]).sum()).collect();
                    acc(grads, *a, Tensor::new(self.shape(*a), d));
                }
                if self.wants(*b) {
                    let d = (0..n).map(|j| (0..av.len()).map(|i| gd[i * n + j] * av[i]).sum()).collect();
                    acc(grads, *b, Tensor::new(self.shape(*b), d));
                }
            }
            Op::ScatterCells { map, rows, cells } => {
                if self.wants(*map) {
                    acc(grads, *map, g.clone());
                }
                if self.wants(*rows) {
                    let c = self.shape(*rows)[0];
                    let k = cells.len();
                    let ms = self.shape(*map);
                    let hw = ms[1] * ms[2];
                    let mut d = vec![F::zero(); c * k];
                    for ch in 0..c {
                        for (n, &cell) in cells.iter().enumerate() {
                            d[ch * k + n] = gd[ch * hw + cell];
                        }
                    }
                    acc(grads, *rows, Tensor::new(&[c, k], d));
                }
            }
            Op::SoftmaxCe { logits, target } => {
                let mut p = softmax(self.value(*logits));
                p.data_mut()[*target] -= F::one();
                p.scale(gd[0]);
                acc(grads, *logits, p);
            }
            Op::Sum(x) => {
                acc(grads, *x, Tensor::full(self.shape(*x), gd[0]));
            }
        }
    }
}

pub fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub fn log_sum_exp<F: Scalar>(v: &[F]) -> F {
    let m = v.iter().copied().fold(F::neg_infinity(), F::max);
    m + v.iter().map(|&x| (x - m).exp()).sum::<F>().ln()
}

pub fn softmax<F: Scalar>(t: &Tensor<F>) -> Tensor<F> {
    let v = t.data();
    let m = v.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = v.iter().map(|&x| (x - m).exp()).collect();
    let z: F = e.iter().copied().sum();
    Tensor::new(t.shape(), e.into_iter().map(|x| x / z).collect())
}
