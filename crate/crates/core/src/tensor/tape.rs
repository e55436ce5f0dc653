//! Arena tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value and enough
//! context for its vector-Jacobian product. Nodes only reference earlier
//! nodes, so the arena order is already a topological order and `backward`
//! is a single reverse sweep.

use super::{Gradients, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<R> {
    Leaf(Option<ParamId>),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    Gelu(Var),
    Softmax(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Cols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<R>,
    },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Recorded computation. Not `Sync`-shared: one tape per thread.
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn view_strides(cols: usize, transposed: bool) -> [isize; 2] {
    if transposed {
        [1, cols as isize]
    } else {
        [cols as isize, 1]
    }
}

fn flip(s: [isize; 2]) -> [isize; 2] {
    [s[1], s[0]]
}

fn phi<R: Real>(x: R) -> (R, R) {
    // (cdf, pdf) of the standard normal
    let half = R::lit(0.5);
    let cdf = half * (R::one() + (x * R::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * R::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    (cdf, pdf)
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf(p) => p.is_some(),
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter; its gradient is reported under `id`.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf(Some(id)), &[])
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf(None), &[])
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(format!("{what} expects a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `op(a)·op(b)` where `op` optionally transposes.
    pub fn matmul_ext(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.matrix(a, "matmul")?;
        let (br, bc) = self.matrix(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul of {:?}{} and {:?}{}",
                self.shape(a),
                if ta { "ᵀ" } else { "" },
                self.shape(b),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![R::zero(); m * n];
        R::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            view_strides(ac, ta),
            self.value(b).data(),
            view_strides(bc, tb),
            &mut out,
            [n as isize, 1],
            false,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, false)
    }

    /// `a·bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(R, R) -> R) -> Tensor<R> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(R) -> R) -> Tensor<R> {
        let va = self.value(a);
        Tensor::new(va.shape(), va.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: R) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    /// Adds a length-`D` vector to every row of an `[N×D]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.value(x).rows_cols();
        if self.value(bias).len() != d {
            return Err(Error::dim(format!(
                "row bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let mut v = self.value(x).clone();
        let b = self.value(bias).data();
        for row in v.data_mut().chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        Ok(self.push(v, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::config(format!("layer norm eps must be >= 0, got {eps}")));
        }
        let (n, d) = self.value(x).rows_cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim(format!(
                "layer norm width {d} with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = R::lit(eps);
        let dr = R::from_usize(d).unwrap();
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![R::zero(); n * d];
        let mut rstd = vec![R::zero(); n];
        let mut out = vec![R::zero(); n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<R>() / dr;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dr;
            let r = (var + eps).sqrt().recip();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + bt[j];
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.map(x, |t| t * phi(t).0);
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, d) = self.value(x).rows_cols();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut total = R::zero();
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            for e in row.iter_mut() {
                *e = *e / total;
            }
        }
        self.push(v, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = pairwise_sum(self.value(x).data());
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = pairwise_sum(t.data()) / R::from_usize(t.len()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Column means of an `[N×D]` matrix, as `[1×D]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.value(x).rows_cols();
        let mut out = vec![R::zero(); d];
        for row in self.value(x).data().chunks(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let nr = R::from_usize(n).unwrap();
        out.iter_mut().for_each(|o| *o = *o / nr);
        self.push(Tensor::new(&[1, d], out).unwrap(), Op::MeanRows(x), &[x])
    }

    /// Columns `start..start+len` of a matrix.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.matrix(x, "cols")?;
        if len == 0 || start + len > d {
            return Err(Error::dim(format!(
                "column range {start}..{} of width {d}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let v = Tensor::new(&[n, len], out)?;
        Ok(self.push(v, Op::Cols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.matrix(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_cols")?;
            if r != n {
                return Err(Error::dim(format!(
                    "concat_cols rows {r} vs {n}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::new(&[n, total], out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).rows_cols().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if c != d {
                return Err(Error::dim(format!("concat_rows widths {c} vs {d}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(&[rows, d], out)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// `out[i] = x[index[i]]`. Rows may repeat; their gradients add up.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).rows_cols();
        if index.is_empty() {
            return Err(Error::dim("gather of zero rows"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!("row index {bad} out of {n}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(&[index.len(), d], out)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Softmax cross-entropy of one logit row against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let l = self.value(logits).data();
        if target >= l.len() {
            return Err(Error::dim(format!(
                "target class {target} with {} logits",
                l.len()
            )));
        }
        let max = l.iter().copied().fold(R::neg_infinity(), R::max);
        let total: R = l.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + total.ln();
        let probs: Vec<R> = l.iter().map(|&v| (v - lse).exp()).collect();
        let loss = lse - l[target];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar. Returns gradients for every parameter
    /// leaf reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), R::one()));
        let mut out = Gradients::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        node: &Node<R>,
        g: &Tensor<R>,
        grads: &mut [Option<Tensor<R>>],
        out: &mut Gradients<R>,
    ) {
        // Returns the accumulator of `v`, zero-initialized on first use.
        fn slot<'a, R: Real>(
            tape: &Tape<R>,
            grads: &'a mut [Option<Tensor<R>>],
            v: Var,
        ) -> &'a mut Tensor<R> {
            grads[v.0].get_or_insert_with(|| Tensor::zeros(tape.shape(v)))
        }

        let gd = g.data();
        match &node.op {
            Op::Leaf(Some(id)) => out.add(*id, g),
            Op::Leaf(None) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.value(*a).rows_cols();
                let (br, bc) = self.value(*b).rows_cols();
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                let sa = view_strides(ac, *ta);
                let sb = view_strides(bc, *tb);
                let sg = [n as isize, 1];
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let ga = slot(self, grads, *a);
                    // d op(a) = g · op(b)ᵀ, written through op(a)'s view
                    R::gemm(m, n, k, gd, sg, bv, flip(sb), ga.data_mut(), sa, true);
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let gb = slot(self, grads, *b);
                    // d op(b) = op(a)ᵀ · g
                    R::gemm(k, m, n, av, flip(sa), gd, sg, gb.data_mut(), sb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        slot(self, grads, v).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    slot(self, grads, *a).add_assign(g);
                }
                if self.wants(*b) {
                    let gb = slot(self, grads, *b);
                    for (o, &x) in gb.data_mut().iter_mut().zip(gd) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(v) {
                        let od = self.value(other).data();
                        let gv = slot(self, grads, v);
                        for ((o, &x), &y) in gv.data_mut().iter_mut().zip(gd).zip(od) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    let ga = slot(self, grads, *a);
                    for (o, &x) in ga.data_mut().iter_mut().zip(gd) {
                        *o += x * *s;
                    }
                }
            }
            Op::Square(a) => {
                if self.wants(*a) {
                    let av = self.value(*a).data();
                    let ga = slot(self, grads, *a);
                    let two = R::lit(2.0);
                    for ((o, &x), &y) in ga.data_mut().iter_mut().zip(gd).zip(av) {
                        *o += two * x * y;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    slot(self, grads, *x).add_assign(g);
                }
                if self.wants(*bias) {
                    let d = self.value(*bias).len();
                    let gb = slot(self, grads, *bias);
                    for row in gd.chunks(d) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
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
                let d = self.value(*gamma).len();
                if self.wants(*beta) {
                    let gb = slot(self, grads, *beta);
                    for row in gd.chunks(d) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                if self.wants(*gamma) {
                    let gg = slot(self, grads, *gamma);
                    for (row, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &v), &h) in gg.data_mut().iter_mut().zip(row).zip(hrow) {
                            *o += v * h;
                        }
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let dr = R::from_usize(d).unwrap();
                    let gx = slot(self, grads, *x);
                    let mut dh = vec![R::zero(); d];
                    for (i, (row, hrow)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = R::zero();
                        let mut mean_dh_h = R::zero();
                        for j in 0..d {
                            dh[j] = row[j] * gam[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh = mean_dh / dr;
                        mean_dh_h = mean_dh_h / dr;
                        let out = &mut gx.data_mut()[i * d..(i + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let av = self.value(*a).data();
                    let ga = slot(self, grads, *a);
                    for ((o, &x), &t) in ga.data_mut().iter_mut().zip(gd).zip(av) {
                        let (cdf, pdf) = phi(t);
                        *o += x * (cdf + t * pdf);
                    }
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    let d = node.value.rows_cols().1;
                    let ga = slot(self, grads, *a);
                    for ((o, grow), yrow) in ga
                        .data_mut()
                        .chunks_mut(d)
                        .zip(gd.chunks(d))
                        .zip(y.chunks(d))
                    {
                        let dot: R = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            o[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let s = gd[0];
                    slot(self, grads, *a).data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = R::from_usize(self.value(*a).len()).unwrap();
                    let s = gd[0] / n;
                    slot(self, grads, *a).data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
            Op::MeanRows(a) => {
                if self.wants(*a) {
                    let (n, d) = self.value(*a).rows_cols();
                    let nr = R::from_usize(n).unwrap();
                    let ga = slot(self, grads, *a);
                    for row in ga.data_mut().chunks_mut(d) {
                        for (o, &v) in row.iter_mut().zip(gd) {
                            *o += v / nr;
                        }
                    }
                }
            }
            Op::Cols { x, start } => {
                if self.wants(*x) {
                    let len = node.value.rows_cols().1;
                    let d = self.value(*x).rows_cols().1;
                    let gx = slot(self, grads, *x);
                    for (i, row) in gd.chunks(len).enumerate() {
                        let dst = &mut gx.data_mut()[i * d + start..i * d + start + len];
                        for (o, &v) in dst.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.rows_cols().1;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).rows_cols().1;
                    if self.wants(p) {
                        let gp = slot(self, grads, p);
                        for (i, row) in gp.data_mut().chunks_mut(w).enumerate() {
                            let src = &gd[i * total + offset..i * total + offset + w];
                            for (o, &v) in row.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        let gp = slot(self, grads, p);
                        for (o, &v) in gp.data_mut().iter_mut().zip(&gd[offset..offset + len]) {
                            *o += v;
                        }
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                if self.wants(*x) {
                    let d = node.value.rows_cols().1;
                    let gx = slot(self, grads, *x);
                    for (row, &src) in gd.chunks(d).zip(index) {
                        let dst = &mut gx.data_mut()[src * d..(src + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let ga = slot(self, grads, *a);
                    for (o, &v) in ga.data_mut().iter_mut().zip(gd) {
                        *o += v;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                if self.wants(*logits) {
                    let s = gd[0];
                    let gl = slot(self, grads, *logits);
                    for (j, (o, &p)) in gl.data_mut().iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { R::one() } else { R::zero() };
                        *o += s * (p - onehot);
                    }
                }
            }
        }
    }
}

/// Sum with `O(log n)` rounding-error growth instead of `O(n)`.
pub(crate) fn pairwise_sum<R: Real>(xs: &[R]) -> R {
    const BLOCK: usize = 128;
    if xs.len() <= BLOCK {
        return xs.iter().copied().fold(R::zero(), |a, b| a + b);
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, &[usize], &[f64])]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (name, shape, data) in values {
            s.add(*name, Tensor::from_f64(shape, data).unwrap(), true);
        }
        s
    }

    #[test]
    fn pairwise_sum_is_accurate() {
        let xs = vec![0.1f64; 1 << 20];
        let exact = 0.1 * (1u64 << 20) as f64;
        assert!((pairwise_sum(&xs) - exact).abs() < 1e-9);
        assert_eq!(pairwise_sum::<f64>(&[]), 0.0);
        assert_eq!(pairwise_sum(&[1.0f32, 2.0, 3.0]), 6.0);
    }

    #[test]
    fn sum_gives_ones() {
        let s = store_with(&[("p", &[2, 3], &[1., -2., 3., 0.5, 7., 1.])]);
        let mut t = Tape::new();
        let p = t.param(&s, ParamId(0));
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let s = store_with(&[("p", &[2], &[1., 2.])]);
        let mut t = Tape::new();
        let p = t.param(&s, ParamId(0));
        let sq = t.square(p);
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn reuse_accumulates() {
        let s = store_with(&[("p", &[3], &[0.3, -1.0, 2.0])]);
        let single = {
            let mut t = Tape::new();
            let p = t.param(&s, ParamId(0));
            let sq = t.square(p);
            let l = t.sum(sq);
            t.backward(l).unwrap().get(ParamId(0)).unwrap().clone()
        };
        let mut t = Tape::new();
        let p = t.param(&s, ParamId(0));
        let a = t.square(p);
        let b = t.square(p);
        let both = t.add(a, b).unwrap();
        let l = t.sum(both);
        let g = t.backward(l).unwrap();
        for (x, y) in g.get(ParamId(0)).unwrap().data().iter().zip(single.data()) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let s = store_with(&[("p", &[2], &[1., 2.])]);
        let mut t = Tape::new();
        let p = t.param(&s, ParamId(0));
        assert!(matches!(t.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_param_has_no_grad() {
        let s = store_with(&[("a", &[1], &[1.]), ("b", &[1], &[2.])]);
        let mut t = Tape::new();
        let a = t.param(&s, ParamId(0));
        let _b = t.param(&s, ParamId(1));
        let l = t.sum(a);
        let g = t.backward(l).unwrap();
        assert!(g.get(ParamId(1)).is_none());
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn scalar_matmul() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::from_f64(&[1, 1], &[2.0]).unwrap());
        let b = t.constant(Tensor::from_f64(&[1, 1], &[3.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[6.0]);
    }

    #[test]
    fn layer_norm_hand_value() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_f64(&[1, 3], &[1., 2., 3.]).unwrap());
        let g = t.constant(Tensor::full(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.layer_norm(x, g, b, 0.0).unwrap();
        let expect = 1.0 / (2.0f64 / 3.0).sqrt();
        let got = t.value(y).data();
        assert!((got[0] + expect).abs() < 1e-12);
        assert!(got[1].abs() < 1e-12);
        assert!((got[2] - expect).abs() < 1e-12);
        assert!((expect - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::full(&[2, 5], 3.5));
        let g = t.constant(Tensor::full(&[5], 1.0));
        let b = t.constant(Tensor::zeros(&[5]));
        let y = t.layer_norm(x, g, b, 1e-6).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_row_mean_is_mean_beta() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_f64(&[2, 4], &[0.3, 9., -2., 1., 5., 5.5, 4., 0.]).unwrap());
        let g = t.constant(Tensor::full(&[4], 1.0));
        let beta = [0.5, -1.0, 2.0, 0.1];
        let b = t.constant(Tensor::from_f64(&[4], &beta).unwrap());
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        let mb = beta.iter().sum::<f64>() / 4.0;
        for row in t.value(y).data().chunks(4) {
            assert!((row.iter().sum::<f64>() / 4.0 - mb).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_width_mismatch() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[2, 4]));
        let g = t.constant(Tensor::zeros(&[3]));
        let b = t.constant(Tensor::zeros(&[3]));
        assert!(matches!(t.layer_norm(x, g, b, 1e-6), Err(Error::Dimension(_))));
    }

    #[test]
    fn gelu_values() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_f64(&[3], &[0.0, 10.0, 1.0]).unwrap());
        let y = t.gelu(x);
        let v = t.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-6);
        // 1·Φ(1) with Φ(1) = 0.841344746...
        assert!((v[2] - 0.841345).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., -50., 0., 50.]).unwrap());
        let y = t.softmax(x);
        for row in t.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gather_with_repeats_accumulates() {
        let s = store_with(&[("x", &[3, 2], &[1., 2., 3., 4., 5., 6.])]);
        let mut t = Tape::new();
        let x = t.param(&s, ParamId(0));
        let y = t.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(y).data(), &[5., 6., 1., 2., 5., 6.]);
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn cross_entropy_uniform() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[1, 4]));
        let l = t.cross_entropy(x, 2).unwrap();
        assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }
}
