//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] records every op eagerly; [`Graph::backward`] walks the tape in
//! reverse and returns gradients for every node that needs one. Matrices are
//! row-major `[rows, cols]`; feature maps are `[C, H, W]`.

use crate::tensor::{chw, col2im, conv_out, corr, corr_backward, gemm, im2col, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type ParamId = usize;

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    Concat0(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SumCols(Var),
    Corr {
        a: Var,
        b: Var,
        max_disp: usize,
    },
    PoseLoss {
        t: Var,
        q: Var,
        target_t: [T; 3],
        target_q: [T; 4],
        lambda: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`, if `v` took part.
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].as_deref()
    }

    /// Gradients of every parameter node, summed per parameter id.
    pub fn params(&self) -> &[(ParamId, Vec<T>)] {
        &self.params
    }
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

fn mat(t: &Tensor<impl Scalar>) -> (usize, usize) {
    match t.shape() {
        [m, n] => (*m, *n),
        s => panic!("expected a matrix, got shape {s:?}"),
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant input that still reports its gradient (used by tests and
    /// input-sensitivity probes).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(id), true)
    }

    /// 2-D convolution of `[C, H, W]` with weights `[O, C, k, k]` and
    /// optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let dims = chw(self.value(x));
        let (o, k) = match *self.shape(w) {
            [o, c, k, k2] if c == dims[0] && k == k2 => (o, k),
            ref s => panic!("conv2d weight {s:?} does not fit input {dims:?}"),
        };
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[o], "conv2d bias shape");
        }
        let (cols, ho, wo) = im2col(self.value(x).data(), dims, k, stride, pad);
        let p = ho * wo;
        let mut out = vec![T::zero(); o * p];
        if let Some(b) = b {
            for (row, bv) in out.chunks_exact_mut(p).zip(self.value(b).data()) {
                row.fill(*bv);
            }
        }
        let ck = dims[0] * k * k;
        gemm(o, ck, p, self.value(w).data(), false, &cols, false, &mut out, T::one());
        let needs = self.ng(&[x, w]) || b.is_some_and(|b| self.ng(&[b]));
        let cols = if needs { cols } else { Vec::new() };
        self.push(
            Tensor::new(&[o, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                k,
                stride,
                pad,
                cols,
            },
            needs,
        )
    }

    /// `op(a) · op(b)` where `op` optionally transposes a stored matrix.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = mat(self.value(a));
        let (br, bc) = mat(self.value(b));
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, T::zero());
        let needs = self.ng(&[a, b]);
        self.push(Tensor::new(&[m, n], out), Op::Matmul { a, b, ta, tb }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), needs)
    }

    /// Adds the vector `b` (length = column count) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, n) = mat(self.value(a));
        assert_eq!(self.value(b).len(), n, "add_row bias length");
        let mut out = self.value(a).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += *bv;
            }
        }
        let needs = self.ng(&[a, b]);
        self.push(out, Op::AddRow(a, b), needs)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::new(self.shape(a), data);
        let needs = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        let needs = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| gelu(*v).0).collect());
        let needs = self.ng(&[a]);
        self.push(out, Op::Gelu(a), needs)
    }

    /// Row-wise layer normalization of a matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = mat(self.value(x));
        assert_eq!(self.value(gamma).len(), n, "layer_norm gamma length");
        assert_eq!(self.value(beta).len(), n, "layer_norm beta length");
        let eps = T::lit(eps);
        let nf = T::lit(n as f64);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &self.value(x).data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let needs = self.ng(&[x, gamma, beta]);
        self.push(
            Tensor::new(&[m, n], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, n) = mat(self.value(a));
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let needs = self.ng(&[a]);
        self.push(out, Op::SoftmaxRows(a), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = mat(self.value(a));
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.ng(&[a]);
        self.push(Tensor::new(&[n, m], out), Op::Transpose(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let needs = self.ng(&[a]);
        self.push(out, Op::Reshape(a), needs)
    }

    /// Concatenation along the leading axis; trailing dimensions must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat0 of nothing");
        let rest = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            assert_eq!(&s[1..], &rest[..], "concat0 trailing shape mismatch");
            lead += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&rest);
        let needs = self.ng(parts);
        self.push(Tensor::new(&shape, data), Op::Concat0(parts.to_vec()), needs)
    }

    /// Concatenation of matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = mat(self.value(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pm, pn) = mat(self.value(*p));
                assert_eq!(pm, m, "concat_cols row mismatch");
                pn
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * n];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = self.value(*p).data();
            for r in 0..m {
                out[r * n + off..r * n + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let needs = self.ng(parts);
        self.push(Tensor::new(&[m, n], out), Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = mat(self.value(x));
        assert!(start + len <= n, "slice_cols out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let needs = self.ng(&[x]);
        self.push(Tensor::new(&[m, len], out), Op::SliceCols { x, start }, needs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = mat(self.value(x));
        assert!(start + len <= m, "slice_rows out of range");
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let needs = self.ng(&[x]);
        self.push(Tensor::new(&[len, n], out), Op::SliceRows { x, start }, needs)
    }

    /// Sum over the columns of each row: `[m, n] → [m]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (m, n) = mat(self.value(x));
        let out = self.value(x).data().chunks_exact(n).map(|r| r.iter().copied().sum()).collect();
        let needs = self.ng(&[x]);
        self.push(Tensor::new(&[m], out), Op::SumCols(x), needs)
    }

    /// Local correlation cost volume; see [`crate::tensor::corr`].
    pub fn corr(&mut self, a: Var, b: Var, max_disp: usize) -> Var {
        let out = corr(self.value(a), self.value(b), max_disp);
        let needs = self.ng(&[a, b]);
        self.push(out, Op::Corr { a, b, max_disp }, needs)
    }

    /// Pose regression loss:
    /// `Σ smooth_l1(t − t*) + λ·(1 − |⟨q/‖q‖, q*⟩|)` with smooth-L1 β = 1.
    pub fn pose_loss(&mut self, t: Var, q: Var, target_t: [f64; 3], target_q: [f64; 4], lambda: f64) -> Var {
        assert_eq!(self.value(t).len(), 3, "pose_loss translation length");
        assert_eq!(self.value(q).len(), 4, "pose_loss quaternion length");
        let tt = target_t.map(T::lit);
        let tq = target_q.map(T::lit);
        let lam = T::lit(lambda);
        let half = T::lit(0.5);
        let mut loss = T::zero();
        for (p, g) in self.value(t).data().iter().zip(&tt) {
            let d = (*p - *g).abs();
            loss += if d < T::one() { half * d * d } else { d - half };
        }
        let qd = self.value(q).data();
        let norm = qd.iter().map(|v| *v * *v).sum::<T>().sqrt();
        let dot = qd.iter().zip(&tq).map(|(a, b)| *a * *b).sum::<T>();
        loss += lam * (T::one() - (dot / norm).abs());
        let needs = self.ng(&[t, q]);
        self.push(
            Tensor::new(&[1], vec![loss]),
            Op::PoseLoss {
                t,
                q,
                target_t: tt,
                target_q: tq,
                lambda: lam,
            },
            needs,
        )
    }

    /// Back-propagates from the scalar `root`, seeding its gradient with
    /// `seed` (use `1/batch` to average over a batch).
    pub fn backward(&self, root: Var, seed: T) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![seed]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backward_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Vec<T>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                match params.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
                    None => params.push((*id, g.clone())),
                }
            }
        }
        Gradients { nodes: grads, params }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if wants(v) {
                    let len = self.nodes[v.0].value.len();
                    let $buf: &mut Vec<T> = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                    $body
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                x,
                w,
                b,
                k,
                stride,
                pad,
                cols,
            } => {
                let dims = chw(self.value(*x));
                let o = self.shape(*w)[0];
                let ck = dims[0] * k * k;
                let p = conv_out(dims[1], *k, *stride, *pad) * conv_out(dims[2], *k, *stride, *pad);
                acc!(*w, |gw| gemm(o, p, ck, g, false, cols, true, gw, T::one()));
                if let Some(b) = b {
                    acc!(*b, |gb| for (gbv, row) in gb.iter_mut().zip(g.chunks_exact(p)) {
                        *gbv += row.iter().copied().sum::<T>();
                    });
                }
                acc!(*x, |gx| {
                    let mut dcols = vec![T::zero(); ck * p];
                    gemm(ck, o, p, val(*w), true, g, false, &mut dcols, T::zero());
                    let dx = col2im(&dcols, dims, *k, *stride, *pad);
                    gx.iter_mut().zip(&dx).for_each(|(a, b)| *a += *b);
                });
            }
            Op::Matmul { a, b, ta, tb } => {
                let (ar, ac) = mat(self.value(*a));
                let (br, bc) = mat(self.value(*b));
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                acc!(*a, |ga| if *ta {
                    gemm(k, n, m, val(*b), *tb, g, true, ga, T::one())
                } else {
                    gemm(m, n, k, g, false, val(*b), !*tb, ga, T::one())
                });
                acc!(*b, |gb| if *tb {
                    gemm(n, m, k, g, true, val(*a), *ta, gb, T::one())
                } else {
                    gemm(k, m, n, val(*a), !*ta, g, false, gb, T::one())
                });
            }
            Op::Add(a, b) => {
                acc!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
                acc!(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
            }
            Op::AddRow(a, b) => {
                acc!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
                let n = self.value(*b).len();
                acc!(*b, |gb| for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += *y);
                });
            }
            Op::Mul(a, b) => {
                acc!(*a, |ga| for ((x, y), z) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *x += *y * *z;
                });
                acc!(*b, |gb| for ((x, y), z) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *x += *y * *z;
                });
            }
            Op::Scale(a, s) => acc!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y * *s)),
            Op::Gelu(a) => acc!(*a, |ga| for ((x, y), z) in ga.iter_mut().zip(g).zip(val(*a)) {
                *x += *y * gelu(*z).1;
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).len();
                let nf = T::lit(n as f64);
                acc!(*gamma, |gg| for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for c in 0..n {
                        gg[c] += gr[c] * hr[c];
                    }
                });
                acc!(*beta, |gb| for gr in g.chunks_exact(n) {
                    gb.iter_mut().zip(gr).for_each(|(a, b)| *a += *b);
                });
                let gam = val(*gamma);
                acc!(*x, |gx| for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in 0..n {
                        let d = gr[c] * gam[c];
                        m1 += d;
                        m2 += d * hr[c];
                    }
                    m1 /= nf;
                    m2 /= nf;
                    for c in 0..n {
                        gx[r * n + c] += *rs * (gr[c] * gam[c] - m1 - hr[c] * m2);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.shape()[1];
                acc!(*a, |ga| for ((gar, gr), yr) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(p, q)| *p * *q).sum();
                    for c in 0..n {
                        gar[c] += yr[c] * (gr[c] - dot);
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = mat(self.value(*a));
                acc!(*a, |ga| for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                });
            }
            Op::Reshape(a) => acc!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y)),
            Op::Concat0(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    acc!(*p, |gp| gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += *y));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = mat(&node.value);
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    acc!(*p, |gp| for r in 0..m {
                        for c in 0..w {
                            gp[r * w + c] += g[r * n + off + c];
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = mat(self.value(*x));
                let len = node.value.shape()[1];
                acc!(*x, |gx| for r in 0..m {
                    for c in 0..len {
                        gx[r * n + start + c] += g[r * len + c];
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = self.shape(*x)[1];
                acc!(*x, |gx| gx[start * n..start * n + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += *b));
            }
            Op::SumCols(x) => {
                let n = self.shape(*x)[1];
                acc!(*x, |gx| for (row, gv) in gx.chunks_exact_mut(n).zip(g) {
                    row.iter_mut().for_each(|v| *v += *gv);
                });
            }
            Op::Corr { a, b, max_disp } => {
                let (ga_, gb_) = corr_backward(self.value(*a), self.value(*b), g, *max_disp);
                acc!(*a, |ga| ga.iter_mut().zip(&ga_).for_each(|(x, y)| *x += *y));
                acc!(*b, |gb| gb.iter_mut().zip(&gb_).for_each(|(x, y)| *x += *y));
            }
            Op::PoseLoss {
                t,
                q,
                target_t,
                target_q,
                lambda,
            } => {
                let g0 = g[0];
                acc!(*t, |gt| for ((x, p), tt) in gt.iter_mut().zip(val(*t)).zip(target_t) {
                    let d = *p - *tt;
                    *x += g0 * d.max(-T::one()).min(T::one());
                });
                acc!(*q, |gq| {
                    let qd = val(*q);
                    let n2: T = qd.iter().map(|v| *v * *v).sum();
                    let n = n2.sqrt();
                    let dot: T = qd.iter().zip(target_q).map(|(a, b)| *a * *b).sum();
                    let sign = if dot < T::zero() { -T::one() } else { T::one() };
                    for c in 0..4 {
                        let ds = target_q[c] / n - dot * qd[c] / (n2 * n);
                        gq[c] += -g0 * *lambda * sign * ds;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Reduces any node to a scalar through a fixed random projection.
    fn project(g: &mut Graph<f64>, v: Var, rng: &mut ChaCha8Rng) -> Var {
        let shape = g.shape(v).to_vec();
        let w = rand_tensor(rng, &shape);
        let w = g.leaf(w);
        let p = g.mul(v, w);
        let len = shape.iter().product();
        let r = g.reshape(p, &[1, len]);
        g.sum_cols(r)
    }

    /// Checks analytic input gradients of `build` against central
    /// differences.
    fn check(shapes: &[&[usize]], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let proj_seed: u64 = rng.random();
        let eval = |inputs: &[Tensor<f64>]| -> (Graph<f64>, Vec<Var>, Var) {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let out = build(&mut g, &vars);
            let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
            let root = if g.value(out).len() == 1 {
                out
            } else {
                project(&mut g, out, &mut prng)
            };
            (g, vars, root)
        };
        let (g, vars, root) = eval(&inputs);
        let grads = g.backward(root, 1.0);
        let eps = 1e-6;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.of(*v).expect("input gradient").to_vec();
            for idx in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += eps;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= eps;
                let (gp, _, rp) = eval(&plus);
                let (gm, _, rm) = eval(&minus);
                let num = (gp.value(rp).data()[0] - gm.value(rm).data()[0]) / (2.0 * eps);
                let a = analytic[idx];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-5, "input {k}[{idx}]: analytic {a} vs numeric {num}");
            }
        }
    }

    #[test]
    fn grad_conv2d() {
        check(&[&[2, 5, 6], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1));
        check(&[&[1, 4, 4], &[2, 1, 2, 2]], |g, v| g.conv2d(v[0], v[1], None, 2, 0));
    }

    #[test]
    fn grad_matmul_all_transposes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
            let b: &[usize] = if tb { &[2, 4] } else { &[4, 2] };
            check(&[a, b], move |g, v| g.matmul(v[0], v[1], ta, tb));
        }
    }

    #[test]
    fn grad_elementwise() {
        check(&[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
        check(&[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1]));
        check(&[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
        check(&[&[3, 4]], |g, v| g.mul(v[0], v[0]));
        check(&[&[3, 4]], |g, v| g.scale(v[0], -2.5));
        check(&[&[3, 4]], |g, v| g.gelu(v[0]));
    }

    #[test]
    fn grad_layer_norm_and_softmax() {
        check(&[&[3, 5], &[5], &[5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6));
        check(&[&[3, 5]], |g, v| g.softmax_rows(v[0]));
    }

    #[test]
    fn grad_shape_ops() {
        check(&[&[3, 5]], |g, v| g.transpose(v[0]));
        check(&[&[3, 5]], |g, v| g.reshape(v[0], &[5, 3]));
        check(&[&[1, 5], &[3, 5]], |g, v| g.concat0(&[v[0], v[1]]));
        check(&[&[3, 2], &[3, 4]], |g, v| g.concat_cols(&[v[0], v[1]]));
        check(&[&[3, 6]], |g, v| g.slice_cols(v[0], 2, 3));
        check(&[&[4, 3]], |g, v| g.slice_rows(v[0], 1, 2));
        check(&[&[4, 3]], |g, v| g.sum_cols(v[0]));
    }

    #[test]
    fn grad_corr() {
        check(&[&[3, 4, 5], &[3, 4, 5]], |g, v| g.corr(v[0], v[1], 2));
    }

    #[test]
    fn grad_pose_loss() {
        // Targets chosen so some translation residuals exceed the smooth-L1
        // knee; random inputs lie in (-1, 1).
        check(&[&[3], &[4]], |g, v| {
            g.pose_loss(v[0], v[1], [0.1, -1.7, 2.2], [0.5, 0.5, -0.5, 0.5], 1.3)
        });
    }

    #[test]
    fn pose_loss_zero_at_target_and_double_cover() {
        let q = [0.8f64, 0.0, 0.6, 0.0];
        for sign in [1.0, -1.0] {
            let mut g = Graph::<f64>::new();
            let t = g.leaf(Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]));
            let qv = g.leaf(Tensor::from_f64(&[4], &q.map(|v| v * sign * 2.0)));
            let l = g.pose_loss(t, qv, [0.1, 0.2, 0.3], q, 1.0);
            assert!(g.value(l).data()[0].abs() < 1e-15);
        }
    }

    #[test]
    fn leaves_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_f64(&[1, 2], &[1.0, 2.0]));
        let b = g.param(0, Tensor::from_f64(&[1, 2], &[3.0, 4.0]));
        let c = g.mul(a, b);
        let s = g.sum_cols(c);
        let grads = g.backward(s, 1.0);
        assert!(grads.of(a).is_none());
        assert_eq!(grads.params(), &[(0, vec![1.0, 2.0])]);
    }
}
