//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in evaluation order; [`Graph::backward`]
//! walks the tape in reverse and accumulates adjoints. Convolutions lower to
//! `im2col` followed by a dense matrix product.

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize },
    Add(Var, Var),
    Concat(Var, Var),
    Upsample(Var),
    Film { x: Var, gamma: Var, beta: Var },
    Silu(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar objective with respect to parameter slots.
pub struct ParamGrads {
    pub grads: Vec<Option<Tensor>>,
}

/// `c = a · b + beta · c` for row-major `c` (`m × n`); `a` and `b` are given by
/// explicit row/column strides so transposes cost nothing.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(k == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let (h, w) = (x.h(), x.w());
        ConvGeom {
            cin: x.c(),
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Pointwise stride-1 convolutions read the input directly.
    fn is_identity(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.cols();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &mut cols[((ci * self.k + ky) * self.k + kx) * p..][..p];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            row[oy * self.wo + ox] = match self.source(oy, ky, ox, kx) {
                                Some((y, x)) => plane[y * self.w + x],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.cols();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &cols[((ci * self.k + ky) * self.k + kx) * p..][..p];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, x)) = self.source(oy, ky, ox, kx) {
                                plane[y * self.w + x] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0, 0, 0, 0]))
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// A learnable tensor occupying parameter slot `slot`.
    pub fn param(&mut self, slot: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(slot), true)
    }

    /// Square-kernel convolution with zero padding `k / 2`. Weight shape is
    /// `cout × cin × k × k`, bias `cout × 1 × 1 × 1`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let [cout, cin, k, k2] = wv.shape;
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(cin, xv.c(), "conv input channels");
        let g = ConvGeom::new(xv, k, stride);
        let (rows, p) = (g.rows(), g.cols());
        let mut out = Tensor::zeros([xv.n(), cout, g.ho, g.wo]);
        let mut cols = if g.is_identity() { Vec::new() } else { vec![0.0; rows * p] };
        for n in 0..xv.n() {
            let src: &[f64] = if g.is_identity() {
                xv.item(n)
            } else {
                g.im2col(xv.item(n), &mut cols);
                &cols
            };
            gemm(cout, rows, p, &wv.data, (rows, 1), src, (p, 1), 0.0, out.item_mut(n));
        }
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for n in 0..out.n() {
                for (co, plane) in out.item_mut(n).chunks_exact_mut(p).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv { x, w, b, stride }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.n(), av.h(), av.w()), (bv.n(), bv.h(), bv.w()), "concat shapes");
        let mut out = Tensor::zeros([av.n(), av.c() + bv.c(), av.h(), av.w()]);
        for n in 0..av.n() {
            let (ai, bi) = (av.item(n), bv.item(n));
            let o = out.item_mut(n);
            o[..ai.len()].copy_from_slice(ai);
            o[ai.len()..].copy_from_slice(bi);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat(a, b), needs)
    }

    /// Nearest-neighbor 2× upsampling.
    pub fn upsample(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (h, w) = (xv.h(), xv.w());
        let mut out = Tensor::zeros([xv.n(), xv.c(), 2 * h, 2 * w]);
        for (src, dst) in xv.data.chunks_exact(h * w).zip(out.data.chunks_exact_mut(4 * h * w)) {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Upsample(x), needs)
    }

    /// Per-channel affine modulation `x · (1 + γ) + β` with `γ, β` of shape
    /// `n × c × 1 × 1`.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        assert_eq!([xv.n(), xv.c(), 1, 1], gv.shape, "film gamma shape");
        assert_eq!(gv.shape, bv.shape, "film beta shape");
        let hw = xv.h() * xv.w();
        let mut out = xv.clone();
        for (i, plane) in out.data.chunks_exact_mut(hw).enumerate() {
            let (g, b) = (1.0 + gv.data[i], bv.data[i]);
            plane.iter_mut().for_each(|v| *v = *v * g + b);
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::Film { x, gamma, beta }, needs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= sigmoid(*v));
        let needs = self.needs(x);
        self.push(out, Op::Silu(x), needs)
    }

    /// `y = W x + b` on `n × in × 1 × 1` inputs; `W` is `out × in × 1 × 1`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, fin, fout) = (xv.n(), xv.c(), wv.shape[0]);
        assert_eq!(wv.shape, [fout, fin, 1, 1], "linear weight shape");
        assert_eq!(xv.shape, [n, fin, 1, 1], "linear input shape");
        let mut out = Tensor::zeros([n, fout, 1, 1]);
        gemm(n, fin, fout, &xv.data, (fin, 1), &wv.data, (1, fin), 0.0, &mut out.data);
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for row in out.data.chunks_exact_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Linear { x, w, b }, needs)
    }

    /// Back-propagates `seed` (the adjoint of `out`) and returns gradients for
    /// the parameter slots `0..slots`.
    pub fn backward(&self, out: Var, seed: Tensor, slots: usize) -> ParamGrads {
        assert_eq!(seed.shape, self.value(out).shape, "seed shape");
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[out.0] = Some(seed);
        let mut grads: Vec<Option<Tensor>> = (0..slots).map(|_| None).collect();

        fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut adj[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = adj[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => match &mut grads[*slot] {
                    Some(t) => t.add_assign(&dy),
                    s @ None => *s = Some(dy),
                },
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        acc(&mut adj, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut adj, *b, dy);
                    }
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (self.value(*a).c(), self.value(*b).c());
                    let hw = dy.h() * dy.w();
                    let mut da = Tensor::zeros(self.value(*a).shape);
                    let mut db = Tensor::zeros(self.value(*b).shape);
                    for n in 0..dy.n() {
                        let d = dy.item(n);
                        da.item_mut(n).copy_from_slice(&d[..ca * hw]);
                        db.item_mut(n).copy_from_slice(&d[ca * hw..(ca + cb) * hw]);
                    }
                    if self.needs(*a) {
                        acc(&mut adj, *a, da);
                    }
                    if self.needs(*b) {
                        acc(&mut adj, *b, db);
                    }
                }
                Op::Upsample(x) => {
                    let xs = self.value(*x).shape;
                    let (h, w) = (xs[2], xs[3]);
                    let mut dx = Tensor::zeros(xs);
                    for (d, s) in dx.data.chunks_exact_mut(h * w).zip(dy.data.chunks_exact(4 * h * w)) {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                d[(y / 2) * w + x / 2] += s[y * 2 * w + x];
                            }
                        }
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::Film { x, gamma, beta } => {
                    let (xv, gv) = (self.value(*x), self.value(*gamma));
                    let hw = xv.h() * xv.w();
                    let mut dx = Tensor::zeros(xv.shape);
                    let mut dg = Tensor::zeros(gv.shape);
                    let mut db = Tensor::zeros(gv.shape);
                    for (i, ((d, xs), dxs)) in dy
                        .data
                        .chunks_exact(hw)
                        .zip(xv.data.chunks_exact(hw))
                        .zip(dx.data.chunks_exact_mut(hw))
                        .enumerate()
                    {
                        let g = 1.0 + gv.data[i];
                        let (mut sg, mut sb) = (0.0, 0.0);
                        for j in 0..hw {
                            dxs[j] = d[j] * g;
                            sg += d[j] * xs[j];
                            sb += d[j];
                        }
                        dg.data[i] = sg;
                        db.data[i] = sb;
                    }
                    if self.needs(*x) {
                        acc(&mut adj, *x, dx);
                    }
                    if self.needs(*gamma) {
                        acc(&mut adj, *gamma, dg);
                    }
                    if self.needs(*beta) {
                        acc(&mut adj, *beta, db);
                    }
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let mut dx = dy;
                    for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                        let s = sigmoid(v);
                        *d *= s * (1.0 + v * (1.0 - s));
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, fin, fout) = (xv.n(), xv.c(), wv.shape[0]);
                    if self.needs(*w) {
                        // dW (out × in) = dYᵀ (out × n) · X (n × in)
                        let mut dw = Tensor::zeros(wv.shape);
                        gemm(fout, n, fin, &dy.data, (1, fout), &xv.data, (fin, 1), 0.0, &mut dw.data);
                        acc(&mut adj, *w, dw);
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        let mut db = Tensor::zeros([fout, 1, 1, 1]);
                        for row in dy.data.chunks_exact(fout) {
                            db.data.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                        acc(&mut adj, b, db);
                    }
                    if self.needs(*x) {
                        // dX (n × in) = dY (n × out) · W (out × in)
                        let mut dx = Tensor::zeros(xv.shape);
                        gemm(n, fout, fin, &dy.data, (fout, 1), &wv.data, (fin, 1), 0.0, &mut dx.data);
                        acc(&mut adj, *x, dx);
                    }
                }
                Op::Conv { x, w, b, stride } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let cout = wv.shape[0];
                    let g = ConvGeom::new(xv, wv.shape[2], *stride);
                    let (rows, p) = (g.rows(), g.cols());
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        let mut db = Tensor::zeros([cout, 1, 1, 1]);
                        for n in 0..dy.n() {
                            for (co, plane) in dy.item(n).chunks_exact(p).enumerate() {
                                db.data[co] += plane.iter().sum::<f64>();
                            }
                        }
                        acc(&mut adj, b, db);
                    }
                    let (need_w, need_x) = (self.needs(*w), self.needs(*x));
                    let mut dw = Tensor::zeros(wv.shape);
                    let mut dx = Tensor::zeros(if need_x { xv.shape } else { [0, 0, 0, 0] });
                    let mut cols = if g.is_identity() { Vec::new() } else { vec![0.0; rows * p] };
                    let mut dcols = vec![0.0; rows * p];
                    for n in 0..dy.n() {
                        let d = dy.item(n);
                        if need_w {
                            let src: &[f64] = if g.is_identity() {
                                xv.item(n)
                            } else {
                                g.im2col(xv.item(n), &mut cols);
                                &cols
                            };
                            // dW (cout × rows) += dY (cout × p) · colsᵀ (p × rows)
                            gemm(cout, p, rows, d, (p, 1), src, (1, p), 1.0, &mut dw.data);
                        }
                        if need_x {
                            // dcols (rows × p) = Wᵀ (rows × cout) · dY (cout × p)
                            gemm(rows, cout, p, &wv.data, (1, rows), d, (p, 1), 0.0, &mut dcols);
                            if g.is_identity() {
                                dx.item_mut(n).copy_from_slice(&dcols);
                            } else {
                                g.col2im(&dcols, dx.item_mut(n));
                            }
                        }
                    }
                    if need_w {
                        acc(&mut adj, *w, dw);
                    }
                    if need_x {
                        acc(&mut adj, *x, dx);
                    }
                }
            }
        }
        ParamGrads { grads }
    }
}
