//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Image tensors are channels-first `[C, H, W]`; sequences for the 1D
//! convolution are time-major `[T, C]`.

use std::collections::HashMap;

use crate::error::{ensure, Result};
use crate::field::{curl_adjoint, curl_into, diff_stencil};

use super::params::{Grads, ParamStore};

/// Handle of a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Upsample2(Var),
    Dense { x: Var, w: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var },
    Leaky(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Slice(Var, usize),
    Concat(Vec<Var>),
    Reshape(Var),
    Curl(Var),
    Grad2(Var),
    Sum(Var),
    AbsSum(Var),
    AbsMean(Var),
    SqMean(Var),
    Weighted(Vec<(Var, f64)>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    len: usize,
    /// Empty for parameter nodes, which read from the store.
    value: Vec<f64>,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
    counters: HashMap<&'static str, usize>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    inputs: HashMap<usize, Vec<f64>>,
    pub params: Grads,
}

impl Gradients {
    /// Gradient with respect to an input created by [`Graph::input_with_grad`].
    pub fn input(&self, v: Var) -> Option<&[f64]> {
        self.inputs.get(&v.0).map(|g| g.as_slice())
    }
}

/// `c = op(a) * op(b) + beta * c` with row-major storage; `at`/`bt` read the
/// stored matrix transposed. Logical shapes: a `[m, k]`, b `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index touched by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy)]
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
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap, grouped by
    /// column row.
    fn for_taps(&self, mut f: impl FnMut(usize, usize)) {
        let n = self.cols();
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base_in = ci * self.h * self.w + iy as usize * self.w;
                        let base_col = row * n + oy * self.wo;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                f(base_col + ox, base_in + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.cols()];
        self.for_taps(|c, i| cols[c] = x[i]);
        cols
    }

    fn col2im_add(&self, cols: &[f64], gx: &mut [f64]) {
        self.for_taps(|c, i| gx[i] += cols[c]);
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new(), counters: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Increments a named structural counter (e.g. decoder applications).
    pub fn mark(&mut self, tag: &'static str) {
        *self.counters.entry(tag).or_default() += 1;
    }

    pub fn count(&self, tag: &str) -> usize {
        self.counters.get(tag).copied().unwrap_or(0)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(i) => &self.params.get(i).data,
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, deps: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = deps.iter().any(|d| self.nodes[d.0].needs_grad);
        let len = value.len();
        self.nodes.push(Node { op, shape, len, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Result<Var> {
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            "input of shape {shape:?} given {} values",
            data.len()
        );
        let len = data.len();
        self.nodes.push(Node { op: Op::Input, shape, len, value: data, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn input_with_grad(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.leaf(shape, data, true)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        self.nodes.push(Node { op: Op::Input, shape, len: n, value: vec![0.0; n], needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Node for a stored parameter; repeated requests share one node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| crate::LssError::contract(format!("missing parameter '{name}'")))?;
        Ok(self.param_by_id(id))
    }

    pub fn param_by_id(&mut self, id: usize) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.params.get(id);
        self.nodes.push(Node {
            op: Op::Param(id),
            shape: p.shape.clone(),
            len: p.data.len(),
            value: Vec::new(),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize) -> Result<(usize, ConvGeom)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        ensure!(xs.len() == 3, "conv2d input must be [C, H, W], got {xs:?}");
        ensure!(ws.len() == 4, "conv2d weight must be [Cout, Cin, k, k], got {ws:?}");
        ensure!(ws[1] == xs[0], "conv2d weight expects {} channels, input has {}", ws[1], xs[0]);
        ensure!(ws[2] == ws[3] && ws[2] % 2 == 1, "conv2d kernel must be square and odd");
        ensure!(stride == 1 || stride == 2, "conv2d stride must be 1 or 2");
        let k = ws[2];
        let pad = k / 2;
        let (h, wd) = (xs[1], xs[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Ok((ws[0], ConvGeom { cin: xs[0], h, w: wd, k, stride, pad, ho, wo }))
    }

    /// Same-padded 2D convolution with stride 1 or 2.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (cout, g) = self.conv_geom(x, w, stride)?;
        ensure!(self.shape(b) == [cout], "conv2d bias must be [{cout}]");
        let cols = g.im2col(self.value(x));
        let n = g.cols();
        let mut out = vec![0.0; cout * n];
        gemm(cout, g.rows(), n, self.value(w), false, &cols, false, &mut out, 0.0);
        for (co, &bias) in self.value(b).iter().enumerate() {
            out[co * n..(co + 1) * n].iter_mut().for_each(|v| *v += bias);
        }
        Ok(self.push(Op::Conv2d { x, w, b, stride }, vec![cout, g.ho, g.wo], out, &[x, w, b]))
    }

    /// Nearest-neighbor 2x upsampling of `[C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 3, "upsample input must be [C, H, W]");
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = xv[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(Op::Upsample2(x), vec![c, 2 * h, 2 * w], out, &[x]))
    }

    /// `W x + b` with `x` flattened.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = self.nodes[x.0].len;
        let ws = self.shape(w);
        ensure!(ws.len() == 2 && ws[1] == n, "dense weight {ws:?} does not accept {n} inputs");
        let m = ws[0];
        ensure!(self.shape(b) == [m], "dense bias must be [{m}]");
        let mut out = self.value(b).to_vec();
        gemm(m, n, 1, self.value(w), false, self.value(x), false, &mut out, 1.0);
        Ok(self.push(Op::Dense { x, w, b }, vec![m], out, &[x, w, b]))
    }

    /// Valid 1D convolution over time-major `[T, Cin]` with weight
    /// `[Cout, Cin, k]`, giving `[T - k + 1, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        ensure!(xs.len() == 2, "conv1d input must be [T, C], got {xs:?}");
        ensure!(ws.len() == 3 && ws[1] == xs[1], "conv1d weight {ws:?} does not fit input {xs:?}");
        let (t, cin, cout, k) = (xs[0], xs[1], ws[0], ws[2]);
        ensure!(k >= 1 && k <= t, "conv1d kernel {k} longer than sequence {t}");
        ensure!(self.shape(b) == [cout], "conv1d bias must be [{cout}]");
        let to = t - k + 1;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; to * cout];
        for s in 0..to {
            for co in 0..cout {
                let mut acc = bv[co];
                for ci in 0..cin {
                    for j in 0..k {
                        acc += wv[(co * cin + ci) * k + j] * xv[(s + j) * cin + ci];
                    }
                }
                out[s * cout + co] = acc;
            }
        }
        Ok(self.push(Op::Conv1d { x, w, b }, vec![to, cout], out, &[x, w, b]))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(op, shape, out, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::Leaky(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        ensure!(
            self.nodes[a.0].len == self.nodes[b.0].len,
            "elementwise operands differ: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape, out, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Flat range `[start, start + len)` as a 1D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.nodes[x.0].len;
        ensure!(start + len <= n, "slice [{start}, {}) exceeds length {n}", start + len);
        let out = self.value(x)[start..start + len].to_vec();
        Ok(self.push(Op::Slice(x, start), vec![len], out, &[x]))
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat needs at least one part");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            ensure!(s[1..] == tail[..], "concat parts disagree in trailing dims: {s:?} vs {tail:?}");
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Op::Concat(parts.to_vec()), shape, out, parts))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        ensure!(
            shape.iter().product::<usize>() == self.nodes[x.0].len,
            "cannot reshape {:?} into {shape:?}",
            self.shape(x)
        );
        let out = self.value(x).to_vec();
        Ok(self.push(Op::Reshape(x), shape, out, &[x]))
    }

    /// Stream function `[1, H, W]` to velocity `[2, H, W]`.
    pub fn curl(&mut self, psi: Var) -> Result<Var> {
        let s = self.shape(psi).to_vec();
        ensure!(s.len() == 3 && s[0] == 1, "curl input must be [1, H, W], got {s:?}");
        let (h, w) = (s[1], s[2]);
        let mut out = vec![0.0; 2 * h * w];
        let (ux, uy) = out.split_at_mut(h * w);
        curl_into(self.value(psi), w, h, ux, uy);
        Ok(self.push(Op::Curl(psi), vec![2, h, w], out, &[psi]))
    }

    /// Per-channel `(d/dx, d/dy)`: `[C, H, W]` to `[2C, H, W]`.
    pub fn grad2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 3, "grad2 input must be [C, H, W], got {s:?}");
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = vec![0.0; 2 * c * h * w];
        for ch in 0..c {
            let src = &xv[ch * h * w..(ch + 1) * h * w];
            let (dx, dy) = out[2 * ch * h * w..(2 * ch + 2) * h * w].split_at_mut(h * w);
            for j in 0..h {
                let sy = diff_stencil(h, j);
                for i in 0..w {
                    let sx = diff_stencil(w, i);
                    dx[j * w + i] = sx.iter().map(|&(ii, cf)| cf * src[j * w + ii]).sum();
                    dy[j * w + i] = sy.iter().map(|&(jj, cf)| cf * src[jj * w + i]).sum();
                }
            }
        }
        Ok(self.push(Op::Grad2(x), vec![2 * c, h, w], out, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Op::Sum(x), vec![1], vec![s], &[x])
    }

    pub fn abs_sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v.abs()).sum();
        self.push(Op::AbsSum(x), vec![1], vec![s], &[x])
    }

    pub fn abs_mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().map(|v| v.abs()).sum::<f64>() / v.len().max(1) as f64;
        self.push(Op::AbsMean(x), vec![1], vec![s], &[x])
    }

    pub fn sq_mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().map(|v| v * v).sum::<f64>() / v.len().max(1) as f64;
        self.push(Op::SqMean(x), vec![1], vec![s], &[x])
    }

    /// `sum_i c_i * x_i` over scalar nodes.
    pub fn weighted(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in terms {
            ensure!(self.nodes[v.0].len == 1, "weighted sum expects scalar terms");
            s += c * self.value(v)[0];
        }
        let deps: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Op::Weighted(terms.to_vec()), vec![1], vec![s], &deps))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(self.nodes[loss.0].len == 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut pgrads = self.params.zeros_like();
        let mut inputs = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            macro_rules! acc {
                ($v:expr) => {
                    slot(&mut grads, &self.nodes, $v)
                };
            }
            match &node.op {
                Op::Input => {
                    inputs.insert(i, g);
                }
                Op::Param(id) => add_into(&mut pgrads.0[*id], &g),
                &Op::Conv2d { x, w, b, stride } => {
                    let (cout, geo) = self.conv_geom(x, w, stride)?;
                    let n = geo.cols();
                    let cols = geo.im2col(self.value(x));
                    if let Some(gw) = acc!(w) {
                        gemm(cout, n, geo.rows(), &g, false, &cols, true, gw, 1.0);
                    }
                    if let Some(gb) = acc!(b) {
                        for (co, gbv) in gb.iter_mut().enumerate() {
                            *gbv += g[co * n..(co + 1) * n].iter().sum::<f64>();
                        }
                    }
                    let wv = self.value(w);
                    if let Some(gx) = acc!(x) {
                        let mut dcols = vec![0.0; geo.rows() * n];
                        gemm(geo.rows(), cout, n, wv, true, &g, false, &mut dcols, 0.0);
                        geo.col2im_add(&dcols, gx);
                    }
                }
                &Op::Upsample2(x) => {
                    let s = &self.nodes[x.0].shape;
                    let (c, h, w) = (s[0], s[1], s[2]);
                    if let Some(gx) = acc!(x) {
                        for ch in 0..c {
                            for y in 0..2 * h {
                                for xx in 0..2 * w {
                                    gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                                }
                            }
                        }
                    }
                }
                &Op::Dense { x, w, b } => {
                    let m = g.len();
                    let n = self.nodes[x.0].len;
                    let xv = self.value(x);
                    let wv = self.value(w);
                    if let Some(gw) = acc!(w) {
                        gemm(m, 1, n, &g, false, xv, false, gw, 1.0);
                    }
                    if let Some(gb) = acc!(b) {
                        add_into(gb, &g);
                    }
                    if let Some(gx) = acc!(x) {
                        gemm(n, m, 1, wv, true, &g, false, gx, 1.0);
                    }
                }
                &Op::Conv1d { x, w, b } => {
                    let xs = &self.nodes[x.0].shape;
                    let ws = &self.nodes[w.0].shape;
                    let (cin, cout, k) = (xs[1], ws[0], ws[2]);
                    let to = node.shape[0];
                    let xv = self.value(x);
                    let wv = self.value(w);
                    if let Some(gw) = acc!(w) {
                        for s in 0..to {
                            for co in 0..cout {
                                let go = g[s * cout + co];
                                for ci in 0..cin {
                                    for j in 0..k {
                                        gw[(co * cin + ci) * k + j] += go * xv[(s + j) * cin + ci];
                                    }
                                }
                            }
                        }
                    }
                    if let Some(gb) = acc!(b) {
                        for s in 0..to {
                            add_into(gb, &g[s * cout..(s + 1) * cout]);
                        }
                    }
                    if let Some(gx) = acc!(x) {
                        for s in 0..to {
                            for co in 0..cout {
                                let go = g[s * cout + co];
                                for ci in 0..cin {
                                    for j in 0..k {
                                        gx[(s + j) * cin + ci] += go * wv[(co * cin + ci) * k + j];
                                    }
                                }
                            }
                        }
                    }
                }
                &Op::Leaky(x, slope) => {
                    let xv = self.value(x);
                    if let Some(gx) = acc!(x) {
                        for ((d, &gv), &v) in gx.iter_mut().zip(&g).zip(xv) {
                            *d += if v > 0.0 { gv } else { slope * gv };
                        }
                    }
                }
                &Op::Sigmoid(x) => {
                    if let Some(gx) = acc!(x) {
                        for ((d, &gv), &y) in gx.iter_mut().zip(&g).zip(&node.value) {
                            *d += gv * y * (1.0 - y);
                        }
                    }
                }
                &Op::Tanh(x) => {
                    if let Some(gx) = acc!(x) {
                        for ((d, &gv), &y) in gx.iter_mut().zip(&g).zip(&node.value) {
                            *d += gv * (1.0 - y * y);
                        }
                    }
                }
                &Op::Add(a, b) => {
                    if let Some(ga) = acc!(a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = acc!(b) {
                        add_into(gb, &g);
                    }
                }
                &Op::Sub(a, b) => {
                    if let Some(ga) = acc!(a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = acc!(b) {
                        gb.iter_mut().zip(&g).for_each(|(d, s)| *d -= s);
                    }
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    if let Some(ga) = acc!(a) {
                        for ((d, &gv), &y) in ga.iter_mut().zip(&g).zip(bv) {
                            *d += gv * y;
                        }
                    }
                    if let Some(gb) = acc!(b) {
                        for ((d, &gv), &y) in gb.iter_mut().zip(&g).zip(av) {
                            *d += gv * y;
                        }
                    }
                }
                &Op::Slice(x, start) => {
                    if let Some(gx) = acc!(x) {
                        add_into(&mut gx[start..start + g.len()], &g);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].len;
                        if let Some(gp) = acc!(p) {
                            add_into(gp, &g[off..off + n]);
                        }
                        off += n;
                    }
                }
                &Op::Reshape(x) => {
                    if let Some(gx) = acc!(x) {
                        add_into(gx, &g);
                    }
                }
                &Op::Curl(psi) => {
                    let (h, w) = (node.shape[1], node.shape[2]);
                    if let Some(gp) = acc!(psi) {
                        curl_adjoint(&g[..h * w], &g[h * w..], w, h, gp);
                    }
                }
                &Op::Grad2(x) => {
                    let s = &self.nodes[x.0].shape;
                    let (c, h, w) = (s[0], s[1], s[2]);
                    if let Some(gx) = acc!(x) {
                        for ch in 0..c {
                            let gdx = &g[2 * ch * h * w..(2 * ch + 1) * h * w];
                            let gdy = &g[(2 * ch + 1) * h * w..(2 * ch + 2) * h * w];
                            let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
                            for j in 0..h {
                                let sy = diff_stencil(h, j);
                                for i in 0..w {
                                    let sx = diff_stencil(w, i);
                                    let k = j * w + i;
                                    for &(ii, cf) in &sx {
                                        dst[j * w + ii] += cf * gdx[k];
                                    }
                                    for &(jj, cf) in &sy {
                                        dst[jj * w + i] += cf * gdy[k];
                                    }
                                }
                            }
                        }
                    }
                }
                &Op::Sum(x) => {
                    if let Some(gx) = acc!(x) {
                        gx.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                &Op::AbsSum(x) | &Op::AbsMean(x) => {
                    let xv = self.value(x);
                    let scale = match node.op {
                        Op::AbsMean(_) => g[0] / xv.len().max(1) as f64,
                        _ => g[0],
                    };
                    if let Some(gx) = acc!(x) {
                        for (d, &v) in gx.iter_mut().zip(xv) {
                            *d += scale * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                        }
                    }
                }
                &Op::SqMean(x) => {
                    let xv = self.value(x);
                    let scale = 2.0 * g[0] / xv.len().max(1) as f64;
                    if let Some(gx) = acc!(x) {
                        for (d, &v) in gx.iter_mut().zip(xv) {
                            *d += scale * v;
                        }
                    }
                }
                Op::Weighted(terms) => {
                    for &(v, c) in terms {
                        if let Some(gv) = acc!(v) {
                            gv[0] += c * g[0];
                        }
                    }
                }
            }
        }
        Ok(Gradients { inputs, params: pgrads })
    }
}
