use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use super::AutodiffError;

/// Handle to a value recorded on a [`Tape`].
///
/// Handles carry the tape generation they were created in; a handle from a
/// tape that has since run `backward` is rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    index: u32,
    generation: u32,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Matmul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, active: Option<Arc<[u32]>> },
    Relu(Var),
    Softplus(Var),
    Binary { kind: BinaryKind, a: Var, b: Var },
    AddScalar(Var),
    MulScalar(Var, f64),
    Mean(Var),
    Concat { parts: Vec<Var> },
    GatherRows { x: Var, index: Arc<[u32]> },
    Reshape(Var),
    ScaleShift { x: Var, gamma: Var, beta: Var },
    Column { x: Var, col: usize },
    GaussianNll { mu: Var, var: Var, target: Var },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of executed operations.
///
/// Nodes are appended in execution order, so the record is always
/// topologically sorted. `backward` walks it once in reverse and then clears
/// it; the tape can be reused for the next forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    generation: u32,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), generation: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>, AutodiffError> {
        if v.generation != self.generation {
            return Err(AutodiffError::TapeConsumed);
        }
        self.nodes.get(v.index as usize).ok_or(AutodiffError::UnknownVar)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>, AutodiffError> {
        Ok(&self.node(v)?.value)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op, needs_grad: bool) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var { index, generation: self.generation })
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.index as usize].needs_grad)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, AutodiffError> {
        self.push("constant", value, Op::Leaf { param: None }, false)
    }

    /// Records a parameter. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var, AutodiffError> {
        let p = store.get(id);
        let trainable = !p.frozen;
        self.push("param", p.value.clone(), Op::Leaf { param: trainable.then_some(id) }, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = Tensor::new(vec![n, m], kernels::matmul_forward(av.data(), bv.data(), n, k, m))?;
        let g = self.grad_flag(&[a, b]);
        self.push("matmul", out, Op::Matmul { a, b }, g)
    }

    /// `x [n, in]`, `w [out, in]`, `b [out]` -> `[n, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let (xv, wv) = (self.value(x)?, self.value(w)?);
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err("linear", format!("input {sx:?} with weight {sw:?}")));
        }
        let bias = match b {
            Some(b) => {
                let bv = self.value(b)?;
                if bv.shape() != [sw[0]] {
                    return Err(shape_err("linear", format!("bias {:?} for {} outputs", bv.shape(), sw[0])));
                }
                Some(bv.data())
            }
            None => None,
        };
        let (n, d_in, d_out) = (sx[0], sx[1], sw[0]);
        let out = kernels::linear_forward(xv.data(), wv.data(), bias, n, d_in, d_out);
        let out = Tensor::new(vec![n, d_out], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.grad_flag(&deps);
        self.push("linear", out, Op::Linear { x, w, b }, g)
    }

    /// Stride-1 zero-padded convolution. `x [H, W, Cin]`, `w [Cout, kh, kw, Cin]`
    /// with odd kernel sizes, `b [Cout]` -> `[H, W, Cout]`.
    ///
    /// When `active` is given only those output pixels (row-major indices) are
    /// computed; all others are zero and pass no gradient.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        active: Option<Arc<[u32]>>,
    ) -> Result<Var, AutodiffError> {
        let (xv, wv) = (self.value(x)?, self.value(w)?);
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 3 || sw.len() != 4 || sx[2] != sw[3] || sw[1] % 2 == 0 || sw[2] % 2 == 0 {
            return Err(shape_err("conv2d", format!("input {sx:?} with kernel {sw:?}")));
        }
        let geom = ConvGeom { height: sx[0], width: sx[1], c_in: sx[2], c_out: sw[0], kh: sw[1], kw: sw[2] };
        let bias = match b {
            Some(b) => {
                let bv = self.value(b)?;
                if bv.shape() != [geom.c_out] {
                    return Err(shape_err("conv2d", format!("bias {:?} for {} channels", bv.shape(), geom.c_out)));
                }
                Some(bv.data())
            }
            None => None,
        };
        if let Some(list) = active.as_deref() {
            let n = (geom.height * geom.width) as u32;
            if let Some(bad) = list.iter().find(|&&p| p >= n) {
                return Err(shape_err("conv2d", format!("active pixel {bad} outside {}x{}", geom.height, geom.width)));
            }
        }
        let out = kernels::conv2d_forward(xv.data(), wv.data(), bias, &geom, active.as_deref());
        let out = Tensor::new(vec![geom.height, geom.width, geom.c_out], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.grad_flag(&deps);
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom, active }, g)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, AutodiffError> {
        let xv = self.value(x)?;
        let data = xv.data().iter().map(|v| T::from_f64(f(v.as_f64()))).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.grad_flag(&[x]);
        self.push(name, out, op, g)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary("softplus", x, kernels::softplus, Op::Softplus(x))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var, AutodiffError> {
        self.unary("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var, AutodiffError> {
        self.unary("mul_scalar", x, |v| v * s, Op::MulScalar(x, s))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (av, bv) = (self.value(a)?, self.value(b)?);
        let shape = if av.shape() == bv.shape() || bv.is_scalar() {
            av.shape().to_vec()
        } else if av.is_scalar() {
            bv.shape().to_vec()
        } else {
            return Err(shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        };
        let n: usize = shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (ad, bd) = (av.data(), bv.data());
        let pick = |d: &[T], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let data = (0..n).map(|i| T::from_f64(f(pick(ad, i).as_f64(), pick(bd, i).as_f64()))).collect();
        let out = Tensor::new(shape, data)?;
        let g = self.grad_flag(&[a, b]);
        self.push(name, out, Op::Binary { kind, a, b }, g)
    }

    /// Elementwise; either side may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x)?;
        if xv.is_empty() {
            return Err(shape_err("mean", "empty input".into()));
        }
        let s: f64 = xv.data().iter().map(|v| v.as_f64()).sum();
        let out = Tensor::scalar(T::from_f64(s / xv.len() as f64));
        let g = self.grad_flag(&[x]);
        self.push("mean", out, Op::Mean(x), g)
    }

    /// Concatenates `[n, c_i]` matrices along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p)?.shape();
            if s.len() != 2 || rows.is_some_and(|r| r != s[0]) {
                return Err(shape_err("concat", format!("part {s:?} with {rows:?} rows")));
            }
            rows = Some(s[0]);
            widths.push(s[1]);
        }
        let rows = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.index as usize].value.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let g = self.grad_flag(parts);
        self.push("concat", out, Op::Concat { parts: parts.to_vec() }, g)
    }

    /// Selects rows of `[n, d]` (or elements of `[n]`) by index.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[u32]>) -> Result<Var, AutodiffError> {
        let xv = self.value(x)?;
        let s = xv.shape();
        if s.is_empty() || s.len() > 2 {
            return Err(shape_err("gather_rows", format!("input {s:?}")));
        }
        let d = if s.len() == 2 { s[1] } else { 1 };
        if let Some(bad) = index.iter().find(|&&i| i as usize >= s[0]) {
            return Err(shape_err("gather_rows", format!("row {bad} of {}", s[0])));
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index.iter() {
            let i = i as usize;
            data.extend_from_slice(&xv.data()[i * d..(i + 1) * d]);
        }
        let shape = if s.len() == 2 { vec![index.len(), d] } else { vec![index.len()] };
        let out = Tensor::new(shape, data)?;
        let g = self.grad_flag(&[x]);
        self.push("gather_rows", out, Op::GatherRows { x, index }, g)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let out = self.value(x)?.clone().reshaped(shape)?;
        let g = self.grad_flag(&[x]);
        self.push("reshape", out, Op::Reshape(x), g)
    }

    /// `gamma * x + beta` per channel, where channels are the last dimension.
    pub fn scale_shift(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        let (xv, gv, bv) = (self.value(x)?, self.value(gamma)?, self.value(beta)?);
        let c = *xv.shape().last().unwrap_or(&0);
        if xv.shape().is_empty() || gv.shape() != [c] || bv.shape() != [c] {
            return Err(shape_err(
                "scale_shift",
                format!("input {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let (g, b) = (gv.data(), bv.data());
        let data = xv
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&v, &g), &b)| v * g + b))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let flag = self.grad_flag(&[x, gamma, beta]);
        self.push("scale_shift", out, Op::ScaleShift { x, gamma, beta }, flag)
    }

    /// Column `col` of an `[n, c]` matrix as an `[n]` vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x)?;
        let s = xv.shape();
        if s.len() != 2 || col >= s[1] {
            return Err(shape_err("column", format!("column {col} of {s:?}")));
        }
        let data = xv.data().chunks_exact(s[1]).map(|r| r[col]).collect();
        let out = Tensor::new(vec![s[0]], data)?;
        let g = self.grad_flag(&[x]);
        self.push("column", out, Op::Column { x, col }, g)
    }

    /// Mean Gaussian negative log-likelihood,
    /// `mean(0.5 ln(2 pi var) + (target - mu)^2 / (2 var))`.
    pub fn gaussian_nll(&mut self, mu: Var, var: Var, target: Var) -> Result<Var, AutodiffError> {
        let (mv, vv, tv) = (self.value(mu)?, self.value(var)?, self.value(target)?);
        if mv.shape() != vv.shape() || mv.shape() != tv.shape() {
            return Err(shape_err(
                "gaussian_nll",
                format!("mu {:?}, var {:?}, target {:?}", mv.shape(), vv.shape(), tv.shape()),
            ));
        }
        if mv.is_empty() {
            return Err(shape_err("gaussian_nll", "empty input".into()));
        }
        if let Some((index, v)) = vv.data().iter().enumerate().find(|(_, v)| v.as_f64() <= 0.0) {
            return Err(AutodiffError::NonPositiveVariance { index, value: v.as_f64() });
        }
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let mut s = 0.0;
        for ((m, v), t) in mv.data().iter().zip(vv.data()).zip(tv.data()) {
            let (m, v, t) = (m.as_f64(), v.as_f64(), t.as_f64());
            s += 0.5 * (ln_2pi + v.ln()) + (t - m) * (t - m) / (2.0 * v);
        }
        let out = Tensor::scalar(T::from_f64(s / mv.len() as f64));
        let g = self.grad_flag(&[mu, var, target]);
        self.push("gaussian_nll", out, Op::GaussianNll { mu, var, target }, g)
    }

    /// Back-propagates from the scalar `loss`, adds each trainable parameter's
    /// gradient into `store`, and clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<(), AutodiffError> {
        let lv = self.value(loss)?;
        if !lv.is_scalar() {
            return Err(AutodiffError::NotScalar { shape: lv.shape().to_vec() });
        }
        let n = loss.index as usize + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[n - 1] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads, store);
        }
        self.nodes.clear();
        self.generation = self.generation.wrapping_add(1);
        Ok(())
    }

    /// Drops all recorded nodes without computing gradients.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation = self.generation.wrapping_add(1);
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore<T>) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.index as usize].value;
        let wants = |v: Var| self.nodes[v.index as usize].needs_grad;
        let mut send = |v: Var, delta: Vec<f64>| {
            let slot = &mut grads[v.index as usize];
            match slot {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf { param } => {
                if let Some(id) = param {
                    store.accumulate_grad(*id, g);
                }
            }
            Op::Matmul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (ga, gb) = kernels::matmul_backward(g, av.data(), bv.data(), n, k, m, (wants(*a), wants(*b)));
                if let Some(ga) = ga {
                    send(*a, ga);
                }
                if let Some(gb) = gb {
                    send(*b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, d_in, d_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                let need = (wants(*x), wants(*w), b.is_some_and(|b| wants(b)));
                let r = kernels::linear_backward(g, xv.data(), wv.data(), n, d_in, d_out, need);
                if let Some(gx) = r.x {
                    send(*x, gx);
                }
                if let Some(gw) = r.w {
                    send(*w, gw);
                }
                if let (Some(b), Some(gb)) = (b, r.b) {
                    send(*b, gb);
                }
            }
            Op::Conv2d { x, w, b, geom, active } => {
                let need = (wants(*x), wants(*w), b.is_some_and(|b| wants(b)));
                let r = kernels::conv2d_backward(g, val(*x).data(), val(*w).data(), geom, active.as_deref(), need);
                if let Some(gx) = r.x {
                    send(*x, gx);
                }
                if let Some(gw) = r.w {
                    send(*w, gw);
                }
                if let (Some(b), Some(gb)) = (b, r.b) {
                    send(*b, gb);
                }
            }
            Op::Relu(x) => {
                let d = val(*x).data().iter().zip(g).map(|(v, g)| if v.as_f64() > 0.0 { *g } else { 0.0 }).collect();
                send(*x, d);
            }
            Op::Softplus(x) => {
                let d = val(*x).data().iter().zip(g).map(|(v, g)| g * kernels::sigmoid(v.as_f64())).collect();
                send(*x, d);
            }
            Op::AddScalar(x) => send(*x, g.to_vec()),
            Op::MulScalar(x, s) => send(*x, g.iter().map(|g| g * s).collect()),
            Op::Binary { kind, a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let pick = |d: &[T], i: usize| if d.len() == 1 { d[0].as_f64() } else { d[i].as_f64() };
                let (mut da, mut db) = (vec![0.0; av.len()], vec![0.0; bv.len()]);
                for (i, &gi) in g.iter().enumerate() {
                    let (x, y) = (pick(av.data(), i), pick(bv.data(), i));
                    let (dx, dy) = match kind {
                        BinaryKind::Add => (gi, gi),
                        BinaryKind::Sub => (gi, -gi),
                        BinaryKind::Mul => (gi * y, gi * x),
                        BinaryKind::Div => (gi / y, -gi * x / (y * y)),
                    };
                    da[if av.len() == 1 { 0 } else { i }] += dx;
                    db[if bv.len() == 1 { 0 } else { i }] += dy;
                }
                if wants(*a) {
                    send(*a, da);
                }
                if wants(*b) {
                    send(*b, db);
                }
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|&p| val(p).shape()[1]).sum();
                let mut offset = 0;
                for &p in parts {
                    let s = val(p).shape();
                    let (rows, w) = (s[0], s[1]);
                    if wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        send(p, d);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, index } => {
                let xv = val(*x);
                let d = if xv.shape().len() == 2 { xv.shape()[1] } else { 1 };
                let mut acc = vec![0.0; xv.len()];
                for (k, &row) in index.iter().enumerate() {
                    let row = row as usize;
                    for (a, gv) in acc[row * d..(row + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                        *a += gv;
                    }
                }
                send(*x, acc);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::ScaleShift { x, gamma, beta } => {
                let (xv, gv) = (val(*x), val(*gamma));
                let c = gv.len();
                if wants(*x) {
                    let gd = gv.data();
                    send(*x, g.iter().enumerate().map(|(i, gi)| gi * gd[i % c].as_f64()).collect());
                }
                if wants(*gamma) {
                    let mut dg = vec![0.0; c];
                    for (i, (gi, v)) in g.iter().zip(xv.data()).enumerate() {
                        dg[i % c] += gi * v.as_f64();
                    }
                    send(*gamma, dg);
                }
                if wants(*beta) {
                    let mut db = vec![0.0; c];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % c] += gi;
                    }
                    send(*beta, db);
                }
            }
            Op::Column { x, col } => {
                let s = val(*x).shape();
                let mut d = vec![0.0; s[0] * s[1]];
                for (r, gi) in g.iter().enumerate() {
                    d[r * s[1] + col] = *gi;
                }
                send(*x, d);
            }
            Op::GaussianNll { mu, var, target } => {
                let (mv, vv, tv) = (val(*mu), val(*var), val(*target));
                let scale = g[0] / mv.len() as f64;
                let n = mv.len();
                let (mut dm, mut dv, mut dt) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let (m, v, t) = (mv.data()[i].as_f64(), vv.data()[i].as_f64(), tv.data()[i].as_f64());
                    let r = t - m;
                    dm[i] = -scale * r / v;
                    dv[i] = scale * (0.5 / v - r * r / (2.0 * v * v));
                    dt[i] = scale * r / v;
                }
                if wants(*mu) {
                    send(*mu, dm);
                }
                if wants(*var) {
                    send(*var, dv);
                }
                if wants(*target) {
                    send(*target, dt);
                }
            }
        }
    }
}
